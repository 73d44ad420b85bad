import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from sparsefield.effector import (
    EffectorState,
    SpecError,
    allocate,
    energy_pen,
    energy_pose,
    energy_spen,
    forward_kinematics,
    kinematics,
    load_bundled_hand,
    load_spec,
    load_state,
    place_points,
    point_jacobian,
    sample_query_points,
    save_state,
    select_sites,
    simple_hand_spec,
    spec_from_dict,
    spec_to_dict,
    sphere_centers,
)


def link(name, parent=None, xyz=(0, 0, 0), rpy=(0, 0, 0), joint=None, weight=0.0, sites=(), spheres=()):
    d = {"name": name, "parent": parent, "origin": {"xyz": list(xyz), "rpy": list(rpy)},
         "sample_weight": weight, "sites": [list(s) for s in sites],
         "spheres": [{"center": list(c), "radius": r} for c, r in spheres]}
    if joint:
        d["joint"] = joint
    return d


def rev(axis=(0, 0, 1), lo=-3.0, hi=3.0):
    return {"type": "revolute", "axis": list(axis), "limits": [lo, hi]}


def make_spec(links, adjacent=()):
    return spec_from_dict({"format_version": 1, "name": "t", "links": links, "adjacent": list(adjacent)})


def chain3(rng):
    links = [link("base", weight=1.0, sites=[(0, 0, 0)], spheres=[((0, 0, 0), 0.02)])]
    parent = "base"
    for k in range(3):
        axis = rng.normal(size=3)
        links.append(link(f"l{k}", parent, rng.normal(size=3) * 0.05, rng.normal(size=3),
                          rev(axis / np.linalg.norm(axis)), 1.0, rng.normal(size=(4, 3)) * 0.02,
                          [((0.01, 0, 0), 0.01)]))
        parent = f"l{k}"
    links.append(link("slide", parent, (0.02, 0, 0), joint={"type": "prismatic", "axis": [1, 0, 0], "limits": [0, 0.05]},
                      weight=1.0, sites=[(0.0, 0.01, 0.0)], spheres=[((0, 0, 0), 0.005)]))
    return make_spec(links)


def hom(R, t):
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = t
    return m


# --- spec -----------------------------------------------------------------------


def test_spec_validation():
    ok = link("root", weight=1.0, sites=[(0, 0, 0)])
    make_spec([ok])
    with pytest.raises(SpecError):
        make_spec([ok, link("r2", weight=1.0, sites=[(0, 0, 0)])])
    with pytest.raises(SpecError):
        make_spec([ok, link("a", "missing")])
    with pytest.raises(SpecError):
        make_spec([ok, link("a", "root", joint=rev(lo=1.0, hi=0.0))])
    with pytest.raises(SpecError):
        make_spec([ok, link("a", "root", joint=rev(axis=(0, 0, 2)))])
    with pytest.raises(SpecError):
        make_spec([link("root", weight=1.0, sites=[(0, 0, 0)], spheres=[((0, 0, 0), 0.0)])])
    with pytest.raises(SpecError):
        make_spec([link("root", weight=1.0)])
    with pytest.raises(SpecError):
        make_spec([link("root", sites=[(0, 0, 0)])])
    with pytest.raises(SpecError):
        make_spec([ok, link("a", "b"), link("b", "a")])


def test_spec_round_trip(tmp_path, rng):
    spec = chain3(rng)
    again = spec_from_dict(spec_to_dict(spec))
    beta = rng.normal(size=spec.dim) * 0.3
    for a, b in zip(forward_kinematics(spec, beta), forward_kinematics(again, beta)):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)


def test_bundled_hand():
    hand = load_bundled_hand()
    assert hand.n_joints == 22 and hand.dim == 28
    fresh = spec_to_dict(simple_hand_spec())
    stored = spec_to_dict(hand)
    assert fresh == stored
    assert len(hand.spen_pairs) > 0
    # fingers get denser sampling than the palm
    sel = select_sites(hand, 64, 0)
    palm = hand.link_index["palm"]
    assert 0 < np.sum(sel.link_ids == palm) < 64 / 5


def test_state_round_trip(tmp_path, rng):
    hand = load_bundled_hand()
    st = EffectorState(rng.normal(size=hand.dim))
    save_state(st, tmp_path / "s.json", hand)
    back = load_state(tmp_path / "s.json", hand)
    assert back.beta.tobytes() == st.beta.tobytes()
    with pytest.raises(SpecError):
        load_state(tmp_path / "s.json", chain3(rng))
    with pytest.raises(ValueError):
        EffectorState([0.0, np.inf, 0, 0, 0, 0])


# --- kinematics ---------------------------------------------------------------------


def test_fk_zero_state_composes_origins(rng):
    spec = chain3(rng)
    fk = forward_kinematics(spec, np.zeros(spec.dim))
    acc = np.eye(4)
    for i, l in enumerate(spec.links):
        acc = acc @ l.origin.matrix()
        np.testing.assert_allclose(fk[i].matrix(), acc, atol=1e-15)


def test_revolute_quarter_turn():
    spec = make_spec([link("root", weight=1.0, sites=[(0, 0, 0)]),
                      link("a", "root", joint=rev()),
                      link("tip", "a", xyz=(1, 0, 0))])
    fk = forward_kinematics(spec, np.r_[np.zeros(6), np.pi / 2])
    np.testing.assert_allclose(fk[2].translation, [0, 1, 0], atol=1e-15)


def test_fk_matches_matrix_product_oracle(rng):
    spec = chain3(rng)
    beta = np.r_[rng.normal(size=3), rng.normal(size=3), rng.normal(size=3), 0.02]
    fk = forward_kinematics(spec, beta)
    acc = hom(Rotation.from_rotvec(beta[:3]).as_matrix(), beta[3:6])
    for i, l in enumerate(spec.links):
        acc = acc @ l.origin.matrix()
        if l.joint is not None:
            q = beta[6 + spec.joint_of_link[i]]
            if l.joint.kind == "revolute":
                acc = acc @ hom(Rotation.from_rotvec(l.joint.axis * q).as_matrix(), np.zeros(3))
            else:
                acc = acc @ hom(np.eye(3), l.joint.axis * q)
        assert np.abs(fk[i].matrix() - acc).max() <= 1e-12


def test_fk_dimension_error(rng):
    with pytest.raises(ValueError):
        kinematics(chain3(rng), np.zeros(5))


def test_fk_rigid_sites(rng):
    hand = load_bundled_hand()
    sel = select_sites(hand, 200, 1)
    ref = None
    for _ in range(5):
        beta = np.r_[rng.normal(size=3), rng.normal(size=3), rng.uniform(hand.lo, hand.hi)]
        pts = place_points(kinematics(hand, beta), sel.link_ids, sel.local)
        d = [np.linalg.norm(pts[m][:, None] - pts[m][None], axis=-1)
             for m in (sel.link_ids == li for li in np.unique(sel.link_ids))]
        if ref is not None:
            assert max(np.abs(a - b).max() for a, b in zip(d, ref)) <= 1e-12
        ref = d


def test_point_jacobian_matches_finite_differences(rng):
    for spec in (chain3(rng), load_bundled_hand()):
        sel = select_sites(spec, 30, 2)
        beta = np.r_[rng.normal(size=3), rng.normal(size=3) * 0.1, rng.uniform(spec.lo, spec.hi)]
        kin = kinematics(spec, beta)
        pts = place_points(kin, sel.link_ids, sel.local)
        J = point_jacobian(spec, kin, sel.link_ids, pts)
        for d in range(spec.dim):
            e = np.zeros(spec.dim)
            e[d] = 1e-6
            fd = (place_points(kinematics(spec, beta + e), sel.link_ids, sel.local)
                  - place_points(kinematics(spec, beta - e), sel.link_ids, sel.local)) / 2e-6
            np.testing.assert_allclose(J[:, :, d], fd, atol=1e-8)


# --- sampling ---------------------------------------------------------------------------


def test_allocation():
    np.testing.assert_array_equal(allocate([3, 1], 8), [6, 2])
    np.testing.assert_array_equal(allocate([0, 5, 0], 7), [0, 7, 0])
    np.testing.assert_array_equal(allocate([1, 1, 1], 4), [2, 1, 1])
    assert allocate([0.3, 2.7, 1.1], 13).sum() == 13


def test_sampling_examples(rng):
    spec = make_spec([link("root", weight=0.0, sites=[(0, 0, 0)]),
                      link("a", "root", joint=rev(), weight=3.0, sites=rng.normal(size=(10, 3))),
                      link("b", "root", xyz=(1, 0, 0), weight=1.0, sites=rng.normal(size=(10, 3)))])
    sel = select_sites(spec, 8, 0)
    assert np.sum(sel.link_ids == 1) == 6 and np.sum(sel.link_ids == 2) == 2
    only = make_spec([link("root", weight=2.0, sites=rng.normal(size=(3, 3))), link("a", "root", sites=[(0, 0, 0)])])
    sel = select_sites(only, 7, 0)
    assert np.all(sel.link_ids == 0) and len(sel) == 7
    s1 = sample_query_points(spec, np.zeros(spec.dim), 8, seed=4)
    s2 = sample_query_points(spec, np.r_[0, 0, 1.0, 0.5, 0, 0, 1.0], 8, seed=4)
    np.testing.assert_array_equal(s1.local, s2.local)
    np.testing.assert_array_equal(s1.link_ids, s2.link_ids)
    assert not np.allclose(s1.points, s2.points)
    a, b = select_sites(spec, 8, 9), select_sites(spec, 8, 9)
    np.testing.assert_array_equal(a.local, b.local)


# --- energies -------------------------------------------------------------------------------


def two_sphere_spec():
    return make_spec([link("root", weight=1.0, sites=[(0, 0, 0)], spheres=[((0, 0, 0), 0.05)]),
                      link("a", "root", xyz=(0.06, 0, 0), joint=rev(), spheres=[((0, 0, 0), 0.03)]),
                      link("b", "a", xyz=(0.05, 0, 0), spheres=[((0, 0, 0), 0.02)])])


def brute_pen(centers, radii, pts):
    total = 0.0
    for x in pts:
        depths = [r - np.linalg.norm(x - c) for c, r in zip(centers, radii) if np.linalg.norm(x - c) < r]
        if depths:
            total += min(depths)
    return total


def test_energy_pen_examples(backend):
    spec = two_sphere_spec()
    zero = np.zeros(spec.dim)
    assert energy_pen(spec, zero, np.array([[1.0, 1.0, 1.0], [0, 0.5, 0]])) == 0.0
    assert energy_pen(spec, zero, np.zeros((1, 3))) == pytest.approx(0.05, abs=1e-15)
    rng = np.random.default_rng(8)
    pts = rng.uniform(-0.05, 0.12, size=(5, 3)) * [1, 0.3, 0.3]
    c = sphere_centers(spec, kinematics(spec, zero))
    assert energy_pen(spec, zero, pts) == pytest.approx(brute_pen(c, spec.sphere_radii, pts), abs=1e-15)


def test_energy_pen_monotone_along_line(backend):
    # one sphere moving off a half-space of points: every depth shrinks
    spec = make_spec([link("root", weight=1.0, sites=[(0, 0, 0)], spheres=[((0.01, 0, 0), 0.04)])])
    rng = np.random.default_rng(9)
    scene = rng.uniform(-0.05, 0.05, size=(3000, 3))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    scene = scene[(scene - [0.01, 0, 0]) @ direction <= 0]
    prev = np.inf
    for s in np.linspace(0, 0.2, 41):
        e = energy_pen(spec, np.r_[0, 0, 0, s * direction], scene)
        assert e <= prev
        prev = e
    assert prev == 0.0


def test_energy_pen_backends_and_gradient(rng):
    from sparsefield._accel import HAVE_NUMBA, set_backend

    hand = load_bundled_hand()
    scene = rng.uniform(-0.06, 0.06, size=(2000, 3))
    beta = np.r_[0.1, -0.2, 0.3, 0.0, 0.0, 0.0, np.full(hand.n_joints, 0.4)]
    out = []
    for b in (["numba", "numpy"] if HAVE_NUMBA else ["numpy"]):
        prev = set_backend(b)
        out.append(energy_pen(hand, beta, scene, want_grad=True))
        set_backend(prev)
    if len(out) == 2:
        assert out[0][0] == pytest.approx(out[1][0], rel=1e-12)
        np.testing.assert_allclose(out[0][1], out[1][1], rtol=1e-10, atol=1e-12)
    e, g = out[0]
    assert e > 0
    for d in range(hand.dim):
        step = np.zeros(hand.dim)
        step[d] = 1e-7
        fd = (energy_pen(hand, beta + step, scene) - energy_pen(hand, beta - step, scene)) / 2e-7
        assert abs(fd - g[d]) <= 1e-4 * max(1.0, abs(g[d]))


def test_energy_spen_examples():
    spec = two_sphere_spec()
    # links root and b are not adjacent (a sits between them)
    assert [tuple(p) for p in spec.spen_pairs] == [(0, 2)]
    assert energy_spen(spec, np.zeros(spec.dim)) == 0.0
    folded = np.r_[np.zeros(6), np.pi]  # b swings back onto the root sphere centre + 0.01
    c = sphere_centers(spec, kinematics(spec, folded))
    d = np.linalg.norm(c[0] - c[2])
    assert d == pytest.approx(0.01, abs=1e-12)
    assert energy_spen(spec, folded, margin=0.02) == pytest.approx(0.02 - d, abs=1e-15)
    coincide = make_spec([link("root", weight=1.0, sites=[(0, 0, 0)], spheres=[((0, 0, 0), 0.01)]),
                          link("x", "root", spheres=[((0, 0, 0), 0.01)]),
                          link("y", "x", spheres=[((0, 0, 0), 0.01)])])
    assert energy_spen(coincide, np.zeros(6), margin=0.01) == pytest.approx(0.01)


def test_energy_spen_double_loop_oracle(rng):
    links = [link("root", weight=1.0, sites=[(0, 0, 0)], spheres=[(rng.normal(size=3) * 0.01, 0.01)])]
    for k in range(5):
        links.append(link(f"l{k}", "root" if k == 0 else f"l{k - 1}", rng.normal(size=3) * 0.01, joint=rev(),
                          spheres=[(rng.normal(size=3) * 0.005, 0.01)]))
    spec = make_spec(links)
    beta = np.r_[rng.normal(size=6), rng.normal(size=5)]
    c = sphere_centers(spec, kinematics(spec, beta))
    adj = {(i, i + 1) for i in range(5)}
    oracle = sum(max(0.015 - np.linalg.norm(c[i] - c[j]), 0.0)
                 for i in range(6) for j in range(i + 1, 6) if (i, j) not in adj)
    assert energy_spen(spec, beta, margin=0.015) == pytest.approx(oracle, abs=1e-15)
    e, g = energy_spen(spec, beta, margin=0.015, want_grad=True)
    for d in range(spec.dim):
        step = np.zeros(spec.dim)
        step[d] = 1e-7
        fd = (energy_spen(spec, beta + step, 0.015) - energy_spen(spec, beta - step, 0.015)) / 2e-7
        assert abs(fd - g[d]) <= 1e-5


def test_energy_pose(rng):
    hand = load_bundled_hand()
    inside = np.r_[np.zeros(6), (hand.lo + hand.hi) / 2]
    assert energy_pose(hand, inside) == 0.0
    one = inside.copy()
    one[6] = hand.hi[0] + 0.1
    assert energy_pose(hand, one) == pytest.approx(0.01, abs=1e-15)
    beta = np.r_[np.zeros(6), rng.uniform(hand.lo - 1, hand.hi + 1)]
    oracle = sum(max(q - h, 0) ** 2 + max(l - q, 0) ** 2 for q, l, h in zip(beta[6:], hand.lo, hand.hi))
    assert energy_pose(hand, beta) == pytest.approx(oracle, rel=1e-14)
    _, g = energy_pose(hand, beta, want_grad=True)
    np.testing.assert_allclose(g[6:], 2 * np.maximum(beta[6:] - hand.hi, 0) - 2 * np.maximum(hand.lo - beta[6:], 0))


def test_energies_nonnegative(rng):
    hand = load_bundled_hand()
    scene = rng.uniform(-0.1, 0.1, size=(500, 3))
    for _ in range(10):
        beta = np.r_[rng.normal(size=3), rng.normal(size=3) * 0.05, rng.uniform(hand.lo - 0.5, hand.hi + 0.5)]
        assert energy_pen(hand, beta, scene) >= 0
        assert energy_spen(hand, beta) >= 0
        assert energy_pose(hand, beta) >= 0


def test_load_spec_file(tmp_path, rng):
    import json

    spec = chain3(rng)
    (tmp_path / "h.json").write_text(json.dumps(spec_to_dict(spec)))
    assert load_spec(tmp_path / "h.json").dim == spec.dim
