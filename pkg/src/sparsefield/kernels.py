"""Hot numeric kernels, each with a numba and a numpy implementation.

The public functions dispatch on :func:`sparsefield._accel.use_numba`.  Both
paths implement the same arithmetic; the numba path sums sequentially in
ascending point id, the numpy path uses numpy's reductions, so the two agree
to rounding but not bit for bit.
"""

import numpy as np

from ._accel import njit, use_numba

_CHUNK = 256  # query rows per block in the numpy path
_BUDGET = 1 << 22  # elements per temporary in the numpy path

_EMPTY_IDX = np.zeros((0, 0), dtype=np.int64)


# ---------------------------------------------------------------------------
# inverse-squared-distance interpolation
# ---------------------------------------------------------------------------


@njit
def _idw_nb(points, feats, queries, eps2, idx, use_idx, want_grad):
    m_count = queries.shape[0]
    c_count = feats.shape[1]
    n_terms = idx.shape[1] if use_idx else points.shape[0]
    out = np.zeros((m_count, c_count))
    grad = np.zeros((m_count, c_count, 3)) if want_grad else np.zeros((0, c_count, 3))
    hit = np.full(m_count, -1, dtype=np.int64)
    acc = np.zeros(c_count)
    gacc = np.zeros((c_count, 3))
    for m in range(m_count):
        qx = queries[m, 0]
        qy = queries[m, 1]
        qz = queries[m, 2]
        # nearest point first, for the singularity guard
        best = np.inf
        best_i = -1
        for j in range(n_terms):
            i = idx[m, j] if use_idx else j
            dx = qx - points[i, 0]
            dy = qy - points[i, 1]
            dz = qz - points[i, 2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
                best_i = i
        if best <= eps2:
            hit[m] = best_i
            for c in range(c_count):
                out[m, c] = feats[best_i, c]
            continue
        s = 0.0
        gs0 = 0.0
        gs1 = 0.0
        gs2 = 0.0
        for c in range(c_count):
            acc[c] = 0.0
            if want_grad:
                gacc[c, 0] = 0.0
                gacc[c, 1] = 0.0
                gacc[c, 2] = 0.0
        for j in range(n_terms):
            i = idx[m, j] if use_idx else j
            dx = qx - points[i, 0]
            dy = qy - points[i, 1]
            dz = qz - points[i, 2]
            d2 = dx * dx + dy * dy + dz * dz
            w = 1.0 / d2
            s += w
            for c in range(c_count):
                acc[c] += w * feats[i, c]
            if want_grad:
                k = -2.0 * w * w
                g0 = k * dx
                g1 = k * dy
                g2 = k * dz
                gs0 += g0
                gs1 += g1
                gs2 += g2
                for c in range(c_count):
                    f = feats[i, c]
                    gacc[c, 0] += g0 * f
                    gacc[c, 1] += g1 * f
                    gacc[c, 2] += g2 * f
        for c in range(c_count):
            out[m, c] = acc[c] / s
        if want_grad:
            for c in range(c_count):
                v = out[m, c]
                grad[m, c, 0] = (gacc[c, 0] - v * gs0) / s
                grad[m, c, 1] = (gacc[c, 1] - v * gs1) / s
                grad[m, c, 2] = (gacc[c, 2] - v * gs2) / s
    return out, grad, hit


def _idw_np(points, feats, queries, eps2, idx, use_idx, want_grad):
    # Reductions over the point axis run as strided sums, which numpy
    # accumulates sequentially per output element; a row's result therefore
    # does not depend on how many other rows share its chunk.
    m_count = queries.shape[0]
    c_count = feats.shape[1]
    n_cols = idx.shape[1] if use_idx else points.shape[0]
    out = np.zeros((m_count, c_count))
    grad = np.zeros((m_count, c_count, 3)) if want_grad else np.zeros((0, c_count, 3))
    hit = np.full(m_count, -1, dtype=np.int64)
    per_row = n_cols * c_count * (3 if want_grad else 1)
    step = max(1, min(_CHUNK, _BUDGET // max(per_row, 1)))
    for lo in range(0, m_count, step):
        hi = min(lo + step, m_count)
        q = queries[lo:hi]
        if use_idx:
            ids = idx[lo:hi]
            diff = q[:, None, :] - points[ids]
            f = feats[ids]  # (m, k, C)
        else:
            diff = q[:, None, :] - points[None, :, :]
            f = feats[None]
        d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        arg = np.argmin(d2, axis=1)
        dmin = d2[np.arange(hi - lo), arg]
        is_hit = dmin <= eps2
        safe = np.where(is_hit[:, None], 1.0, d2)
        w = 1.0 / safe
        s = w[:, :, None].sum(axis=1)[:, 0]
        vals = (w[:, :, None] * f).sum(axis=1) / s[:, None]
        if want_grad:
            gw = (-2.0 * w * w)[..., None] * diff  # (m, n, 3)
            gs = gw.sum(axis=1)
            ga = (f[:, :, :, None] * gw[:, :, None, :]).sum(axis=1)
            g = (ga - vals[:, :, None] * gs[:, None, :]) / s[:, None, None]
            g[is_hit] = 0.0
            grad[lo:hi] = g
        if np.any(is_hit):
            rows = np.nonzero(is_hit)[0]
            nearest = ids[rows, arg[rows]] if use_idx else arg[rows]
            vals[rows] = feats[nearest]
            hit[lo + rows] = nearest
        out[lo:hi] = vals
    return out, grad, hit


def idw(points, feats, queries, eps_hit, nbr=None, want_grad=False):
    """Interpolate ``feats`` at ``queries`` with weights 1/d^2.

    ``nbr`` (M x k, ascending ids per row) restricts each query's sum to
    those points; ``None`` sums over all points.  Returns ``(values, grads,
    hit)`` where ``hit[m]`` is the id of a point within ``eps_hit`` of query
    ``m`` (its feature is returned verbatim and its gradient left at zero),
    or -1.  ``grads`` is M x C x 3 when ``want_grad`` else empty.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 3)
    use_idx = nbr is not None
    idx = _EMPTY_IDX if nbr is None else np.ascontiguousarray(nbr, dtype=np.int64)
    eps2 = float(eps_hit) ** 2
    fn = _idw_nb if use_numba() else _idw_np
    return fn(points, feats, queries, eps2, idx, use_idx, bool(want_grad))


# ---------------------------------------------------------------------------
# neighbourhood feature voting
# ---------------------------------------------------------------------------


@njit
def _votes_nb(feats, ptr, ids, delta):
    n = feats.shape[0]
    c_count = feats.shape[1]
    votes = np.zeros(n, dtype=np.int64)
    mean_dist = np.full(n, np.inf)
    for i in range(n):
        total = 0.0
        cnt = 0
        for p in range(ptr[i], ptr[i + 1]):
            j = ids[p]
            d2 = 0.0
            for c in range(c_count):
                t = feats[i, c] - feats[j, c]
                d2 += t * t
            d = np.sqrt(d2)
            total += d
            cnt += 1
            if d < delta:
                votes[i] += 1
        if cnt > 0:
            mean_dist[i] = total / cnt
    return votes, mean_dist


def _votes_np(feats, ptr, ids, delta):
    n = feats.shape[0]
    counts = np.diff(ptr)
    owner = np.repeat(np.arange(n), counts)
    votes = np.zeros(n, dtype=np.int64)
    mean_dist = np.full(n, np.inf)
    if ids.size == 0:
        return votes, mean_dist
    d = np.empty(ids.size)
    step = 1 << 16
    for lo in range(0, ids.size, step):
        hi = min(lo + step, ids.size)
        diff = feats[owner[lo:hi]] - feats[ids[lo:hi]]
        d[lo:hi] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    votes = np.bincount(owner, weights=(d < delta), minlength=n).astype(np.int64)
    sums = np.bincount(owner, weights=d, minlength=n)
    nz = counts > 0
    mean_dist[nz] = sums[nz] / counts[nz]
    return votes, mean_dist


def neighbour_votes(feats, ptr, ids, delta):
    """Count neighbours whose feature lies within ``delta`` (strict).

    Neighbourhoods come in CSR form (``ptr``, ``ids``).  Also returns the mean
    feature distance to the neighbours (``inf`` for isolated points).
    """
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    ptr = np.ascontiguousarray(ptr, dtype=np.int64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    fn = _votes_nb if use_numba() else _votes_np
    return fn(feats, ptr, ids, float(delta))


# ---------------------------------------------------------------------------
# scene-in-sphere penetration
# ---------------------------------------------------------------------------


@njit
def _pen_nb(scene, centers, radii):
    n = scene.shape[0]
    s_count = centers.shape[0]
    energy = 0.0
    grad = np.zeros((s_count, 3))
    for p in range(n):
        best = np.inf
        best_s = -1
        best_d = 0.0
        for s in range(s_count):
            dx = scene[p, 0] - centers[s, 0]
            dy = scene[p, 1] - centers[s, 1]
            dz = scene[p, 2] - centers[s, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            depth = radii[s] - d
            if depth > 0.0 and depth < best:
                best = depth
                best_s = s
                best_d = d
        if best_s >= 0:
            energy += best
            if best_d > 0.0:
                for a in range(3):
                    grad[best_s, a] += (scene[p, a] - centers[best_s, a]) / best_d
    return energy, grad


def _pen_np(scene, centers, radii):
    s_count = centers.shape[0]
    energy = 0.0
    grad = np.zeros((s_count, 3))
    step = max(1, (1 << 20) // max(s_count, 1))
    for lo in range(0, scene.shape[0], step):
        x = scene[lo : lo + step]
        diff = x[:, None, :] - centers[None, :, :]
        d = np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2])
        depth = radii[None, :] - d
        depth = np.where(depth > 0.0, depth, np.inf)
        best_s = np.argmin(depth, axis=1)
        rows = np.arange(x.shape[0])
        best = depth[rows, best_s]
        inside = np.isfinite(best)
        if not np.any(inside):
            continue
        energy += best[inside].sum()
        r = rows[inside]
        s = best_s[inside]
        dd = d[r, s]
        ok = dd > 0.0
        unit = diff[r[ok], s[ok]] / dd[ok, None]
        np.add.at(grad, s[ok], unit)
    return float(energy), grad


def penetration(scene, centers, radii):
    """Sum over scene points inside any sphere of the shallowest depth.

    Returns ``(energy, d_energy/d_centers)``.
    """
    scene = np.ascontiguousarray(scene, dtype=np.float64).reshape(-1, 3)
    centers = np.ascontiguousarray(centers, dtype=np.float64).reshape(-1, 3)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    fn = _pen_nb if use_numba() else _pen_np
    e, g = fn(scene, centers, radii)
    return float(e), g
