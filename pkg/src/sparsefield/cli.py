"""Command-line entry point: ``sparsefield <subcommand> ...``."""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import effector, optimizer, pruner, refiner, scan_io, synth
from .config import ConfigError, PipelineConfig, load_config
from .field import FeatureField, read_query_list, write_feature_rows

# file names shared by the single-stage commands and `pipeline`
SOURCE_CLOUD = "source_cloud"
TARGET_CLOUD = "target_cloud"
WEIGHTS = "weights"
SOURCE_PRUNED = "source_pruned"
TARGET_PRUNED = "target_pruned"
RESULT = "result.json"
TRACE = "trace.txt"
METRICS = "metrics.txt"
GRID = "energy_grid.bin"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _config(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = int(args.seed)
    return cfg.seeded()


def _out(args, cfg, default=None):
    out = args.out or cfg.paths.out or default
    if out is None:
        raise CliError("no output location; pass --out")
    return out


def _require(path, what):
    if path is None:
        raise CliError(f"missing {what}")
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def bundle_dirs(path):
    """Bundle directories under a scene directory, or ``[path]`` for a single bundle."""
    if os.path.exists(os.path.join(path, "meta.json")):
        return [path]
    gt = os.path.join(path, "groundtruth.json")
    if os.path.exists(gt):
        with open(gt, encoding="utf-8") as fh:
            return [os.path.join(path, v) for v in json.load(fh)["views"]]
    views = sorted(d for d in os.listdir(path) if d.startswith("view_"))
    views.sort(key=lambda d: int(d.split("_")[1]))
    if not views:
        raise CliError(f"{path}: no scan bundles found")
    return [os.path.join(path, v) for v in views]


def _hand(cfg, override=None):
    path = override or cfg.paths.hand
    return effector.load_spec(_require(path, "effector spec")) if path else effector.load_bundled_hand()


def _field(cloud, cfg):
    return FeatureField(cloud.points, cloud.features, cfg.field.mode, cfg.field.k, cfg.field.eps_hit)


# ---------------------------------------------------------------------------
# stages (pure functions of their inputs, shared with `pipeline`)
# ---------------------------------------------------------------------------


def run_synth(cfg, out, pair=True):
    spec = dataclasses.replace(cfg.synth)
    hand = _hand(cfg)
    src = synth.generate_scene(spec, None, "source")
    synth.save_scene(src, os.path.join(out, "source"), spec)
    demo = synth.demo_state(hand, scan_io.ingest_bundles(src.bundles).points, spec)
    effector.save_state(demo, os.path.join(out, "source", "demo.json"), hand)
    if pair:
        rng = np.random.default_rng(synth.derive_seed(spec.seed, "transform"))
        T = synth.random_transform(rng)
        tgt = synth.generate_scene(spec, T, "target")
        synth.save_scene(tgt, os.path.join(out, "target"), spec)


def run_ingest(cfg, src, out):
    bundles = [scan_io.load_scan_bundle(d) for d in bundle_dirs(_require(src, "scan bundles"))]
    cloud = scan_io.ingest_bundles(bundles, cfg.ingest.sample_mode, cfg.ingest.normalize)
    scan_io.save_featured_cloud(cloud, out)
    return cloud


def run_train(cfg, cloud_dir, out, report=False):
    cloud = scan_io.load_featured_cloud(_require(cloud_dir, "featured cloud"))
    res = refiner.train_refiner(cloud, cfg.train)
    refiner.save_weights(res.weights, out)
    if report:
        refiner.write_loss_trace(os.path.join(out, "loss_trace.txt"), res.losses)
    return res


def run_prune(cfg, cloud_dir, weights_dir, out, report=False):
    cloud = scan_io.load_featured_cloud(_require(cloud_dir, "featured cloud"))
    if weights_dir is not None:
        w = refiner.load_weights(_require(weights_dir, "refiner weights"))
        cloud = cloud.with_features(refiner.refine(w, cloud.features.astype(np.float64)))
    votes = pruner.count_votes(cloud, cfg=cfg.prune)
    kept, removed = pruner.prune_cloud(cloud, votes, cfg.prune)
    scan_io.save_featured_cloud(kept, out)
    if report:
        pruner.write_vote_report(os.path.join(out, "votes.txt"), cloud, votes, removed)
    return kept


def run_optimize(cfg, source_dir, target_dir, demo_path, out, report=False):
    hand = _hand(cfg)
    src = scan_io.load_featured_cloud(_require(source_dir, "source cloud"))
    tgt = scan_io.load_featured_cloud(_require(target_dir, "target cloud"))
    demo = effector.load_state(_require(demo_path, "demonstration state"), hand)
    beta, trace = optimizer.optimize_pose(_field(src, cfg), _field(tgt, cfg), hand, demo, cfg.energy)
    os.makedirs(out, exist_ok=True)
    effector.save_state(beta, os.path.join(out, RESULT), hand)
    optimizer.write_trace(os.path.join(out, TRACE), trace)
    if report:
        run_energy_grid(cfg, source_dir, target_dir, demo_path, os.path.join(out, GRID), src=src, tgt=tgt)
    return beta


def run_energy_grid(cfg, source_dir, target_dir, demo_path, out, half_extent=0.05, n=11,
                    src=None, tgt=None):
    hand = _hand(cfg)
    src = src or scan_io.load_featured_cloud(_require(source_dir, "source cloud"))
    tgt = tgt or scan_io.load_featured_cloud(_require(target_dir, "target cloud"))
    demo = effector.load_state(_require(demo_path, "demonstration state"), hand)
    grid = optimizer.GridSpec.around(demo.root.translation, half_extent, n)
    vals = optimizer.export_energy_grid(_field(src, cfg), _field(tgt, cfg), hand, demo, grid, cfg.energy)
    d = os.path.dirname(os.path.abspath(out))
    os.makedirs(d, exist_ok=True)
    optimizer.save_energy_grid(out, vals, grid)
    return vals, grid


def run_eval(cfg, result_path, demo_path, target_scene, out):
    hand = _hand(cfg)
    beta = effector.load_state(_require(result_path, "result state"), hand)
    demo = effector.load_state(_require(demo_path, "demonstration state"), hand)
    T = None
    if target_scene is not None:
        gt, _ = synth.load_groundtruth(_require(target_scene, "target ground truth"))
        T = gt.transform
    metrics = synth.eval_transfer(beta, T, hand, demo)
    synth.write_metrics(out, metrics)
    return metrics


def run_pipeline(cfg, source, target, demo_path, out, report=False):
    """ingest both scenes -> train on the source -> refine and prune both -> optimize -> eval."""
    os.makedirs(out, exist_ok=True)
    p = lambda name: os.path.join(out, name)  # noqa: E731
    run_ingest(cfg, source, p(SOURCE_CLOUD))
    run_ingest(cfg, target, p(TARGET_CLOUD))
    run_train(cfg, p(SOURCE_CLOUD), p(WEIGHTS), report)
    run_prune(cfg, p(SOURCE_CLOUD), p(WEIGHTS), p(SOURCE_PRUNED), report)
    run_prune(cfg, p(TARGET_CLOUD), p(WEIGHTS), p(TARGET_PRUNED), report)
    beta = run_optimize(cfg, p(SOURCE_PRUNED), p(TARGET_PRUNED), demo_path, out, report)
    if os.path.exists(os.path.join(target, "groundtruth.json")):
        run_eval(cfg, p(RESULT), demo_path, target, p(METRICS))
    return beta


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _default_demo(args, cfg, source):
    if getattr(args, "demo", None):
        return args.demo
    if cfg.paths.demo:
        return cfg.paths.demo
    if source and os.path.exists(os.path.join(source, "demo.json")):
        return os.path.join(source, "demo.json")
    raise CliError("no demonstration state; pass --demo")


def cmd_synth(args, cfg):
    run_synth(cfg, _out(args, cfg), pair=not args.single)


def cmd_ingest(args, cfg):
    run_ingest(cfg, args.bundles or cfg.paths.source, _out(args, cfg))


def cmd_train(args, cfg):
    res = run_train(cfg, args.cloud, _out(args, cfg), args.report)
    print(f"trained {len(res.losses)} iterations, final loss {res.losses[-1]:.6f}")


def cmd_prune(args, cfg):
    kept = run_prune(cfg, args.cloud, args.weights, _out(args, cfg), args.report)
    print(f"kept {len(kept)} points")


def cmd_field_query(args, cfg):
    cloud = scan_io.load_featured_cloud(_require(args.cloud, "featured cloud"))
    q = read_query_list(_require(args.queries, "query list"))
    vals = _field(cloud, cfg).query_batch(q)
    write_feature_rows(_out(args, cfg), vals, binary=args.binary)


def cmd_optimize(args, cfg):
    source = args.source or cfg.paths.source
    target = args.target or cfg.paths.target
    demo = _default_demo(args, cfg, None)
    beta = run_optimize(cfg, source, target, demo, _out(args, cfg), args.report)
    print("root", " ".join(f"{v:.6f}" for v in beta.beta[:6]))


def cmd_energy_grid(args, cfg):
    demo = _default_demo(args, cfg, None)
    vals, grid = run_energy_grid(cfg, args.source or cfg.paths.source, args.target or cfg.paths.target,
                                 demo, _out(args, cfg), args.half_extent, args.cells)
    print("minimum cell", np.unravel_index(int(np.argmin(vals)), grid.shape))


def cmd_eval(args, cfg):
    demo = _default_demo(args, cfg, None)
    out = _out(args, cfg)
    metrics = run_eval(cfg, args.result, demo, args.target, out)
    for k, v in metrics.items():
        print(f"{k} {v:.4f}")


def cmd_pipeline(args, cfg):
    source = args.source or cfg.paths.source
    target = args.target or cfg.paths.target
    _require(source, "source scene")
    _require(target, "target scene")
    demo = _default_demo(args, cfg, source)
    run_pipeline(cfg, source, target, demo, _out(args, cfg), args.report)
    print(f"wrote {_out(args, cfg)}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config (JSON)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--report", action="store_true", help="also write diagnostics")

    ap = argparse.ArgumentParser(prog="sparsefield", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic source/target scene pair")
    p.add_argument("--single", action="store_true", help="source scene only")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="lift scan bundles into one featured cloud")
    p.add_argument("bundles", nargs="?", help="scene directory or single bundle directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="fit the refinement network on a source cloud")
    p.add_argument("cloud")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", parents=[common], help="refine (optional) and vote-prune a cloud")
    p.add_argument("cloud")
    p.add_argument("--weights")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("field-query", parents=[common], help="evaluate the feature field at query points")
    p.add_argument("cloud")
    p.add_argument("queries", help="text file, one 'x y z' per line")
    p.add_argument("--binary", action="store_true", help="write float32 rows instead of text")
    p.set_defaults(func=cmd_field_query)

    for name, fn, helptext in (("optimize", cmd_optimize, "transfer the demonstration to the target"),
                               ("energy-grid", cmd_energy_grid, "sweep the root over a grid")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--source", help="source featured cloud")
        p.add_argument("--target", help="target featured cloud")
        p.add_argument("--demo", help="demonstration state (JSON)")
        if name == "energy-grid":
            p.add_argument("--half-extent", type=float, default=0.05)
            p.add_argument("--cells", type=int, default=11)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", parents=[common], help="compare a result with the scene ground truth")
    p.add_argument("result")
    p.add_argument("--demo", required=False)
    p.add_argument("--target", help="target scene directory holding groundtruth.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="ingest, train, prune and optimize end to end")
    p.add_argument("--source", help="source scene directory")
    p.add_argument("--target", help="target scene directory")
    p.add_argument("--demo")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (CliError, ConfigError, scan_io.FormatError, effector.SpecError, refiner.InsufficientOverlapError,
            synth.EmptySceneError, optimizer.OptimizationError, ValueError, OSError) as exc:
        print(f"sparsefield {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
