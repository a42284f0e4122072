"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 bad or inconsistent input data,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _cmd_run(args) -> int:
    from .pipeline.config import load_config
    from .pipeline.dataset import load_dataset
    from .pipeline.runner import run, write_outputs

    cfg = load_config(args.config)
    off = {name: False for name in ("dm", "gf", "nm", "lc") if getattr(args, f"no_{name}")}
    if off:
        cfg = cfg.with_factors(**off)
    if args.init_pose:
        cfg = cfg.replace(pipeline=dataclasses.replace(cfg.pipeline, init_pose=args.init_pose))
    ds = load_dataset(cfg)
    result = run(ds, cfg)
    write_outputs(result, args.out)
    s = result.summary
    print(f"{s['keyframes']} keyframes from {s['frames']} frames, {s['loops']} loop closures, "
          f"{result.runtime:.1f} s -> {args.out}", file=sys.stderr)
    return EXIT_OK


def _is_cloud(path: str) -> bool:
    return Path(path).suffix.lower() in (".pcd", ".ply")


def _cmd_evaluate(args) -> int:
    from .cloud import load_cloud, save_cloud
    from .evaluation import EvalConfig, error_map, evaluate_map, evaluate_trajectory
    from .pipeline.config import load_config
    from .pipeline.dataset import read_tum

    ecfg = load_config(args.config).eval if args.config else EvalConfig()
    if _is_cloud(args.est) != _is_cloud(args.gt):
        print("error: --est and --gt must both be clouds or both be trajectories", file=sys.stderr)
        return EXIT_USAGE
    if _is_cloud(args.est):
        est, gt = load_cloud(args.est), load_cloud(args.gt)
        rep = evaluate_map(est, gt, ecfg)
        if args.error_map:
            save_cloud(error_map(est, gt, ecfg), args.error_map)
    else:
        rep = evaluate_trajectory(read_tum(args.est), read_tum(args.gt), ecfg)
    text = rep.to_json(indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from .pipeline.simulate import SceneSpec, load_scene_spec, simulate, write_simulation

    spec = load_scene_spec(args.spec) if args.spec else SceneSpec(kind=args.kind)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    sim = simulate(spec)
    cfg_path = write_simulation(sim, args.out)
    print(f"{len(sim.dataset)} frames of a {spec.kind} scene -> {cfg_path}", file=sys.stderr)
    return EXIT_OK


def _cmd_report(args) -> int:
    from .pipeline.report import report

    summary = report(args.run, args.kappa_threshold)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="priorloc", description="Prior-map localisation with a pose graph.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="localise a dataset against its prior map")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--init-pose", help="'tx ty tz qx qy qz qw' (overrides the config)")
    for name in ("dm", "gf", "nm", "lc"):
        r.add_argument(f"--no-{name}", action="store_true", help=f"disable {name.upper()} factors")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("evaluate", help="trajectory (TUM) or map (PCD/PLY) metrics")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--config")
    e.add_argument("--out", help="also write the JSON report here")
    e.add_argument("--error-map", help="PCD with a per-point 'error' field (maps only)")
    e.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("simulate", help="write a synthetic dataset and its config")
    s.add_argument("--spec", help="INI file with a [scene] section")
    s.add_argument("--kind", default="corridor", choices=("room", "corridor", "parkinglot"))
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_simulate)

    g = sub.add_parser("report", help="plots and summary for a run directory")
    g.add_argument("--run", required=True)
    g.add_argument("--kappa-threshold", type=float, default=30.0)
    g.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    from .cloud import CloudFormatError
    from .evaluation import EvaluationError
    from .graph import GraphError
    from .icp import DegenerateSystem
    from .pipeline.dataset import DataError
    from .pipeline.runner import InitializationError
    from .zupt import ZuptError

    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help and usage errors
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GraphError, DegenerateSystem, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CloudFormatError, EvaluationError, InitializationError, ZuptError,
            FileNotFoundError, IsADirectoryError, PermissionError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
