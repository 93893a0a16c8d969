"""Command-line entry point: gen-data, train, eval, ablate, gradcheck.

Exit codes: 0 success, 1 verification failure, 2 config/usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .data import GenerationFailed, generate_corpus

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _shape(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"shape must be N or HxWxZ, got {text!r}")
    return tuple(parts)


def cmd_gen_data(args) -> int:
    try:
        manifest = generate_corpus(args.out, args.seed, args.count, args.shape, args.labeled_frac, args.test_frac)
    except GenerationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    roles = {r: len(manifest.ids(r)) for r in ("labeled", "unlabeled", "test")}
    print(f"wrote {args.count} phantoms to {args.out} ({roles})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .experiment import run_train
    from .trainer import NumericalFailure

    try:
        cfg = config_mod.load(args.config)
        overrides = {}
        if args.out:
            overrides["out_dir"] = args.out
        if args.data_dir:
            overrides["data_dir"] = args.data_dir
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides:
            cfg = cfg.replace(**overrides)
    except config_mod.ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        summary = run_train(cfg)
    except config_mod.ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    d = summary["test"]["dice"]
    print(f"run written to {cfg.out_dir}; test Dice {d['mean']:.4f} ± {d['std']:.4f} over {d['n']} cases")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import run_eval

    try:
        summary = run_eval(args.run_dir, args.data_dir, args.model)
    except (OSError, config_mod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(summary["test"], indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import GridError, preset_grid, run_grid

    try:
        if args.grid:
            grid = json.loads(Path(args.grid).read_text())
        elif args.preset:
            base = {}
            if args.data_dir:
                base["data_dir"] = args.data_dir
            if args.steps:
                base["steps"] = args.steps
            if args.crop_size:
                base["crop_size"] = args.crop_size
            grid = preset_grid(args.preset, base, args.seeds or [0, 1, 2])
        else:
            print("error: give --grid FILE or --preset NAME", file=sys.stderr)
            return EXIT_USAGE
        rows = run_grid(grid, args.out, args.cache_dir)
    except (GridError, json.JSONDecodeError, OSError) as exc:
        print(f"grid error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for r in rows:
        dm = "n/a" if r["dice_mean"] is None else f"{r['dice_mean']:.4f} ± {r['dice_std']:.4f}"
        print(f"{r['cell']:>18}  runs {r['runs']}/{r['runs'] + r['failed']}  Dice {dm}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradchecks import SUITES, run_suite

    if args.module != "all" and args.module not in SUITES:
        print(f"unknown module {args.module!r}; choose all|{'|'.join(SUITES)}", file=sys.stderr)
        return EXIT_USAGE

    def show(res):
        status = "PASS" if res.passed else "FAIL"
        line = (f"{status} {res.module}/{res.op}: max rel err {res.max_rel_error:.3e} over {res.seeds} seeds "
                f"({res.seconds:.1f}s)")
        if res.redraws:
            line += f", {res.redraws} kinked draws replaced"
        if not res.passed:
            line += f" -- worst parameter {res.worst_param!r} at seed {res.worst_seed}"
        print(line, flush=True)

    results = run_suite(args.module, args.seeds, args.eps, args.tol, show)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} ops passed")
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sckan", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a phantom corpus and split manifest")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--shape", type=_shape, default=(48, 48, 48))
    g.add_argument("--out", required=True)
    g.add_argument("--labeled-frac", type=float, default=0.10)
    g.add_argument("--test-frac", type=float, default=0.15)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration into a run directory")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="override out_dir")
    t.add_argument("--data-dir", help="override data_dir")
    t.add_argument("--seed", type=int, help="override seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-evaluate a run directory's checkpoint")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--data-dir")
    e.add_argument("--model", choices=("student", "teacher"))
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid and write CSV/markdown/figures")
    a.add_argument("--grid", help="grid JSON file")
    a.add_argument("--preset", choices=("components", "fusion", "lambda_div"))
    a.add_argument("--data-dir")
    a.add_argument("--steps", type=int)
    a.add_argument("--crop-size", type=int)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--out", help="output directory (overrides base out_dir)")
    a.add_argument("--cache-dir", help="reuse finished runs with identical configs from this directory")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference verification of every differentiable op")
    c.add_argument("--module", default="all")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
