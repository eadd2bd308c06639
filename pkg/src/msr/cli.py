"""Command-line driver: ``msr run | export | report-equivariance | selftest``."""
from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

OUTPUT_ROOT_ENV = "MSR_OUTPUT_ROOT"


def output_dir_for(cfg, root: str | None = None) -> Path:
    root = root or os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / (cfg.experiment.output_dir or cfg.experiment.name)


def cmd_run(args) -> int:
    from .config import ConfigError, load_config
    from .experiments import run_experiment

    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = output_dir_for(cfg, args.output_root)
    try:
        results = run_experiment(cfg, out)
    except Exception as e:
        out.mkdir(parents=True, exist_ok=True)
        record = {"error": type(e).__name__, "message": str(e), "traceback": traceback.format_exc()}
        (out / "failure.json").write_text(json.dumps(record, indent=2, sort_keys=True))
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    for r in results:
        metric = "mse" if "mse" in r else "accuracy"
        print(f"{r['method']}: test {metric} {r[metric]:.6g} +/- {r['ci95']:.3g}")
    print(f"artifacts in {out}")
    return 0


def _resolve_matrix(model, spec: str) -> np.ndarray:
    layer_s, sep, name = spec.partition(".")
    if not sep or not layer_s.isdigit():
        raise ValueError(f"--matrix must look like <layer>.<name>, got {spec!r}")
    i = int(layer_s)
    if i >= len(model.layers):
        raise ValueError(f"layer {i} out of range (model has {len(model.layers)})")
    if name == "W":
        mat = model.weight(i).data
    else:
        key = f"{i}.{name}"
        if key not in model.params:
            raise ValueError(f"no parameter {key!r}; have {sorted(model.params)}")
        mat = model.params[key].data
    mat = np.atleast_2d(mat)
    return mat if mat.ndim == 2 else mat.reshape(mat.shape[0], -1)


def cmd_export(args) -> int:
    from .checkpoint import load
    from .exports import export_matrix_pgm

    try:
        model = load(args.checkpoint).model()
        export_matrix_pgm(_resolve_matrix(model, args.matrix), args.out, args.normalization)
    except (ValueError, OSError) as e:
        print(f"export failed: {e}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    from .checkpoint import load
    from .report import report_equivariance, rows_to_csv

    model = load(args.checkpoint).model()
    groups = [g.strip() for g in args.groups.split(",") if g.strip()]
    rows = report_equivariance(model, groups, args.trials, args.seed, args.side)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(verbose=True) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msr", description="Meta-learned symmetry reparameterization experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config end to end")
    r.add_argument("config")
    r.add_argument("--output-root", default=None, help=f"overrides ${OUTPUT_ROOT_ENV} (default ./runs)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("export", help="export a matrix from a checkpoint as PGM")
    e.add_argument("checkpoint")
    e.add_argument("--matrix", required=True, help="<layer>.<param>, e.g. 0.U or 0.W")
    e.add_argument("--out", required=True)
    e.add_argument("--normalization", choices=("abs_max", "signed"), default="abs_max")
    e.set_defaults(func=cmd_export)

    q = sub.add_parser("report-equivariance", help="equivariance error per layer and group")
    q.add_argument("checkpoint")
    q.add_argument("--groups", required=True, help="comma list from: shift, cyclic, C1, C4, D4, C8, D8")
    q.add_argument("--trials", type=int, default=10)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--side", type=int, default=9, help="input image side for 2-D groups")
    q.add_argument("--out", default=None, help="also write the CSV here")
    q.set_defaults(func=cmd_report)

    s = sub.add_parser("selftest", help="run the built-in invariant checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
