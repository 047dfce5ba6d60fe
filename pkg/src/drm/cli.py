"""Command-line front end: merge checkpoints, run analyses, benchmark and
tune on synthetic suites.

Exit codes: 0 success, 2 argument errors, 3 I/O or bundle-content errors,
4 numerical failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import analysis, harness
from .bundle import canonical_json, extract_deltas, read_bundle, write_bundle
from .engine import MergeConfig, merge_bundle_with_stats
from .errors import (
    BadMagic,
    ConvergenceFailure,
    CorruptHeader,
    ExtraTensor,
    IoFailure,
    MissingTensor,
    NeedTwoTasks,
    NonFiniteValue,
    OffsetOutOfRange,
    ShapeMismatch,
    SingularSystem,
    UnsupportedVersion,
)

_CLI_METHODS = {
    "drm-h": "drm_h",
    "drm-v": "drm_v",
    "avg": "simple_avg",
    "ta": "task_arithmetic",
    "ties": "ties",
    "dare-ties": "dare_ties",
}

_ARG_ERRORS = (NeedTwoTasks, ValueError)
_IO_ERRORS = (
    IoFailure,
    BadMagic,
    UnsupportedVersion,
    CorruptHeader,
    OffsetOutOfRange,
    NonFiniteValue,
    MissingTensor,
    ExtraTensor,
    ShapeMismatch,
    OSError,
)
_NUM_ERRORS = (ConvergenceFailure, SingularSystem)


def _parse_lambdas(text: str | None):
    if text is None:
        return None
    parts = text.split(",")
    values = tuple(float(p) for p in parts)
    return values[0] if len(values) == 1 else values


def _parse_grid(text: str) -> list[float]:
    """Parse "a:b:step" (inclusive endpoints) or a single float."""
    if ":" not in text:
        return [float(text)]
    try:
        lo, hi, step = (float(p) for p in text.split(":"))
    except ValueError as exc:
        raise ValueError(f"bad grid spec {text!r}; expected a:b:step") from exc
    if step <= 0 or hi < lo:
        raise ValueError(f"bad grid spec {text!r}; need step > 0 and b >= a")
    values = []
    x = lo
    while x <= hi + 1e-9:
        values.append(round(x, 10))
        x += step
    return values


def _parse_dim(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"bad --dim {text!r}; expected M,N")
    m, n = (int(p) for p in parts)
    if m <= 0 or n <= 0:
        raise ValueError("--dim extents must be positive")
    return m, n


def _task_names(paths: list[str]) -> list[str]:
    stems = [Path(p).stem for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [f"task{i}" for i in range(len(paths))]


def _config_from_args(args, n_tasks: int) -> MergeConfig:
    method = _CLI_METHODS[args.method]
    lambdas = _parse_lambdas(args.lam)
    if isinstance(lambdas, tuple) and len(lambdas) != n_tasks:
        raise ValueError(f"--lambda lists {len(lambdas)} values for {n_tasks} tasks")
    return MergeConfig(
        method=method,
        retain=args.retain,
        lambdas=lambdas,
        dare_drop=args.dare_drop,
        rank_drop=args.rank_drop,
        prune_mode=args.prune_mode,
        enable_prune=not args.no_prune,
        enable_sign_elect=not args.no_sign_elect,
        enable_disjoint=not args.no_disjoint,
        seed=args.seed,
    )


def cmd_merge(args) -> int:
    base = read_bundle(args.base)
    tasks = [read_bundle(p) for p in args.task]
    names = _task_names(args.task)
    cfg = _config_from_args(args, len(tasks))
    merged, stats = merge_bundle_with_stats(base, tasks, cfg, names)
    write_bundle(merged, args.out)
    for st in stats:
        shape = "x".join(str(s) for s in st.shape)
        rank = "-" if st.rank is None else str(st.rank)
        kept = "-" if st.kept is None else f"{st.kept}/{st.total}"
        print(f"{st.name}\tshape={shape}\trank={rank}\tkept={kept}")
    print(f"wrote {args.out} ({len(merged)} tensors, method={cfg.method})")
    return 0


def _analysis_delta_sets(args):
    base = read_bundle(args.base)
    tasks = [read_bundle(p) for p in args.task]
    delta_sets, _ = extract_deltas(base, tasks, _task_names(args.task))
    if not delta_sets:
        raise ValueError("no rank-2 tensors to analyze")
    return delta_sets


def cmd_analyze(args) -> int:
    delta_sets = _analysis_delta_sets(args)
    cfg = MergeConfig(
        method="drm_v" if args.space.endswith("-v") else "drm_h",
        retain=args.retain,
        prune_mode=args.prune_mode,
    )
    reports = []
    if args.kind == "prune-density":
        reports = [analysis.pruning_density(ds, cfg, with_renorm=args.renorm) for ds in delta_sets]
    elif args.kind == "sign-agreement":
        reports = [analysis.sign_agreement(ds, cfg, args.space) for ds in delta_sets]
    elif args.kind == "svd-bound":
        for ds in delta_sets:
            reports.extend(analysis.check_perturbation_bound(ds, t) for t in range(ds.n_tasks))
    elif args.kind == "spectrum":
        orientation = "vertical" if args.space.endswith("-v") else "horizontal"
        reports = [analysis.spectrum_report(ds, orientation) for ds in delta_sets]

    payload = canonical_json([r.to_json_obj() for r in reports])
    Path(args.out).write_text(payload + "\n", encoding="utf-8")
    for r in reports:
        print(r.to_table(), end="")
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    m, n = _parse_dim(args.dim)
    base, tasks = harness.synth_suite(
        args.seed, args.tasks, m, n, args.samples, identical=args.identical,
        ridge=args.ridge, noise=args.noise,
    )
    result = harness.run_bench(base, tasks, neutral=args.identical, seed=args.seed)
    print(result.to_table(), end="")
    return 0


def cmd_tune(args) -> int:
    m, n = _parse_dim(args.dim)
    base, tasks = harness.synth_suite(
        args.seed, args.tasks, m, n, args.samples, ridge=args.ridge, noise=args.noise
    )
    method = _CLI_METHODS[args.method]
    retain_grid = _parse_grid(args.grid_retain) if args.grid_retain else None
    lambda_grid = _parse_grid(args.grid_lambda) if args.grid_lambda else None
    result = harness.grid_tune(
        base, tasks, method, retain_grid, lambda_grid, val_split_seed=args.seed
    )
    print(result.to_table(), end="")
    if args.out:
        rows = [
            {"retain": r, "lambda": l, "score": s} for r, l, s in result.grid
        ]
        payload = canonical_json(
            {
                "method": result.method,
                "grid": rows,
                "best": {
                    "retain": result.best_retain,
                    "lambda": result.best_lambda,
                    "score": result.best_score,
                },
                "per_task_scores": result.per_task_scores,
                "task_names": result.task_names,
            }
        )
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


def _add_merge_knobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--retain", type=float, default=0.2,
                   help="fraction of largest-magnitude entries kept (default 0.2)")
    p.add_argument("--lambda", dest="lam", default=None,
                   help="merging coefficient: one shared value or comma list per task "
                        "(default 1.0; 0.4 for ta)")
    p.add_argument("--dare-drop", type=float, default=0.8,
                   help="random drop rate for dare-ties (default 0.8)")
    p.add_argument("--rank-drop", type=float, default=0.0,
                   help="fraction of the nonzero spectrum to discard (default 0)")
    p.add_argument("--prune-mode", choices=["joint", "individual"], default="joint")
    p.add_argument("--no-prune", action="store_true", help="skip magnitude pruning")
    p.add_argument("--no-sign-elect", action="store_true", help="skip sign election")
    p.add_argument("--no-disjoint", action="store_true",
                   help="average over all tasks instead of survivors only")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drm", description="Checkpoint merging in a decomposed, renormalized joint space."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_merge = sub.add_parser("merge", help="merge task checkpoints onto a base checkpoint")
    p_merge.add_argument("--method", required=True, choices=sorted(_CLI_METHODS))
    p_merge.add_argument("--base", required=True)
    p_merge.add_argument("--task", action="append", required=True,
                         help="task checkpoint path (repeatable)")
    p_merge.add_argument("--out", required=True)
    _add_merge_knobs(p_merge)
    p_merge.set_defaults(func=cmd_merge)

    p_an = sub.add_parser("analyze", help="write a diagnostic report")
    p_an.add_argument("kind", choices=["prune-density", "sign-agreement", "svd-bound", "spectrum"])
    p_an.add_argument("--base", required=True)
    p_an.add_argument("--task", action="append", required=True)
    p_an.add_argument("--out", required=True)
    p_an.add_argument("--space", choices=list(analysis.SPACES), default="original",
                      help="tally space for sign-agreement; -h/-v suffix also "
                           "selects the orientation for spectrum")
    p_an.add_argument("--retain", type=float, default=0.2)
    p_an.add_argument("--prune-mode", choices=["joint", "individual"], default="joint")
    renorm = p_an.add_mutually_exclusive_group()
    renorm.add_argument("--renorm", dest="renorm", action="store_true", default=True)
    renorm.add_argument("--no-renorm", dest="renorm", action="store_false")
    p_an.set_defaults(func=cmd_analyze)

    p_bench = sub.add_parser("bench", help="compare methods on a synthetic suite")
    p_bench.add_argument("scenario", choices=["synthetic"])
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--tasks", type=int, default=3)
    p_bench.add_argument("--dim", default="12,8", help="matrix shape M,N (default 12,8)")
    p_bench.add_argument("--samples", type=int, default=80)
    p_bench.add_argument("--ridge", type=float, default=0.0)
    p_bench.add_argument("--noise", type=float, default=0.0)
    p_bench.add_argument("--identical", action="store_true",
                         help="make every task the same problem and merge at "
                              "identity-preserving settings")
    p_bench.set_defaults(func=cmd_bench)

    p_tune = sub.add_parser("tune", help="grid-search retain/lambda on a synthetic suite")
    p_tune.add_argument("--method", required=True, choices=sorted(_CLI_METHODS))
    p_tune.add_argument("--grid-retain", default=None, help="a:b:step or single value")
    p_tune.add_argument("--grid-lambda", default=None, help="a:b:step or single value")
    p_tune.add_argument("--seed", type=int, default=0)
    p_tune.add_argument("--tasks", type=int, default=3)
    p_tune.add_argument("--dim", default="12,8")
    p_tune.add_argument("--samples", type=int, default=80)
    p_tune.add_argument("--ridge", type=float, default=0.0)
    p_tune.add_argument("--noise", type=float, default=0.0)
    p_tune.add_argument("--out", default=None, help="optional JSON output path")
    p_tune.set_defaults(func=cmd_tune)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except _ARG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _NUM_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except _IO_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    raise SystemExit(main())
