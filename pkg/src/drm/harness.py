"""Desk-scale end-to-end evaluation on synthetic linear tasks.

Gradient training is replaced by closed-form ridge regression on
single-layer linear problems, so merge quality can be scored exactly and
the whole comparison stays deterministic in its seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import DeltaSet, TensorBundle
from .engine import MergeConfig, merge_delta_set
from .errors import ShapeMismatch, SingularSystem

BENCH_METHODS = ("simple_avg", "task_arithmetic", "ties", "dare_ties", "drm_h", "drm_v")


@dataclass
class SynthTask:
    """One regression task: fit W so that X @ W.T approximates Y.

    s >= n is required for a unique unregularized solution; any positive
    ridge lifts that requirement.
    """

    name: str
    X: np.ndarray
    Y: np.ndarray
    ridge: float = 0.0

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[0] != self.Y.shape[0]:
            raise ShapeMismatch(
                f"task {self.name!r}: X {self.X.shape} and Y {self.Y.shape} disagree"
            )
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.ridge == 0.0 and self.X.shape[0] < self.X.shape[1]:
            raise ValueError(
                f"task {self.name!r}: {self.X.shape[0]} samples underdetermine "
                f"{self.X.shape[1]} inputs without ridge"
            )

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]


def closed_form_finetune(base: np.ndarray, task: SynthTask) -> np.ndarray:
    """Minimize ||X W^T - Y||_F^2 + ridge ||W - base||_F^2 exactly.

    Solves the normal equations
    (X^T X + ridge I) W^T = X^T Y + ridge base^T in float64.
    """
    base = np.asarray(base, dtype=np.float64)
    m, n = base.shape
    if task.X.shape[1] != n or task.Y.shape[1] != m:
        raise ShapeMismatch(
            f"task {task.name!r} dims {task.X.shape[1]}x{task.Y.shape[1]} "
            f"do not match base {n}x{m}"
        )
    gram = task.X.T @ task.X + task.ridge * np.eye(n)
    rhs = task.X.T @ task.Y + task.ridge * base.T
    try:
        wt = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(f"task {task.name!r}: normal equations are singular") from exc
    return wt.T


def _as_matrix(model) -> np.ndarray:
    if isinstance(model, TensorBundle):
        mats = [arr for _, arr in model.items() if arr.ndim == 2]
        if len(mats) != 1:
            raise ValueError("expected a single-layer bundle with exactly one matrix")
        return mats[0].astype(np.float64)
    return np.asarray(model, dtype=np.float64)


def _neg_mse(W: np.ndarray, X: np.ndarray, Y: np.ndarray) -> float:
    resid = X @ W.T - Y
    return -float(np.mean(resid * resid))


def evaluate(model, tasks: list[SynthTask]) -> tuple[list[float], float]:
    """Score a weight matrix (or single-layer bundle) on every task.

    Returns (per-task negative mean squared errors, their mean).
    """
    W = _as_matrix(model)
    scores = []
    for task in tasks:
        if task.X.shape[1] != W.shape[1] or task.Y.shape[1] != W.shape[0]:
            raise ShapeMismatch(f"task {task.name!r} does not match model shape {W.shape}")
        scores.append(_neg_mse(W, task.X, task.Y))
    return scores, float(np.mean(scores))


def default_grids(method: str) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """(retain grid, coefficient grid) searched when none is given."""
    tenths = tuple(round(0.1 * i, 1) for i in range(1, 11))
    if method == "task_arithmetic":
        return (1.0,), tenths
    if method == "simple_avg":
        return (1.0,), (1.0,)
    return tenths, tuple(round(0.8 + 0.1 * i, 1) for i in range(8))


@dataclass
class TuneResult:
    """Grid-search outcome over (retain, coefficient) pairs.

    ``grid`` lists (retain, lam, mean validation score) in search order;
    ``best_*`` is the argmax with ties broken toward smaller retain, then
    smaller lam (scores within a 1e-12 relative band count as tied, so
    arithmetic noise cannot flip the tie-break). ``per_task_scores`` are
    the held-out (validation-split) scores of the winning configuration.
    """

    method: str
    task_names: list[str]
    grid: list[tuple[float, float, float]] = field(default_factory=list)
    best_retain: float = 1.0
    best_lambda: float = 1.0
    best_score: float = -np.inf
    per_task_scores: list[float] = field(default_factory=list)

    def to_table(self) -> str:
        lines = [f"# tuning grid  method={self.method}", "retain\tlambda\tval_score"]
        for retain, lam, score in self.grid:
            marker = "\t<= best" if (retain, lam) == (self.best_retain, self.best_lambda) else ""
            lines.append(f"{retain:.2f}\t{lam:.2f}\t{score:.8f}{marker}")
        lines.append(
            f"best: retain={self.best_retain:.2f} lambda={self.best_lambda:.2f} "
            f"score={self.best_score:.8f}"
        )
        for name, score in zip(self.task_names, self.per_task_scores):
            lines.append(f"heldout[{name}] = {score:.8f}")
        return "\n".join(lines) + "\n"


def _split_task(task: SynthTask, rng: np.random.Generator) -> tuple[SynthTask, np.ndarray, np.ndarray]:
    """90/10 train/validation split; returns (train task, X_val, Y_val)."""
    s = task.n_samples
    n_val = max(1, s // 10)
    perm = rng.permutation(s)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    train = SynthTask(task.name, task.X[train_idx], task.Y[train_idx], task.ridge)
    return train, task.X[val_idx], task.Y[val_idx]


def grid_tune(
    base: np.ndarray,
    tasks: list[SynthTask],
    method: str,
    retain_grid=None,
    lambda_grid=None,
    val_split_seed: int = 0,
) -> TuneResult:
    """Finetune on 90% splits, merge at every grid point, pick the best
    mean validation score."""
    if retain_grid is None or lambda_grid is None:
        default_retain, default_lambda = default_grids(method)
        retain_grid = default_retain if retain_grid is None else retain_grid
        lambda_grid = default_lambda if lambda_grid is None else lambda_grid
    retain_grid = [float(r) for r in retain_grid]
    lambda_grid = [float(l) for l in lambda_grid]
    if not retain_grid or not lambda_grid:
        raise ValueError("grids must be non-empty")

    base = np.asarray(base, dtype=np.float64)
    rng = np.random.default_rng(val_split_seed)
    splits = [_split_task(task, rng) for task in tasks]
    finetuned = [closed_form_finetune(base, train) for train, _, _ in splits]
    ds = DeltaSet(
        "layer0", base.shape, [w - base for w in finetuned], [t.name for t in tasks]
    )

    result = TuneResult(method=method, task_names=[t.name for t in tasks])
    best_per_task: list[float] = []
    for retain in retain_grid:
        for lam in lambda_grid:
            cfg = MergeConfig(method=method, retain=retain, lambdas=lam, seed=val_split_seed)
            merged = base + merge_delta_set(ds, cfg)
            per_task = [_neg_mse(merged, xv, yv) for _, xv, yv in splits]
            score = float(np.mean(per_task))
            result.grid.append((retain, lam, score))
            first = not np.isfinite(result.best_score)
            tie_band = 0.0 if first else 1e-12 * max(1.0, abs(result.best_score))
            if first or score > result.best_score + tie_band:
                result.best_score = score
                result.best_retain = retain
                result.best_lambda = lam
                best_per_task = per_task
    result.per_task_scores = best_per_task
    return result


def synth_suite(
    seed: int,
    n_tasks: int,
    m: int,
    n: int,
    samples: int,
    identical: bool = False,
    ridge: float = 0.0,
    noise: float = 0.0,
    delta_scale: float = 0.3,
) -> tuple[np.ndarray, list[SynthTask]]:
    """Build a base matrix and task family with planted linear solutions.

    ``identical=True`` reuses one planted solution and one sample set for
    every task, the degenerate case in which exact merging should recover
    the finetuned model.
    """
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((m, n)) / np.sqrt(n)
    tasks = []
    shared = None
    for t in range(n_tasks):
        if identical and shared is not None:
            X, Y = shared
        else:
            w_true = base + delta_scale * rng.standard_normal((m, n)) / np.sqrt(n)
            X = rng.standard_normal((samples, n))
            Y = X @ w_true.T
            if noise > 0:
                Y = Y + noise * rng.standard_normal(Y.shape)
            if identical:
                shared = (X, Y)
        tasks.append(SynthTask(f"task{t}", X, Y, ridge))
    return base, tasks


@dataclass
class BenchResult:
    """Comparison of merging methods on one synthetic suite."""

    task_names: list[str]
    finetuned_score: float
    method_scores: dict[str, float] = field(default_factory=dict)
    per_task: dict[str, list[float]] = field(default_factory=dict)

    def to_table(self) -> str:
        width = max(len(m) for m in list(self.method_scores) + ["finetuned"])
        lines = ["method".ljust(width) + "\tmean_score\t" + "\t".join(self.task_names)]
        lines.append("finetuned".ljust(width) + f"\t{self.finetuned_score:.8f}")
        for method, score in self.method_scores.items():
            per = "\t".join(f"{s:.8f}" for s in self.per_task[method])
            lines.append(method.ljust(width) + f"\t{score:.8f}\t{per}")
        return "\n".join(lines) + "\n"


def _neutral_config(method: str, n_tasks: int, seed: int) -> MergeConfig:
    # Settings at which exact-recovery is expected for identical tasks.
    lam = 1.0 / n_tasks if method == "task_arithmetic" else 1.0
    return MergeConfig(method=method, retain=1.0, lambdas=lam, dare_drop=0.0, seed=seed)


def run_bench(
    base: np.ndarray,
    tasks: list[SynthTask],
    methods=BENCH_METHODS,
    neutral: bool = False,
    seed: int = 0,
) -> BenchResult:
    """Finetune every task, merge with each method, and score the merges.

    ``neutral=True`` swaps the per-method defaults for identity-preserving
    settings (retain 1, coefficient 1 or 1/N, no random drops).
    """
    base = np.asarray(base, dtype=np.float64)
    finetuned = [closed_form_finetune(base, task) for task in tasks]
    ft_scores = [evaluate(w, [task])[0][0] for w, task in zip(finetuned, tasks)]
    ds = DeltaSet(
        "layer0", base.shape, [w - base for w in finetuned], [t.name for t in tasks]
    )
    result = BenchResult([t.name for t in tasks], float(np.mean(ft_scores)))
    for method in methods:
        if neutral:
            cfg = _neutral_config(method, len(tasks), seed)
        else:
            cfg = MergeConfig(method=method, seed=seed)
        merged = base + merge_delta_set(ds, cfg)
        per_task, mean = evaluate(merged, tasks)
        result.method_scores[method] = mean
        result.per_task[method] = per_task
    return result
