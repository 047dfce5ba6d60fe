"""Reference merging methods operating directly in parameter space."""

from __future__ import annotations

import hashlib

import numpy as np

from .bundle import DeltaSet
from .engine import MergeConfig, disjoint_average, elect_signs, prune_topk
from .errors import ShapeMismatch


def simple_average(weights: list[np.ndarray]) -> np.ndarray:
    """Element-wise mean of the full task weights."""
    weights = [np.asarray(w, dtype=np.float64) for w in weights]
    shape = weights[0].shape
    for i, w in enumerate(weights):
        if w.shape != shape:
            raise ShapeMismatch(f"weight {i} has shape {w.shape}, expected {shape}")
    return np.mean(weights, axis=0)


def task_arithmetic(ds: DeltaSet, lambdas) -> np.ndarray:
    """Coefficient-weighted sum of the deltas (no averaging, no pruning)."""
    lams = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    if lams.size == 1:
        lams = np.full(ds.n_tasks, lams[0])
    if lams.size != ds.n_tasks:
        raise ShapeMismatch(f"got {lams.size} lambdas for {ds.n_tasks} tasks")
    out = np.zeros(ds.base_shape)
    for lam, delta in zip(lams, ds.deltas):
        out += lam * delta
    return out


def ties_merge(ds: DeltaSet, cfg: MergeConfig) -> np.ndarray:
    """Per-task magnitude pruning, sign election, and disjoint averaging,
    applied to the raw deltas with no decomposition."""
    merged, _ = ties_merge_with_stats(ds, cfg)
    return merged


def ties_merge_with_stats(ds: DeltaSet, cfg: MergeConfig) -> tuple[np.ndarray, dict]:
    if cfg.enable_prune:
        masks = prune_topk(ds.deltas, cfg.retain, "individual")
    else:
        masks = [np.ones(d.shape, dtype=bool) for d in ds.deltas]
    pruned = [np.where(m, d, 0.0) for m, d in zip(masks, ds.deltas)]
    signs = elect_signs(pruned) if cfg.enable_sign_elect else None
    merged = disjoint_average(
        ds.deltas, masks, signs, cfg.task_lambdas(ds.n_tasks), cfg.enable_disjoint
    )
    stats = {"kept": int(sum(m.sum() for m in masks)),
             "total": int(sum(m.size for m in masks))}
    return merged, stats


def _dare_generator(seed: int, layer_name: str, task_index: int) -> np.random.Generator:
    # Counter-based stream keyed on (seed, layer, task): layer-parallel and
    # serial runs draw identical masks.
    digest = hashlib.sha256(
        f"{seed}\x00{layer_name}\x00{task_index}".encode("utf-8")
    ).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def dare_ties_merge(
    ds: DeltaSet, cfg: MergeConfig, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Random drop-and-rescale in place of magnitude pruning, then the TIES
    election and disjoint averaging.

    Each entry is zeroed independently with probability ``cfg.dare_drop``
    and survivors are scaled by 1/(1 - p), which keeps the per-entry
    expectation at the original delta. Pass ``rng`` to override the
    deterministic per-(seed, layer, task) streams.
    """
    p = cfg.dare_drop
    scale = 1.0 / (1.0 - p)
    dropped = []
    for t, delta in enumerate(ds.deltas):
        gen = rng if rng is not None else _dare_generator(cfg.seed, ds.layer_name, t)
        keep = gen.random(delta.shape) >= p
        dropped.append(np.where(keep, delta * scale, 0.0))
    masks = [np.ones(d.shape, dtype=bool) for d in dropped]
    signs = elect_signs(dropped) if cfg.enable_sign_elect else None
    return disjoint_average(
        dropped, masks, signs, cfg.task_lambdas(ds.n_tasks), cfg.enable_disjoint
    )
