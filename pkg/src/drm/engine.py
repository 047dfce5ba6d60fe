"""Joint-decomposition merging engine.

The pipeline for one layer: stack the task deltas, take a thin SVD, split
the non-shared factor into per-task blocks, renormalize each block row to
unit length while moving its norm into a per-task scale, then prune by
magnitude, elect dominant signs, disjoint-average, and project back to
parameter space. The vertical variant runs the same pipeline on transposed
deltas and transposes the result.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from .bundle import DeltaSet, TensorBundle, canonical_json, extract_deltas
from .errors import DrmError, ShapeMismatch
from .linalg import hconcat, nonzero_sigma_mask, thin_svd

METHODS = ("drm_h", "drm_v", "simple_avg", "task_arithmetic", "ties", "dare_ties")
ORIENTATIONS = ("horizontal", "vertical")
PRUNE_MODES = ("joint", "individual")

# A block row with 2-norm at or below this is rank-deficient noise; it
# renormalizes to the zero vector with zero scale.
ZERO_ROW_NORM = 1e-300


@dataclass(frozen=True)
class MergeConfig:
    """Method selector plus every knob the merging pipeline reads.

    ``lambdas`` may be a single shared coefficient, one per task, or None
    for the per-method default (0.4 for task arithmetic, 1.0 otherwise).
    ``retain`` is the fraction of largest-magnitude entries kept by
    pruning; ``dare_drop`` the random drop rate; ``rank_drop`` the fraction
    of nonzero spectrum discarded before merging. Simple averaging ignores
    the coefficients entirely.
    """

    method: str = "drm_h"
    retain: float = 0.2
    lambdas: float | tuple[float, ...] | None = None
    dare_drop: float = 0.8
    rank_drop: float = 0.0
    prune_mode: str = "joint"
    enable_prune: bool = True
    enable_sign_elect: bool = True
    enable_disjoint: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not (0.0 < self.retain <= 1.0):
            raise ValueError(f"retain must lie in (0, 1], got {self.retain}")
        if not (0.0 <= self.dare_drop < 1.0):
            raise ValueError(f"dare_drop must lie in [0, 1), got {self.dare_drop}")
        if not (0.0 <= self.rank_drop < 1.0):
            raise ValueError(f"rank_drop must lie in [0, 1), got {self.rank_drop}")
        if self.prune_mode not in PRUNE_MODES:
            raise ValueError(f"prune_mode must be one of {PRUNE_MODES}")
        if self.lambdas is not None:
            lams = (self.lambdas,) if np.isscalar(self.lambdas) else tuple(self.lambdas)
            if not all(np.isfinite(l) for l in lams):
                raise ValueError("lambdas must be finite")
            object.__setattr__(
                self, "lambdas", float(lams[0]) if np.isscalar(self.lambdas) else tuple(map(float, lams))
            )

    def task_lambdas(self, n_tasks: int) -> np.ndarray:
        """Resolve the coefficient setting to one float per task."""
        if self.lambdas is None:
            shared = 0.4 if self.method == "task_arithmetic" else 1.0
            return np.full(n_tasks, shared)
        if np.isscalar(self.lambdas):
            return np.full(n_tasks, float(self.lambdas))
        lams = np.asarray(self.lambdas, dtype=np.float64)
        if lams.shape != (n_tasks,):
            raise ValueError(f"got {lams.size} lambdas for {n_tasks} tasks")
        return lams

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if isinstance(d["lambdas"], tuple):
            d["lambdas"] = list(d["lambdas"])
        return d


@dataclass
class JointDecomposition:
    """Shared basis and per-task blocks of one stacked-delta SVD.

    For the horizontal orientation, ``U @ diag(sigma) @ blocks[t]``
    reconstructs task t's delta; vertically the same product reconstructs
    the transposed delta (blocks are stored transposed so both orientations
    expose r x dim blocks). ``row_norms[t, i]`` is the 2-norm of row i of
    block t; the squared norms of any active row sum to one across tasks
    (the unit budget of a partitioned orthonormal factor).
    ``renorm_blocks`` hold the unit-length rows and
    ``task_sigmas[t, i] = sigma[i] * row_norms[t, i]`` carries the
    displaced magnitude.
    """

    orientation: str
    U: np.ndarray
    sigma: np.ndarray
    blocks: list[np.ndarray]
    row_norms: np.ndarray
    renorm_blocks: list[np.ndarray]
    task_sigmas: np.ndarray

    @property
    def n_tasks(self) -> int:
        return len(self.blocks)

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.active_mask()))

    def active_mask(self) -> np.ndarray:
        """Components whose shared singular value counts as nonzero."""
        return nonzero_sigma_mask(self.sigma)

    def scaled_blocks(self) -> list[np.ndarray]:
        """Per-task products diag(task_sigmas[t]) @ renorm_blocks[t]."""
        return [self.task_sigmas[t][:, None] * self.renorm_blocks[t] for t in range(self.n_tasks)]


def renormalize_row(v: np.ndarray) -> tuple[np.ndarray, float]:
    """Return (unit vector, norm); the zero vector maps to (zero, 0.0)."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= ZERO_ROW_NORM:
        return np.zeros_like(v), 0.0
    return v / norm, norm


def decompose_joint(ds: DeltaSet, orientation: str = "horizontal") -> JointDecomposition:
    """Decompose the stacked deltas and renormalize the per-task blocks."""
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    if orientation == "vertical":
        jd = decompose_joint(ds.transposed(), "horizontal")
        return dataclasses.replace(jd, orientation="vertical")

    n_tasks = ds.n_tasks
    n_cols = ds.base_shape[1]
    svd = thin_svd(hconcat(ds.deltas))
    blocks = [svd.Vt[:, t * n_cols : (t + 1) * n_cols] for t in range(n_tasks)]

    r = svd.sigma.size
    row_norms = np.empty((n_tasks, r))
    renorm_blocks = []
    for t, block in enumerate(blocks):
        norms = np.linalg.norm(block, axis=1)
        row_norms[t] = norms
        safe = np.where(norms > ZERO_ROW_NORM, norms, 1.0)
        renorm = block / safe[:, None]
        renorm[norms <= ZERO_ROW_NORM] = 0.0
        renorm_blocks.append(renorm)
    row_norms[row_norms <= ZERO_ROW_NORM] = 0.0
    task_sigmas = svd.sigma[None, :] * row_norms
    return JointDecomposition(
        orientation="horizontal",
        U=svd.U,
        sigma=svd.sigma.copy(),
        blocks=blocks,
        row_norms=row_norms,
        renorm_blocks=renorm_blocks,
        task_sigmas=task_sigmas,
    )


def _keep_count(retain: float, total: int) -> int:
    # ceil with a guard against float dust (0.2 * 15 == 3.0000000000000004).
    if total == 0:
        return 0
    return min(total, max(0, math.ceil(retain * total - 1e-9)))


def truncate_rank(jd: JointDecomposition, rank_drop: float) -> JointDecomposition:
    """Zero all but the top ceil((1 - rank_drop) * rank) components.

    Ranking uses the shared singular values, before any renormalized
    per-task rescaling could reorder them. rank_drop = 0 is the identity.
    """
    if not (0.0 <= rank_drop < 1.0):
        raise ValueError(f"rank_drop must lie in [0, 1), got {rank_drop}")
    if rank_drop == 0.0:
        return jd
    keep = _keep_count(1.0 - rank_drop, jd.rank)
    r = jd.sigma.size
    dead = np.arange(r) >= keep  # sigma is sorted, so the tail goes
    sigma = np.where(dead, 0.0, jd.sigma)
    U = jd.U.copy()
    U[:, dead] = 0.0
    blocks = [b.copy() for b in jd.blocks]
    renorm = [b.copy() for b in jd.renorm_blocks]
    for t in range(jd.n_tasks):
        blocks[t][dead] = 0.0
        renorm[t][dead] = 0.0
    row_norms = jd.row_norms.copy()
    row_norms[:, dead] = 0.0
    task_sigmas = jd.task_sigmas.copy()
    task_sigmas[:, dead] = 0.0
    return JointDecomposition(
        orientation=jd.orientation,
        U=U,
        sigma=sigma,
        blocks=blocks,
        row_norms=row_norms,
        renorm_blocks=renorm,
        task_sigmas=task_sigmas,
    )


def prune_topk(blocks: list[np.ndarray], retain: float, mode: str = "joint") -> list[np.ndarray]:
    """Boolean keep-masks for the top-``retain`` fraction by magnitude.

    Joint mode pools every entry of every block before ranking; individual
    mode ranks inside each block. Exactly ceil(retain * pool_size) entries
    are kept per pool; ties at the cutoff keep the smaller
    (task, row, col) index. Structural zeros compete and lose.
    """
    if not (0.0 < retain <= 1.0):
        raise ValueError(f"retain must lie in (0, 1], got {retain}")
    if mode not in PRUNE_MODES:
        raise ValueError(f"mode must be one of {PRUNE_MODES}")
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]

    def pool_mask(flat_abs: np.ndarray) -> np.ndarray:
        keep = _keep_count(retain, flat_abs.size)
        mask = np.zeros(flat_abs.size, dtype=bool)
        if keep:
            # Stable sort on -|v|: equal magnitudes stay in flattened
            # (task, row, col) order, making the cutoff deterministic.
            order = np.argsort(-flat_abs, kind="stable")
            mask[order[:keep]] = True
        return mask

    if mode == "individual":
        return [pool_mask(np.abs(b).ravel()).reshape(b.shape) for b in blocks]

    sizes = [b.size for b in blocks]
    pooled = pool_mask(np.concatenate([np.abs(b).ravel() for b in blocks]))
    out = []
    start = 0
    for b, size in zip(blocks, sizes):
        out.append(pooled[start : start + size].reshape(b.shape))
        start += size
    return out


def elect_signs(scaled_blocks: list[np.ndarray]) -> np.ndarray:
    """Dominant sign per position of the element-wise sum; zero sums elect +1."""
    total = np.zeros_like(np.asarray(scaled_blocks[0], dtype=np.float64))
    for b in scaled_blocks:
        total = total + np.asarray(b, dtype=np.float64)
    return np.where(total < 0.0, -1.0, 1.0)


def disjoint_average(
    scaled_blocks: list[np.ndarray],
    masks: list[np.ndarray],
    signs: np.ndarray | None,
    lambdas,
    disjoint: bool = True,
) -> np.ndarray:
    """Combine per-task blocks, averaging each position over its survivors.

    Entries failing their mask, or disagreeing with the elected sign, are
    zeroed per task. The result is the coefficient-weighted sum scaled per
    position by the reciprocal survivor count (positions nobody survives
    stay zero). With ``disjoint=False`` the reciprocal count is replaced by
    the constant 1/N. ``signs=None`` skips the sign filter.
    """
    n_tasks = len(scaled_blocks)
    lams = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    if lams.size == 1:
        lams = np.full(n_tasks, lams[0])
    if lams.size != n_tasks:
        raise ShapeMismatch(f"got {lams.size} lambdas for {n_tasks} blocks")

    shape = np.asarray(scaled_blocks[0]).shape
    weighted = np.zeros(shape)
    counts = np.zeros(shape)
    for block, mask, lam in zip(scaled_blocks, masks, lams):
        block = np.asarray(block, dtype=np.float64)
        if block.shape != shape or np.shape(mask) != shape:
            raise ShapeMismatch("blocks and masks must share one shape")
        kept = np.where(mask, block, 0.0)
        if signs is not None:
            kept = np.where(kept * signs > 0.0, kept, 0.0)
        weighted += lam * kept
        counts += kept != 0.0
    if disjoint:
        gamma = np.divide(1.0, counts, out=np.zeros(shape), where=counts > 0)
    else:
        gamma = np.full(shape, 1.0 / n_tasks)
    return gamma * weighted


def merge_drm(ds: DeltaSet, cfg: MergeConfig) -> np.ndarray:
    """Run the full joint-space pipeline and return the merged delta."""
    merged, _ = merge_drm_with_stats(ds, cfg)
    return merged


def merge_drm_with_stats(ds: DeltaSet, cfg: MergeConfig) -> tuple[np.ndarray, dict]:
    if cfg.method not in ("drm_h", "drm_v"):
        raise ValueError(f"merge_drm handles drm_h/drm_v, not {cfg.method!r}")
    if cfg.method == "drm_v":
        # Exact transpose duality: the vertical variant is the horizontal
        # pipeline on transposed deltas, transposed back.
        merged, stats = merge_drm_with_stats(
            ds.transposed(), dataclasses.replace(cfg, method="drm_h")
        )
        return merged.T, stats

    jd = decompose_joint(ds, "horizontal")
    jd = truncate_rank(jd, cfg.rank_drop)
    scaled = jd.scaled_blocks()
    if cfg.enable_prune:
        masks = prune_topk(jd.renorm_blocks, cfg.retain, cfg.prune_mode)
    else:
        masks = [np.ones(b.shape, dtype=bool) for b in jd.renorm_blocks]
    signs = elect_signs(scaled) if cfg.enable_sign_elect else None
    merged_block = disjoint_average(
        scaled, masks, signs, cfg.task_lambdas(ds.n_tasks), cfg.enable_disjoint
    )
    stats = {"rank": jd.rank, "kept": int(sum(m.sum() for m in masks)),
             "total": int(sum(m.size for m in masks))}
    return jd.U @ merged_block, stats


def merge_biases(base: np.ndarray, task_values: list[np.ndarray], lambdas) -> np.ndarray:
    """Weighted-average path for rank-1 tensors: base + mean of scaled deltas."""
    base = np.asarray(base, dtype=np.float64)
    lams = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    if lams.size == 1:
        lams = np.full(len(task_values), lams[0])
    if lams.size != len(task_values):
        raise ShapeMismatch(f"got {lams.size} lambdas for {len(task_values)} tasks")
    acc = np.zeros_like(base)
    for value, lam in zip(task_values, lams):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != base.shape:
            raise ShapeMismatch(f"bias shape {value.shape} != base shape {base.shape}")
        acc += lam * (value - base)
    return base + acc / len(task_values)


def merge_delta_set(ds: DeltaSet, cfg: MergeConfig) -> np.ndarray:
    """Dispatch one layer's DeltaSet to the configured method; returns the merged delta."""
    merged, _ = _merge_delta_set_with_stats(ds, cfg)
    return merged


def _merge_delta_set_with_stats(ds: DeltaSet, cfg: MergeConfig) -> tuple[np.ndarray, dict]:
    from . import baselines  # local import: baselines builds on this module's ops

    if cfg.method in ("drm_h", "drm_v"):
        return merge_drm_with_stats(ds, cfg)
    if cfg.method == "simple_avg":
        # Averaging the full weights equals base + the mean delta.
        return np.mean(ds.deltas, axis=0), {}
    if cfg.method == "task_arithmetic":
        return baselines.task_arithmetic(ds, cfg.task_lambdas(ds.n_tasks)), {}
    if cfg.method == "ties":
        return baselines.ties_merge_with_stats(ds, cfg)
    if cfg.method == "dare_ties":
        return baselines.dare_ties_merge(ds, cfg), {}
    raise ValueError(f"unknown method {cfg.method!r}")


@dataclass
class LayerStats:
    """Per-layer summary of one merge run, for reporting."""

    name: str
    shape: tuple[int, ...]
    rank: int | None = None
    kept: int | None = None
    total: int | None = None


def _thread_count(n_items: int) -> int:
    raw = os.environ.get("DRM_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    if cap <= 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, n_items))


def merge_bundle(
    base: TensorBundle,
    tasks: list[TensorBundle],
    cfg: MergeConfig,
    task_names: list[str] | None = None,
) -> TensorBundle:
    """Merge task checkpoints onto the base; see :func:`merge_bundle_with_stats`."""
    merged, _ = merge_bundle_with_stats(base, tasks, cfg, task_names)
    return merged


def merge_bundle_with_stats(
    base: TensorBundle,
    tasks: list[TensorBundle],
    cfg: MergeConfig,
    task_names: list[str] | None = None,
) -> tuple[TensorBundle, list[LayerStats]]:
    """Merge whole checkpoints: matrices via the configured method, biases
    via weighted averaging. Output dtypes follow the base bundle per tensor
    and the metadata records the configuration. Layers are independent and
    may be processed in parallel (capped by DRM_THREADS; 0 = auto).
    """
    delta_sets, bias_group = extract_deltas(base, tasks, task_names)
    n_tasks = len(tasks)
    bias_lams = (
        np.ones(n_tasks) if cfg.method == "simple_avg" else cfg.task_lambdas(n_tasks)
    )

    def one_layer(ds: DeltaSet) -> tuple[np.ndarray, dict]:
        try:
            return _merge_delta_set_with_stats(ds, cfg)
        except (DrmError, ValueError) as exc:
            raise type(exc)(f"layer {ds.layer_name!r}: {exc}") from exc

    merged_deltas: dict[str, tuple[np.ndarray, dict]] = {}
    workers = _thread_count(len(delta_sets))
    if workers > 1 and len(delta_sets) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            for ds, result in zip(delta_sets, pool.map(one_layer, delta_sets)):
                merged_deltas[ds.layer_name] = result
    else:
        for ds in delta_sets:
            merged_deltas[ds.layer_name] = one_layer(ds)

    merged_biases = {
        entry.name: merge_biases(entry.base, entry.task_values, bias_lams)
        for entry in bias_group
    }

    meta = dict(base.metadata)
    meta["merge.method"] = cfg.method
    meta["merge.config"] = canonical_json(cfg.as_dict())
    meta["merge.lambdas"] = canonical_json([float(l) for l in bias_lams])
    meta["merge.tasks"] = canonical_json(
        task_names if task_names is not None else [f"task{i}" for i in range(n_tasks)]
    )
    out = TensorBundle(metadata=meta)
    stats: list[LayerStats] = []
    for name, arr in base.items():
        if arr.ndim == 2:
            delta, info = merged_deltas[name]
            merged = arr.astype(np.float64) + delta
            stats.append(
                LayerStats(
                    name,
                    arr.shape,
                    rank=info.get("rank"),
                    kept=info.get("kept"),
                    total=info.get("total"),
                )
            )
        else:
            merged = merged_biases[name]
            stats.append(LayerStats(name, arr.shape))
        out.add(name, merged.astype(arr.dtype))
    return out, stats
