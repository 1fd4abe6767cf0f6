"""Adaptive patch selection and the distillation target for the prior-weight head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import substream


@dataclass(frozen=True)
class SelectionConfig:
    region_size: int = 8
    patch_count: int = 100
    training_region_size: int = 8
    negative_keep_fraction: float = 0.1
    negative_threshold: float = 0.1

    def __post_init__(self):
        if self.region_size < 1 or self.patch_count < 1 or self.training_region_size < 1:
            raise ValueError("region sizes and patch count must be >= 1")
        if not 0.0 <= self.negative_keep_fraction <= 1.0:
            raise ValueError("negative_keep_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class Selection:
    """Selected ``(row, col)`` positions, best first, with their weights."""

    positions: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def as_xy(self) -> np.ndarray:
        return self.positions[:, ::-1].astype(float)


@dataclass(frozen=True)
class DistillationTarget:
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.weights)


def mask_weights(prior: np.ndarray, inv_depth: np.ndarray) -> np.ndarray:
    """Zero the prior weight wherever the inverse depth is not positive."""
    prior = np.asarray(prior, dtype=float)
    inv_depth = np.asarray(inv_depth, dtype=float)
    if prior.shape != inv_depth.shape:
        raise ValueError(f"map shapes differ: {prior.shape} vs {inv_depth.shape}")
    return np.where(inv_depth > 0, prior, 0.0)


def _region_argmax(values: np.ndarray, n: int):
    """Per-region maximum of an ``(H, W)`` map tiled by ``n x n`` blocks.

    Border blocks may be partial. Returns ``(rows, cols, vals)`` in region
    row-major order; ties go to the first pixel in row-major order.
    """
    H, W = values.shape
    gh, gw = -(-H // n), -(-W // n)
    padded = np.full((gh * n, gw * n), -np.inf)
    padded[:H, :W] = values
    blocks = padded.reshape(gh, n, gw, n).transpose(0, 2, 1, 3).reshape(gh * gw, n * n)
    k = np.argmax(blocks, axis=1)
    vals = blocks[np.arange(len(k)), k]
    br, bc = np.divmod(np.arange(gh * gw), gw)
    rows = br * n + k // n
    cols = bc * n + k % n
    return rows, cols, vals


def select_patches(masked: np.ndarray, config: SelectionConfig) -> Selection:
    """Top-``N`` region maxima of a masked prior weight map.

    Zero-weight maxima are never returned, so fewer than ``N`` positions come
    back when fewer regions hold positive weight.
    """
    rows, cols, vals = _region_argmax(np.asarray(masked, dtype=float), config.region_size)
    keep = vals > 0
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    order = np.argsort(-vals, kind="stable")[: config.patch_count]
    return Selection(np.stack([rows[order], cols[order]], axis=1), vals[order])


def select_patches_random(masked: np.ndarray, count: int, rng: np.random.Generator) -> Selection:
    """Uniform sample of ``count`` distinct pixels among those with positive weight.

    This is the baseline selector: it ignores weight magnitude and only
    skips pixels without depth.
    """
    masked = np.asarray(masked, dtype=float)
    cand = np.flatnonzero(masked.ravel() > 0)
    take = rng.choice(cand, size=min(count, len(cand)), replace=False)
    rows, cols = np.divmod(take, masked.shape[1])
    return Selection(np.stack([rows, cols], axis=1), masked.ravel()[take])


def select_patches_training(maps, config: SelectionConfig, seed: int) -> np.ndarray:
    """One uniformly random ``(row, col)`` per ``m x m`` region, seeded.

    ``maps`` is a frame bundle or any ``(H, W)`` array fixing the map size.
    """
    shape = getattr(maps, "inv_depth_map", maps).shape[:2]
    H, W = shape
    m = config.training_region_size
    if m > H or m > W:
        raise ValueError(f"training regions of {m} px do not fit a {H}x{W} map")
    r0 = np.arange(0, H, m)
    c0 = np.arange(0, W, m)
    R0, C0 = np.meshgrid(r0, c0, indexing="ij")
    R0, C0 = R0.ravel(), C0.ravel()
    h = np.minimum(m, H - R0)
    w = np.minimum(m, W - C0)
    rng = substream(seed, "training-selector")
    rows = R0 + (rng.random(len(R0)) * h).astype(np.int64)
    cols = C0 + (rng.random(len(C0)) * w).astype(np.int64)
    return np.stack([rows, cols], axis=1)


def build_distillation_target(
    posterior_weights,
    gt_positions,
    config: SelectionConfig = SelectionConfig(),
    seed: int = 0,
) -> DistillationTarget:
    """Per-pixel supervision for the prior-weight head.

    ``posterior_weights`` are the weights of the projections onto frame ``j``
    of the patches of frames ``j-1``, ``j`` and ``j+1``; ``gt_positions`` are
    their ``(x, y)`` locations under ground-truth poses. Projections falling
    on the same pixel keep the largest weight. Zero weights are dropped, and
    of the weights below ``negative_threshold`` only
    ``ceil(negative_keep_fraction * count)`` survive, picked by a seeded
    shuffle.
    """
    w = np.asarray(posterior_weights, dtype=float).reshape(-1)
    xy = np.asarray(gt_positions, dtype=float).reshape(-1, 2)
    if len(w) != len(xy):
        raise ValueError("weights and positions differ in length")
    if np.any((w < 0) | (w > 1)):
        raise ValueError("posterior weights must lie in [0, 1]")
    if len(w) == 0:
        return DistillationTarget()
    pix = np.floor(xy[:, ::-1] + 0.5).astype(np.int64)  # (row, col)
    uniq, inverse = np.unique(pix, axis=0, return_inverse=True)
    best = np.zeros(len(uniq))
    np.maximum.at(best, inverse.reshape(-1), w)

    nonzero = best > 0
    uniq, best = uniq[nonzero], best[nonzero]
    negative = best < config.negative_threshold
    neg_idx = np.flatnonzero(negative)
    n_keep = math.ceil(config.negative_keep_fraction * len(neg_idx) - 1e-9)
    kept_neg = substream(seed, "distillation").permutation(neg_idx)[:n_keep]
    keep = ~negative
    keep[kept_neg] = True
    return DistillationTarget(uniq[keep], best[keep])


def bilinear_sample(grid: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an ``(H, W)`` map at real ``(x, y)``; outside reads 0."""
    grid = np.asarray(grid, dtype=float)
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    H, W = grid.shape
    x0 = np.floor(xy[:, 0]).astype(np.int64)
    y0 = np.floor(xy[:, 1]).astype(np.int64)
    fx = xy[:, 0] - x0
    fy = xy[:, 1] - y0
    out = np.zeros(len(xy))
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        out[ok] += wgt[ok] * grid[yi[ok], xi[ok]]
    return out


def prior_weight_loss(predicted, target) -> float:
    """Mean absolute difference between predicted and target weights."""
    gt = target.weights if isinstance(target, DistillationTarget) else target
    pred = np.asarray(predicted, dtype=float).reshape(-1)
    gt = np.asarray(gt, dtype=float).reshape(-1)
    if gt.size == 0:
        raise ValueError("prior_weight_loss needs a non-empty target")
    if pred.shape != gt.shape:
        raise ValueError(f"predicted has {pred.size} entries, target {gt.size}")
    return float(np.mean(np.abs(pred - gt)))


def distillation_loss(prior_map: np.ndarray, target: DistillationTarget) -> float:
    """Sample the predicted prior map at the target pixels and score it."""
    pred = bilinear_sample(prior_map, target.positions[:, ::-1])
    return prior_weight_loss(pred, target)


def format_selection(frame_id: int, selection: Selection, first_patch_id: int = 0) -> str:
    """``frame_id patch_id x y weight`` lines."""
    return "".join(
        f"{frame_id} {first_patch_id + k} {int(c)} {int(r)} {w:.6f}\n"
        for k, ((r, c), w) in enumerate(zip(selection.positions, selection.weights))
    )
