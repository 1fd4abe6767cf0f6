"""Incremental sliding-window visual odometry on an oracle-driven patch graph."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .ba import INIT_INV_DEPTH, BAProblem, apply_solution, rescale_depth, solve
from .config import substream
from .evaluation import Trajectory, ate_rmse
from .geometry import Pose, make_patch
from .graph import PatchGraph, update_edges
from .oracle import SceneOracle, SyntheticScene, render_frame
from .selector import SelectionConfig, Selection, mask_weights, select_patches, select_patches_random

SELECTORS = ("adaptive", "random")


@dataclass(frozen=True)
class VOConfig:
    selector: str = "adaptive"
    patches: int = 100
    window: int = 10
    radius: int = 10
    noise: float | None = None
    seed: int = 0
    patch_size: int = 3
    region_size: int = 8
    init_frames: int = 12
    rounds: int = 1
    rescale: bool = True
    prior_depth_scale: float = 1.0
    correlation: bool = False
    damping: float = 1e-4
    max_iterations: int = 12
    convergence_tol: float = 1e-6

    def __post_init__(self):
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}, got {self.selector!r}")
        if self.patches < 1:
            raise ValueError("patch count N must be >= 1")
        if self.window < 1 or self.radius < 1 or self.rounds < 1:
            raise ValueError("window, radius and rounds must be >= 1")
        if self.init_frames < 2:
            raise ValueError("init_frames must be >= 2")
        if self.noise is not None and self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if not self.prior_depth_scale > 0:
            raise ValueError("prior_depth_scale must be positive")


@dataclass
class VOResult:
    trajectory: Trajectory
    points: np.ndarray
    point_refs: np.ndarray
    graph: PatchGraph
    flagged: list[int] = field(default_factory=list)
    telemetry: list[tuple[int, int, float]] = field(default_factory=list)
    selections: list[tuple[int, int, int, int, float]] = field(default_factory=list)
    free_frame_sets: list[tuple[int, ...]] = field(default_factory=list)
    reports: list = field(default_factory=list)
    initialized_at: int | None = None


def _select(bundle, frame: int, config: VOConfig) -> Selection:
    masked = mask_weights(bundle.prior_weight_map, bundle.inv_depth_map)
    if config.selector == "adaptive":
        return select_patches(masked, SelectionConfig(region_size=config.region_size, patch_count=config.patches))
    return select_patches_random(masked, config.patches, substream(config.seed, "selector", frame))


def _inv_depth_in(graph: PatchGraph, idx: np.ndarray, poses, frame: int, cam) -> np.ndarray:
    """Inverse depth of the given patches' centre points seen from ``frame``."""
    c = graph.patch_size * graph.patch_size // 2
    intr = cam.intrinsics
    uv = graph.patch_coords[idx, c]
    d = graph.patch_inv_depth[idx, c]
    ray = np.stack([(uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy, np.ones(len(idx))], axis=1)
    out = np.empty(len(idx))
    target = poses[frame]
    for k, (f, r, dk) in enumerate(zip(graph.patch_frame[idx], ray, d)):
        X = target.apply(poses[int(f)].inverse().apply(r / dk))
        out[k] = 1.0 / X[2] if X[2] > 0 else np.nan
    return out


def patch_points(graph: PatchGraph, poses, cam) -> np.ndarray:
    """World positions of every patch centre at its current inverse depth."""
    c = graph.patch_size * graph.patch_size // 2
    intr = cam.intrinsics
    uv = graph.patch_coords[:, c]
    d = graph.patch_inv_depth[:, c]
    ray = np.stack([(uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy, np.ones(len(d))], axis=1)
    pts = np.empty((len(d), 3))
    for f in np.unique(graph.patch_frame):
        sel = graph.patch_frame == f
        pts[sel] = poses[int(f)].inverse().apply(ray[sel] / d[sel, None])
    return pts


def run_vo(scene: SyntheticScene, config: VOConfig = VOConfig(), oracle=None) -> VOResult:
    """Track the scene frame by frame.

    Each new frame gets a constant-velocity pose guess and ``N`` selected
    patches; the graph grows, edges anchored inside the trailing window are
    refreshed through the oracle and bundle adjustment runs over the window
    with everything older held fixed. Patch depths start at 0.5 until the
    first solve over the initial ``init_frames`` frames succeeds, after which
    new patches start from the scene's depth prior rescaled into the running
    estimate's scale.
    """
    F = scene.num_frames
    if F < config.init_frames:
        raise ValueError(f"need at least {config.init_frames} frames, scene has {F}")
    cam = scene.cam
    if oracle is None:
        oracle = SceneOracle(scene, noise=config.noise, seed=config.seed)
    channels = scene.config.channels if config.correlation else 0
    graph = PatchGraph(config.radius, config.patch_size, channels)
    features = (lambda f: render_frame(scene, f).matching_features) if config.correlation else None
    prior_depth = np.zeros(0)
    poses: list[Pose] = []
    result = VOResult(None, None, None, graph)
    initialized = False

    for t in range(F):
        if t == 0:
            guess = Pose.identity()
        elif t == 1:
            guess = poses[0]
        else:
            guess = (poses[t - 1] @ poses[t - 2].inverse()) @ poses[t - 1]
        poses.append(guess)

        bundle = render_frame(scene, t)
        sel = _select(bundle, t, config)
        rows, cols = sel.positions[:, 0], sel.positions[:, 1]
        prior = bundle.inv_depth_map[rows, cols] * config.prior_depth_scale
        if initialized:
            depth = prior
            if config.rescale:
                prev = np.flatnonzero(np.isin(graph.patch_frame, [t - 1, t - 2]))
                cur = _inv_depth_in(graph, prev, poses, t, cam)
                ok = np.isfinite(cur)
                if ok.any():
                    depth = rescale_depth(prior, prior_depth[prev], cur[ok])
        else:
            depth = np.full(len(sel), INIT_INV_DEPTH)
        new = [
            make_patch(t, k, (int(c), int(r)), float(d), cam, config.patch_size)
            for k, (r, c, d) in enumerate(zip(rows, cols, depth))
        ]
        feats = None
        if config.correlation and new:
            xy = np.stack([p.coords for p in new]).astype(np.int64)
            feats = bundle.matching_features[xy[..., 1], xy[..., 0]]
        graph.extend(new, t + 1, feats)
        prior_depth = np.concatenate([prior_depth, prior])
        result.selections.extend(
            (t, k, int(c), int(r), float(w)) for k, ((r, c), w) in enumerate(zip(sel.positions, sel.weights))
        )
        if t == 0:
            continue

        lo = max(0, t - config.window + 1)
        free = set(range(max(1, lo), t + 1))
        fixed = frozenset(range(t + 1)) - free
        active = np.flatnonzero(graph.patch_frame[graph.edge_patch] >= lo)
        it = 0
        failed = False
        before = list(poses)
        for _ in range(config.rounds):
            update_edges(graph, poses, cam, oracle, features, edges=active)
            problem = BAProblem(
                graph,
                poses,
                fixed,
                cam,
                damping=config.damping,
                max_iterations=config.max_iterations,
                convergence_tol=config.convergence_tol,
                edges=active,
            )
            if problem.num_free == 0:
                break
            new_poses, depths, report = solve(problem)
            result.reports.append((t, report))
            result.free_frame_sets.append(tuple(problem.free_frames))
            for cost in report.history:
                result.telemetry.append((t, it, cost))
                it += 1
            if report.status == "singular" or not np.isfinite(report.final_cost):
                failed = True
                break
            poses[: len(new_poses)] = new_poses
            apply_solution(problem, depths)
        if failed:
            poses[:] = before
            result.flagged.append(t)
        elif not initialized and t >= config.init_frames - 1:
            initialized = True
            result.initialized_at = t

    # Final refresh so edge state matches the returned estimate.
    update_edges(graph, poses, cam, oracle, features)
    result.trajectory = Trajectory(scene.trajectory.timestamps.copy(), poses)
    result.points = patch_points(graph, poses, cam)
    result.point_refs = np.stack([graph.patch_frame, graph.patch_id], axis=1)
    return result


def patch_weights(graph: PatchGraph) -> np.ndarray:
    """Oracle posterior weight of each patch: the largest weight over its edges."""
    out = np.zeros(graph.num_patches)
    np.maximum.at(out, graph.edge_patch, graph.edge_weight)
    return out


@dataclass
class SelectorStats:
    mode: str
    fractions: list[float]
    ates: list[float]
    histogram: np.ndarray

    @property
    def mean_fraction(self) -> float:
        return float(np.mean(self.fractions))

    @property
    def mean_ate(self) -> float:
        return float(np.mean(self.ates))


def compare_selectors(scene: SyntheticScene, seeds, config: VOConfig = VOConfig(), bins: int = 10, threshold: float = 0.5):
    """Run both selectors once per seed.

    Per mode, reports the fraction of selected patches whose oracle weight
    exceeds ``threshold``, the scale-aligned ATE of every run and a histogram
    (fractions over ``bins`` equal bins of [0, 1]) of selected-patch weights
    pooled over seeds. Seeds are processed in the given order.
    """
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ValueError("compare_selectors needs at least 3 seeds")
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {}
    for mode in SELECTORS:
        fractions, ates, pooled = [], [], []
        for seed in seeds:
            res = run_vo(scene, replace(config, selector=mode, seed=seed))
            w = patch_weights(res.graph)
            fractions.append(float(np.mean(w > threshold)))
            ates.append(ate_rmse(res.trajectory, scene.trajectory))
            pooled.append(w)
        counts, _ = np.histogram(np.concatenate(pooled), bins=edges)
        out[mode] = SelectorStats(mode, fractions, ates, counts / max(counts.sum(), 1))
    return out
