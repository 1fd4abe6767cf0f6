"""Weighted reprojection bundle adjustment over poses and patch inverse depths.

Each patch carries one inverse depth shared by all of its pixels, so the
depth block of the normal equations is diagonal and is eliminated with a
Schur complement before the reduced pose system is solved. A dense solve of
the full system is kept alongside as a cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Patch, jacobian_parts, retract, stack_poses, transform_points
from .geometry import project as _project
from .graph import PatchGraph

INIT_INV_DEPTH = 0.5
# Relative floor on damping diagonals so that parameters with no information
# still get a positive pivot; relative so that weight scaling cancels.
_DIAG_FLOOR = 1e-12
# Costs below this fraction of the summed weight count as exact solutions.
_COST_FLOOR = 1e-24
_MAX_DAMPING = 1e16


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass
class BAReport:
    iterations_run: int
    initial_cost: float
    final_cost: float
    converged: bool
    history: list[float] = field(default_factory=list)
    status: str = "ok"
    damping: float = 0.0


@dataclass
class BAProblem:
    """Weighted reprojection problem frozen from the current graph state.

    Residual targets are ``edge_coords + edge_flow`` at construction time.
    Self-edges and zero-weight edges carry no information and are dropped.
    ``poses`` is indexable by frame id.
    """

    graph: PatchGraph
    poses: list
    fixed_frames: frozenset
    cam: CameraModel
    damping: float = 1e-4
    max_iterations: int = 12
    convergence_tol: float = 1e-6
    edges: np.ndarray | None = None

    def __post_init__(self):
        if not self.damping > 0:
            raise ValueError("damping must be positive")
        self.fixed_frames = frozenset(int(f) for f in self.fixed_frames)
        if not self.fixed_frames:
            raise ValueError("at least one frame must be held fixed")
        g = self.graph
        idx = np.arange(g.num_edges) if self.edges is None else np.asarray(self.edges, dtype=np.int64)
        w = g.edge_weight[idx] * g.edge_valid[idx]
        src = g.patch_frame[g.edge_patch[idx]]
        keep = (src != g.edge_target[idx]) & (w > 0)
        self.edges = idx[keep]
        self.weight = w[keep].astype(float)
        self.target = g.edge_coords[self.edges] + g.edge_flow[self.edges]
        pk = g.edge_patch[self.edges]
        self.src = g.patch_frame[pk]
        self.tgt = g.edge_target[self.edges]
        self.patches, self.edge_depth = np.unique(pk, return_inverse=True)
        self.coords = g.patch_coords[pk]
        centre = g.patch_size * g.patch_size // 2
        self.depth0 = g.patch_inv_depth[self.patches, centre].astype(float)

        referenced = np.unique(np.concatenate([self.src, self.tgt])).astype(int)
        for f in referenced:
            if f >= len(self.poses) or self.poses[f] is None:
                raise KeyError(f"missing pose estimate for frame {f}")
        self.free_frames = [int(f) for f in referenced if f not in self.fixed_frames]
        self.frame_count = int(referenced.max()) + 1 if len(referenced) else 0
        slot = np.full(max(self.frame_count, 1), -1)
        slot[self.free_frames] = np.arange(len(self.free_frames))
        self.src_slot = slot[self.src] if len(self.src) else self.src
        self.tgt_slot = slot[self.tgt] if len(self.tgt) else self.tgt

    @property
    def num_free(self) -> int:
        return len(self.free_frames)

    @property
    def cost_floor(self) -> float:
        return _COST_FLOOR * float(self.weight.sum()) * self.coords.shape[1]

    def pose_list(self) -> list:
        return [self.poses[f] for f in range(self.frame_count)]


# --- residuals ---------------------------------------------------------------


def _project_all(problem: BAProblem, Rs, ts, depth):
    d = np.broadcast_to(depth[problem.edge_depth][:, None], problem.coords.shape[:2])
    X = transform_points(
        problem.coords,
        d,
        Rs[problem.src][:, None],
        ts[problem.src][:, None],
        Rs[problem.tgt][:, None],
        ts[problem.tgt][:, None],
        problem.cam.intrinsics,
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = _project(X, problem.cam.intrinsics)
    return uv, X[..., 2]


def _cost(problem: BAProblem, Rs, ts, depth) -> tuple[np.ndarray, float]:
    uv, z = _project_all(problem, Rs, ts, depth)
    res = problem.target - uv
    if np.any(z <= 0) or not np.all(np.isfinite(res)):
        return res, np.inf
    return res, float(np.sum(problem.weight[:, None, None] * res * res))


def residuals(problem: BAProblem, poses=None, depths=None):
    """Per-edge residuals ``(E, p*p, 2)`` and the total weighted cost.

    Only the problem's informative edges are included (see
    :attr:`BAProblem.edges`); pass ``poses``/``depths`` to evaluate a state
    other than the initial one.
    """
    if len(problem.edges) == 0:
        return np.zeros((0,) + problem.coords.shape[1:]), 0.0
    Rs, ts = stack_poses(problem.pose_list() if poses is None else poses)
    depth = problem.depth0 if depths is None else np.asarray(depths, dtype=float)
    uv, _ = _project_all(problem, Rs, ts, depth)
    res = problem.target - uv
    return res, float(np.sum(problem.weight[:, None, None] * res * res))


# --- normal equations ----------------------------------------------------------


@dataclass
class NormalEquations:
    """``H = [[Hpp, Hpd], [Hpd^T, diag(hdd)]]`` and gradient ``(gp, gd)``.

    The system solved is ``H delta = g`` where ``g = J^T W r`` for residual
    ``r = target - projection``.
    """

    Hpp: np.ndarray
    Hpd: np.ndarray
    hdd: np.ndarray
    gp: np.ndarray
    gd: np.ndarray

    def damped(self, lam: float):
        dp = np.diag(self.Hpp).copy()
        scale = max(dp.max(initial=0.0), self.hdd.max(initial=0.0), 1e-300)
        dp = np.maximum(dp, _DIAG_FLOOR * scale)
        dd = np.maximum(self.hdd, _DIAG_FLOOR * scale)
        return self.Hpp + lam * np.diag(dp), self.hdd + lam * dd

    def predicted_decrease(self, dp: np.ndarray, dd: np.ndarray) -> float:
        """Cost decrease predicted by the undamped quadratic model."""
        Hd_p = self.Hpp @ dp + self.Hpd @ dd
        Hd_d = self.Hpd.T @ dp + self.hdd * dd
        return float(2 * (dp @ self.gp + dd @ self.gd) - (dp @ Hd_p + dd @ Hd_d))


def _scatter(n: int, indices, blocks) -> np.ndarray:
    """Sum fixed-size blocks into ``n`` slots; returns ``(n, *block_shape)``."""
    shape = blocks[0].shape[1:]
    m = int(np.prod(shape))
    idx = np.concatenate([i for i in indices]).astype(np.int64)
    vals = np.concatenate([b.reshape(len(b), m) for b in blocks])
    flat = np.bincount((idx[:, None] * m + np.arange(m)).ravel(), weights=vals.ravel(), minlength=n * m)
    return flat.reshape((n, *shape))


def linearize(problem: BAProblem, Rs, ts, depth) -> tuple[NormalEquations, float]:
    d = np.broadcast_to(depth[problem.edge_depth][:, None], problem.coords.shape[:2])
    R_tgt = Rs[problem.tgt]
    uv, Jc, Jd = jacobian_parts(
        problem.coords,
        d,
        Rs[problem.src][:, None],
        ts[problem.src][:, None],
        R_tgt[:, None],
        ts[problem.tgt][:, None],
        problem.cam.intrinsics,
    )
    r = problem.target - uv
    w = problem.weight
    E = len(w)
    # Accumulate in the target camera frame, then rotate once per edge:
    # J_tgt = Jc G with G = blockdiag(R_tgt, R_tgt).
    Jc = Jc.reshape(E, -1, 6)
    wJcT = np.swapaxes(w[:, None, None] * Jc, 1, 2)
    rhs = np.stack([r.reshape(E, -1), Jd.reshape(E, -1)], axis=-1)
    G = np.zeros((E, 6, 6))
    G[:, :3, :3] = R_tgt
    G[:, 3:, 3:] = R_tgt
    GT = np.swapaxes(G, 1, 2)
    A = GT @ (wJcT @ Jc) @ G
    bc = GT @ (wJcT @ rhs)
    bt, c = bc[..., 0], bc[..., 1]
    Jd = Jd.reshape(E, -1)
    dd = w * (Jd * Jd).sum(axis=1)
    bd = w * (Jd * r.reshape(E, -1)).sum(axis=1)

    F, P = problem.num_free, len(problem.patches)
    s, t, k = problem.src_slot, problem.tgt_slot, problem.edge_depth
    # The source Jacobian is the negated target Jacobian, so every block
    # involving the source pose is +/- the target block.
    fs, ft = s >= 0, t >= 0
    both = fs & ft
    Hpp = _scatter(
        F * F,
        [t[ft] * F + t[ft], s[fs] * F + s[fs], s[both] * F + t[both], t[both] * F + s[both]],
        [A[ft], A[fs], -A[both], -np.swapaxes(A[both], 1, 2)],
    ).reshape(F, F, 6, 6)
    gp = _scatter(F, [t[ft], s[fs]], [bt[ft], -bt[fs]])
    # Hpd is laid out as (frame, patch, 6) here and transposed below.
    Hpd = _scatter(F * P, [t[ft] * P + k[ft], s[fs] * P + k[fs]], [c[ft], -c[fs]]).reshape(F, P, 6)
    Hpd = Hpd.transpose(0, 2, 1)
    hdd = np.bincount(k, weights=dd, minlength=P)
    gd = np.bincount(k, weights=bd, minlength=P)

    Hpp = Hpp.transpose(0, 2, 1, 3).reshape(6 * F, 6 * F)
    cost = float(np.sum(w[:, None, None] * r * r))
    return NormalEquations(Hpp, Hpd.reshape(6 * F, P), hdd, gp.reshape(-1), gd), cost


def schur_step(ne: NormalEquations, lam: float):
    """Damped step with the depth block eliminated first."""
    Hpp, hdd = ne.damped(lam)
    inv = 1.0 / hdd
    S = Hpp - (ne.Hpd * inv) @ ne.Hpd.T
    rhs = ne.gp - ne.Hpd @ (inv * ne.gd)
    dp = np.linalg.solve(S, rhs) if len(rhs) else rhs
    dd = inv * (ne.gd - ne.Hpd.T @ dp)
    return dp, dd


def dense_step(ne: NormalEquations, lam: float):
    """Damped step from the full pose-plus-depth system, solved directly."""
    Hpp, hdd = ne.damped(lam)
    n = len(ne.gp)
    H = np.block([[Hpp, ne.Hpd], [ne.Hpd.T, np.diag(hdd)]])
    delta = np.linalg.solve(H, np.concatenate([ne.gp, ne.gd]))
    return delta[:n], delta[n:]


_LINEAR_SOLVERS = {"schur": schur_step, "dense": dense_step}


def _apply(problem: BAProblem, poses: list, depth, dp, dd):
    new_poses = list(poses)
    for slot, f in enumerate(problem.free_frames):
        new_poses[f] = retract(poses[f], dp[6 * slot : 6 * slot + 6])
    return new_poses, depth + dd


def solve(problem: BAProblem, linear_solver: str = "schur"):
    """Damped Gauss-Newton on poses and inverse depths.

    Returns ``(poses, inv_depths, report)``: the full pose list (fixed frames
    are passed through untouched), the optimized shared inverse depth of each
    patch in ``problem.patches``, and a :class:`BAReport`.
    """
    step_fn = _LINEAR_SOLVERS[linear_solver]
    poses = problem.pose_list()
    depth = problem.depth0.copy()
    if len(problem.edges) == 0:
        return poses, depth, BAReport(0, 0.0, 0.0, True, [0.0], "empty", problem.damping)
    if problem.num_free == 0:
        raise ValueError("no free frame to optimize")

    Rs, ts = stack_poses(poses)
    ne, cost = linearize(problem, Rs, ts, depth)
    history = [cost]
    report = BAReport(0, cost, cost, False, history, "max_iterations", problem.damping)
    if cost <= problem.cost_floor:
        report.converged, report.status = True, "exact"
        return poses, depth, report

    lam = problem.damping
    for it in range(problem.max_iterations):
        report.iterations_run = it + 1
        try:
            dp, dd = step_fn(ne, lam)
            if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(dd))):
                raise SingularSystemError("non-finite step")
        except np.linalg.LinAlgError:
            lam *= 10
            history.append(cost)
            if lam > _MAX_DAMPING:
                report.status = "singular"
                break
            continue
        if ne.predicted_decrease(dp, dd) <= problem.convergence_tol * cost:
            history.append(cost)
            report.converged, report.status = True, "converged"
            break
        new_poses, new_depth = _apply(problem, poses, depth, dp, dd)
        if np.all(new_depth > 0):
            Rn, tn = stack_poses(new_poses)
            _, new_cost = _cost(problem, Rn, tn, new_depth)
        else:
            new_cost = np.inf
        if new_cost < cost:
            rel = (cost - new_cost) / cost
            poses, depth, cost = new_poses, new_depth, new_cost
            history.append(cost)
            lam *= 0.5
            if rel < problem.convergence_tol or cost <= problem.cost_floor:
                report.converged, report.status = True, "converged"
                break
            ne, _ = linearize(problem, Rn, tn, depth)
        else:
            history.append(cost)
            lam *= 10
            if lam > _MAX_DAMPING:
                report.status = "damping_limit"
                break
    report.final_cost = cost
    report.damping = lam
    return poses, depth, report


def apply_solution(problem: BAProblem, depths: np.ndarray) -> None:
    """Write optimized shared inverse depths back into the graph."""
    problem.graph.set_inv_depth(problem.patches, depths)


# --- depth initialisation ----------------------------------------------------


def init_depths(patches) -> list[Patch]:
    """Every inverse depth set to the initialisation constant 0.5."""
    return [p.with_inv_depth(INIT_INV_DEPTH) for p in patches]


def rescale_depth(d, depths_prev, depths_j):
    """Bring a prior inverse depth into the scale of the current estimate.

    Multiplies ``d`` by ``len(depths_prev) * median(depths_j) / sum(depths_prev)``,
    i.e. the ratio of the current median to the previous mean.
    """
    prev = np.asarray(depths_prev, dtype=float).reshape(-1)
    cur = np.asarray(depths_j, dtype=float).reshape(-1)
    if prev.size == 0 or cur.size == 0:
        raise ValueError("rescale_depth needs two non-empty depth sets")
    total = prev.sum()
    if not total > 0:
        raise ValueError("previous inverse depths must have a positive sum")
    factor = prev.size * np.median(cur) / total
    return d * factor
