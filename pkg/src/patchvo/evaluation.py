"""Trajectory I/O, scale-aligned ATE, AUC and loss bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose, rotation_angle

TUM_FIELDS = 8
QUAT_NORM_TOL = 1e-3


class TrajectoryFormatError(ValueError):
    pass


class DegenerateAlignmentError(ValueError):
    pass


@dataclass
class Trajectory:
    """Timestamped world-to-camera poses."""

    timestamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        """Camera centres in world coordinates, ``(n, 3)``."""
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.center() for p in self.poses])

    def transformed(self, scale: float, R: np.ndarray, t: np.ndarray) -> Trajectory:
        """Apply the world similarity ``x -> scale * R x + t`` to every camera."""
        out = []
        for p in self.poses:
            c = scale * R @ p.center() + t
            R_wc = p.R @ R.T
            out.append(Pose.from_rt(R_wc, -R_wc @ c))
        return Trajectory(self.timestamps.copy(), out)


@dataclass(frozen=True)
class LossWeights:
    pose: float = 10.0
    flow: float = 0.1
    pw: float = 10.0

    def __post_init__(self):
        if min(self.pose, self.flow, self.pw) < 0:
            raise ValueError("loss weights must be nonnegative")


# --- TUM files ---------------------------------------------------------------


def read_trajectory(path) -> Trajectory:
    """Read a TUM file ``timestamp tx ty tz qx qy qz qw`` (camera-to-world)."""
    path = Path(path)
    stamps, poses = [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != TUM_FIELDS:
                raise TrajectoryFormatError(
                    f"{path}:{lineno}: expected {TUM_FIELDS} fields, got {len(fields)}"
                )
            try:
                vals = [float(f) for f in fields]
            except ValueError:
                raise TrajectoryFormatError(f"{path}:{lineno}: non-numeric field") from None
            q = np.array(vals[4:8])
            if abs(np.linalg.norm(q) - 1.0) > QUAT_NORM_TOL:
                raise TrajectoryFormatError(f"{path}:{lineno}: quaternion is not unit norm")
            if stamps and vals[0] <= stamps[-1]:
                raise TrajectoryFormatError(f"{path}:{lineno}: timestamps must increase")
            c2w = Pose(q, vals[1:4])
            stamps.append(vals[0])
            poses.append(c2w.inverse())
    return Trajectory(np.array(stamps), poses)


def format_tum_line(stamp: float, pose: Pose) -> str:
    c2w = pose.inverse()
    vals = [stamp, *c2w.translation, *c2w.rotation]
    return " ".join(f"{v + 0.0:.12f}" for v in vals)


def write_trajectory(trajectory: Trajectory, path) -> None:
    lines = [format_tum_line(s, p) for s, p in zip(trajectory.timestamps, trajectory.poses)]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# --- alignment and ATE -------------------------------------------------------


def associate(estimate: Trajectory, reference: Trajectory, max_dt: float = 0.01):
    """Index pairs matching each estimate stamp to the nearest reference stamp.

    Pairs further apart than ``max_dt`` are dropped, as are repeat uses of a
    reference stamp (the closer match wins).
    """
    ref = reference.timestamps
    if len(ref) == 0 or len(estimate) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    idx = np.clip(np.searchsorted(ref, estimate.timestamps), 1, max(len(ref) - 1, 1))
    left = np.maximum(idx - 1, 0)
    right = np.minimum(idx, len(ref) - 1)
    take_left = np.abs(estimate.timestamps - ref[left]) <= np.abs(ref[right] - estimate.timestamps)
    nearest = np.where(take_left, left, right)
    dt = np.abs(ref[nearest] - estimate.timestamps)
    ok = dt <= max_dt
    est_idx = np.flatnonzero(ok)
    ref_idx = nearest[ok]
    order = np.lexsort((dt[ok], ref_idx))
    _, first = np.unique(ref_idx[order], return_index=True)
    keep = np.sort(order[first])
    return est_idx[keep], ref_idx[keep]


def umeyama(src: np.ndarray, dst: np.ndarray, strict: bool = True):
    """Closed-form similarity ``(s, R, t)`` minimising ``sum |s R src + t - dst|^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    n = len(src)
    if n < 2:
        raise DegenerateAlignmentError("need at least two associated positions")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    X, Y = src - mu_s, dst - mu_d
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[0] <= 1e-12 * max(1.0, np.abs(src).max()):
        raise DegenerateAlignmentError("estimate positions are coincident")
    if strict and (n < 3 or sv[1] <= 1e-9 * sv[0]):
        raise DegenerateAlignmentError("estimate positions are collinear")
    cov = Y.T @ X / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (X**2).sum() / n
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def align_sim3(estimate: Trajectory, reference: Trajectory, max_dt: float = 0.01, strict: bool = True):
    """Similarity mapping estimated camera centres onto the reference.

    Returns ``(s, R, t)`` with ``s R p_est + t ~ p_ref``. With ``strict`` the
    associated positions must not be collinear; otherwise only coincident
    positions are rejected (the minimum is still attained, just not unique).
    """
    ei, ri = associate(estimate, reference, max_dt)
    if len(ei) == 0:
        raise ValueError("no timestamps could be associated")
    return umeyama(estimate.positions()[ei], reference.positions()[ri], strict=strict)


def ate_rmse(estimate: Trajectory, reference: Trajectory, align: bool = True, max_dt: float = 0.01) -> float:
    ei, ri = associate(estimate, reference, max_dt)
    if len(ei) == 0:
        raise ValueError("no timestamps could be associated")
    p_est = estimate.positions()[ei]
    p_ref = reference.positions()[ri]
    if align:
        s, R, t = umeyama(p_est, p_ref, strict=False)
        p_est = s * p_est @ R.T + t
    return float(np.sqrt(np.mean(np.sum((p_est - p_ref) ** 2, axis=1))))


def auc_error(ates, max_error: float, n_thresholds: int = 100) -> float:
    """Normalised area under the fraction-of-sequences-below-threshold curve."""
    ates = np.asarray(ates, dtype=float).reshape(-1)
    if ates.size == 0:
        raise ValueError("auc_error needs at least one ATE value")
    if not max_error > 0:
        raise ValueError("max_error must be positive")
    thresholds = np.linspace(0.0, max_error, n_thresholds)
    frac = (ates[None, :] <= thresholds[:, None]).mean(axis=1)
    return float(np.trapezoid(frac, thresholds) / max_error)


# --- losses ------------------------------------------------------------------


def combined_loss(pose_loss: float, flow_loss: float, pw_loss: float, weights: LossWeights = LossWeights()) -> float:
    if min(pose_loss, flow_loss, pw_loss) < 0:
        raise ValueError("loss components must be nonnegative")
    return weights.pose * pose_loss + weights.flow * flow_loss + weights.pw * pw_loss


def relative_pose_loss(estimate: Trajectory, reference: Trajectory) -> float:
    """Mean geodesic angle plus translation norm of consecutive relative-pose errors."""
    if len(estimate) != len(reference) or len(estimate) < 2:
        raise ValueError("pose loss needs two aligned trajectories of length >= 2")
    terms = []
    for k in range(len(estimate) - 1):
        rel_est = estimate.poses[k + 1] @ estimate.poses[k].inverse()
        rel_ref = reference.poses[k + 1] @ reference.poses[k].inverse()
        err = rel_ref.inverse() @ rel_est
        terms.append(rotation_angle(err.R) + np.linalg.norm(err.translation))
    return float(np.mean(terms))


def flow_l1_loss(graph, gt_coords: np.ndarray) -> float:
    """Mean per-edge L1 distance between current and ground-truth projections."""
    if graph.num_edges == 0:
        raise ValueError("flow loss on an empty graph")
    valid = graph.edge_valid
    if not valid.any():
        raise ValueError("flow loss needs at least one valid edge")
    diff = np.abs(graph.edge_coords[valid] - np.asarray(gt_coords)[valid]).sum(axis=-1)
    return float(diff.mean(axis=-1).mean())


def pose_flow_losses(estimate: Trajectory, reference: Trajectory, graph, gt_flow: np.ndarray):
    """``(L_pose, L_flow)``; reported as metrics, not used for training."""
    return relative_pose_loss(estimate, reference), flow_l1_loss(graph, gt_flow)
