"""SE(3) poses, the pinhole camera and patch reprojection.

Conventions
-----------
* A :class:`Pose` maps world coordinates into camera coordinates,
  ``X_cam = R @ X_world + t``.
* Tangent increments are 6-vectors ``(rho, phi)``: translation part first,
  rotation part second. Updates are right-multiplicative,
  ``retract(T, delta) = T @ exp(delta)``; every Jacobian in this module is
  taken with respect to that retraction.
* Pixel coordinates are continuous ``(x, y)`` at feature-map resolution with
  pixel centres on the integer lattice; a coordinate is inside the map when
  ``0 <= x <= width - 1`` and ``0 <= y <= height - 1``.
* A patch pixel ``(x, y)`` with inverse depth ``d`` lifts to the homogeneous
  point ``[(x - cx) / fx, (y - cy) / fy, 1, d]``, which represents the 3-D
  point at depth ``1 / d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL_ANGLE = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for ``(..., 3)`` vectors."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        a = 0.5 - theta**2 / 24.0
        b = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta**2
        b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + a * K + b * (K @ K)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform.

    ``rotation`` is a unit quaternion in scalar-last ``(x, y, z, w)`` order;
    it is renormalised on construction.
    """

    rotation: np.ndarray
    translation: np.ndarray
    _R: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        q = q / n
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "_R", Rotation.from_quat(q).as_matrix())

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> Pose:
        return cls(Rotation.from_matrix(R).as_quat(), t)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def exp(cls, delta: np.ndarray) -> Pose:
        """Exponential map of a ``(rho, phi)`` tangent vector."""
        delta = np.asarray(delta, dtype=float).reshape(6)
        rho, phi = delta[:3], delta[3:]
        return cls(Rotation.from_rotvec(phi).as_quat(), _left_jacobian(phi) @ rho)

    @property
    def R(self) -> np.ndarray:
        return self._R

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self._R
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        q = self.rotation * np.array([-1.0, -1.0, -1.0, 1.0])
        return Pose(q, -self._R.T @ self.translation)

    def compose(self, other: Pose) -> Pose:
        q = (Rotation.from_quat(self.rotation) * Rotation.from_quat(other.rotation)).as_quat()
        return Pose(q, self._R @ other.translation + self.translation)

    __matmul__ = compose

    def log(self) -> np.ndarray:
        """Inverse of :meth:`exp`; rotation angle is returned in ``[0, pi]``."""
        phi = Rotation.from_quat(self.rotation).as_rotvec()
        rho = np.linalg.solve(_left_jacobian(phi), self.translation)
        return np.concatenate([rho, phi])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self._R.T + self.translation

    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self._R.T @ self.translation

    def scaled(self, s: float) -> Pose:
        return Pose(self.rotation, self.translation * s)

    def __repr__(self) -> str:
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(q={q}, t={t})"


def retract(pose: Pose, delta: np.ndarray) -> Pose:
    return pose @ Pose.exp(delta)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(s, c))


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle, translation norm) of ``a^-1 b``."""
    d = a.inverse() @ b
    return rotation_angle(d.R), float(np.linalg.norm(d.translation))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def downscaled(self, factor: float = 4.0) -> Intrinsics:
        return Intrinsics(self.fx / factor, self.fy / factor, self.cx / factor, self.cy / factor)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera at feature-map resolution."""

    intrinsics: Intrinsics
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("feature map dimensions must be positive")

    @classmethod
    def from_image(cls, intrinsics: Intrinsics, image_width: int, image_height: int) -> CameraModel:
        """Camera for the quarter-resolution feature maps of a full-size image."""
        return cls(intrinsics.downscaled(4.0), image_width // 4, image_height // 4)

    def in_bounds(self, xy: np.ndarray) -> np.ndarray:
        x, y = xy[..., 0], xy[..., 1]
        return (x >= 0) & (x <= self.width - 1) & (y >= 0) & (y <= self.height - 1)


@dataclass(frozen=True, eq=False)
class Patch:
    """A ``p x p`` block of feature-map pixels anchored to a source frame.

    ``coords`` holds ``p*p`` rows of ``(x, y)`` in row-major patch order and
    ``inv_depth`` one positive inverse depth per pixel. ``anchor`` is the
    pixel the patch was selected at; it is the footprint centre unless the
    footprint had to be shifted inward at the map border.
    """

    frame_id: int
    patch_id: int
    coords: np.ndarray
    inv_depth: np.ndarray
    anchor: tuple[int, int] | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        inv_depth = np.broadcast_to(np.asarray(self.inv_depth, dtype=float), coords.shape[:1]).copy()
        p = int(round(np.sqrt(len(coords))))
        if p * p != len(coords) or p % 2 == 0:
            raise ValueError(f"patch must hold p*p pixels with odd p, got {len(coords)}")
        if np.any(~(inv_depth > 0)):
            raise ValueError("patch inverse depths must be strictly positive")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "inv_depth", inv_depth)
        if self.anchor is None:
            c = coords[len(coords) // 2]
            object.__setattr__(self, "anchor", (int(round(c[0])), int(round(c[1]))))

    @property
    def size(self) -> int:
        return int(round(np.sqrt(len(self.coords))))

    @property
    def center(self) -> np.ndarray:
        return self.coords[len(self.coords) // 2]

    def with_inv_depth(self, d) -> Patch:
        return Patch(self.frame_id, self.patch_id, self.coords, d, self.anchor)


def patch_grid(center_xy, p: int, width: int | None = None, height: int | None = None) -> np.ndarray:
    """``(p*p, 2)`` integer lattice around ``center_xy``, row-major.

    With map dimensions given, the footprint is shifted inward so every
    pixel stays inside the map.
    """
    cx, cy = int(round(center_xy[0])), int(round(center_xy[1]))
    h = p // 2
    if width is not None:
        cx = min(max(cx, h), width - 1 - h)
    if height is not None:
        cy = min(max(cy, h), height - 1 - h)
    offs = np.arange(-h, h + 1)
    yy, xx = np.meshgrid(cy + offs, cx + offs, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=-1).astype(float)


def make_patch(frame_id: int, patch_id: int, anchor_xy, inv_depth: float, cam: CameraModel, p: int = 3) -> Patch:
    coords = patch_grid(anchor_xy, p, cam.width, cam.height)
    return Patch(frame_id, patch_id, coords, inv_depth, (int(anchor_xy[0]), int(anchor_xy[1])))


# ---------------------------------------------------------------------------
# Batched reprojection. Leading dimensions broadcast between arguments.


def _lift(coords: np.ndarray, intr: Intrinsics) -> np.ndarray:
    x = (coords[..., 0] - intr.cx) / intr.fx
    y = (coords[..., 1] - intr.cy) / intr.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


# Small fixed-size products are written out per component: with many patch
# pixels sharing one rotation this is much faster than broadcast einsum.


def _matvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``M @ v`` for ``M (..., 3, 3)`` and ``v (..., 3)`` with broadcasting."""
    return np.stack([M[..., i, 0] * v[..., 0] + M[..., i, 1] * v[..., 1] + M[..., i, 2] * v[..., 2] for i in range(3)], -1)


def relative_transform(R_src, t_src, R_tgt, t_tgt):
    """``T_tgt T_src^-1`` as ``(R_rel, t_rel)``."""
    R_rel = np.matmul(R_tgt, np.swapaxes(R_src, -1, -2))
    return R_rel, t_tgt - _matvec(R_rel, t_src)


def transform_points(coords, inv_depth, R_src, t_src, R_tgt, t_tgt, intr: Intrinsics):
    """Carry lifted patch pixels from the source camera into the target camera.

    Returns the first three homogeneous components in the target frame,
    scaled by the pixel's inverse depth, so ``X / X[..., 2]`` is the
    projective ray: ``X = R_rel ray + t_rel d`` with ``T_rel = T_tgt T_src^-1``.
    """
    R_rel, t_rel = relative_transform(np.asarray(R_src), np.asarray(t_src), np.asarray(R_tgt), np.asarray(t_tgt))
    ray = _lift(np.asarray(coords, dtype=float), intr)
    return _matvec(R_rel, ray) + t_rel * np.asarray(inv_depth)[..., None]


def project(X: np.ndarray, intr: Intrinsics) -> np.ndarray:
    z = X[..., 2]
    return np.stack([intr.fx * X[..., 0] / z + intr.cx, intr.fy * X[..., 1] / z + intr.cy], axis=-1)


def reproject_batch(coords, inv_depth, R_src, t_src, R_tgt, t_tgt, cam: CameraModel):
    """Vectorised :func:`reproject`; returns ``(uv, valid)``."""
    X = transform_points(coords, inv_depth, R_src, t_src, R_tgt, t_tgt, cam.intrinsics)
    z = X[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = project(X, cam.intrinsics)
    valid = (z > 0) & cam.in_bounds(uv) & np.isfinite(uv).all(axis=-1)
    return uv, valid


def jacobian_parts(coords, inv_depth, R_src, t_src, R_tgt, t_tgt, intr: Intrinsics):
    """Reprojection derivatives before the final rotation by ``R_tgt``.

    Returns ``(uv, Jc, J_depth)`` where ``Jc`` has shape ``(..., 2, 6)`` and
    ``J_tgt = Jc @ blockdiag(R_tgt, R_tgt)``. Keeping the rotation out lets
    callers sum per-pixel products first and rotate once per edge.
    """
    R_src, t_src, R_tgt, t_tgt = (np.asarray(a, dtype=float) for a in (R_src, t_src, R_tgt, t_tgt))
    R_rel, t_rel = relative_transform(R_src, t_src, R_tgt, t_tgt)
    d = np.asarray(inv_depth, dtype=float)
    X = _matvec(R_rel, _lift(np.asarray(coords, dtype=float), intr)) + t_rel * d[..., None]
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    zi = 1.0 / z
    uv = np.stack([intr.fx * x * zi + intr.cx, intr.fy * y * zi + intr.cy], axis=-1)

    # Perturbing T_tgt exp(delta) moves X by R_tgt (d rho + phi x Y) where Y
    # is the world point; with W = R_tgt Y = X - t_tgt d this is
    # d R_tgt rho - [W]x R_tgt phi. Rows of the projection derivative are
    # bx = (fx/z, 0, -fx x/z^2) and by = (0, fy/z, -fy y/z^2); b^T [W]x = (b x W)^T.
    W = X - np.asarray(t_tgt) * d[..., None]
    w0, w1, w2 = W[..., 0], W[..., 1], W[..., 2]
    ax, cx = intr.fx * zi, -intr.fx * x * zi * zi
    ay, cy = intr.fy * zi, -intr.fy * y * zi * zi
    d = np.broadcast_to(d, z.shape)
    Jc = np.zeros(z.shape + (2, 6))
    Jc[..., 0, 0] = d * ax
    Jc[..., 0, 2] = d * cx
    Jc[..., 1, 1] = d * ay
    Jc[..., 1, 2] = d * cy
    # -(bx x W) and -(by x W)
    Jc[..., 0, 3] = cx * w1
    Jc[..., 0, 4] = ax * w2 - cx * w0
    Jc[..., 0, 5] = -ax * w1
    Jc[..., 1, 3] = -(ay * w2 - cy * w1)
    Jc[..., 1, 4] = -cy * w0
    Jc[..., 1, 5] = ay * w0
    tr0, tr1, tr2 = t_rel[..., 0], t_rel[..., 1], t_rel[..., 2]
    J_depth = np.stack([ax * tr0 + cx * tr2, ay * tr1 + cy * tr2], axis=-1)
    return uv, Jc, J_depth


def reproject_jacobian_batch(coords, inv_depth, R_src, t_src, R_tgt, t_tgt, intr: Intrinsics):
    """Analytic derivatives of projected pixels.

    Returns ``(uv, J_tgt, J_src, J_depth)`` with shapes ``(..., 2)``,
    ``(..., 2, 6)``, ``(..., 2, 6)`` and ``(..., 2)``. The depth column is
    the derivative with respect to the pixel's own inverse depth.
    """
    uv, Jc, J_depth = jacobian_parts(coords, inv_depth, R_src, t_src, R_tgt, t_tgt, intr)
    R = np.asarray(R_tgt, dtype=float)
    J_tgt = np.concatenate([Jc[..., :3] @ R, Jc[..., 3:] @ R], axis=-1)
    # (T_src exp(delta))^-1 = exp(-delta) T_src^-1: same block, opposite sign.
    return uv, J_tgt, -J_tgt, J_depth


def reproject(patch: Patch, source_pose: Pose, target_pose: Pose, cam: CameraModel):
    """Project every pixel of ``patch`` into the target camera.

    Computes ``K T_target T_source^-1 K^-1 P`` per pixel. Returns the
    ``(p*p, 2)`` projected coordinates and a boolean validity flag which is
    false where the point lands behind the target camera or outside the map.
    """
    return reproject_batch(
        patch.coords,
        patch.inv_depth,
        source_pose.R,
        source_pose.t,
        target_pose.R,
        target_pose.t,
        cam,
    )


def reproject_jacobian(patch: Patch, source_pose: Pose, target_pose: Pose, cam: CameraModel):
    """Jacobian blocks of the projected patch.

    Rows are interleaved ``x0, y0, x1, y1, ...``. Returns
    ``(J_target (2p^2, 6), J_source (2p^2, 6), J_depth (2p^2, 1))`` where the
    depth column perturbs every pixel's inverse depth by the same amount,
    i.e. the shared patch inverse depth.
    """
    _, valid = reproject(patch, source_pose, target_pose, cam)
    if not valid.all():
        raise ValueError(f"patch ({patch.frame_id}, {patch.patch_id}) has invalid projections")
    _, Jt, Js, Jd = reproject_jacobian_batch(
        patch.coords,
        patch.inv_depth,
        source_pose.R,
        source_pose.t,
        target_pose.R,
        target_pose.t,
        cam.intrinsics,
    )
    n = len(patch.coords)
    return Jt.reshape(2 * n, 6), Js.reshape(2 * n, 6), Jd.reshape(2 * n, 1)


def stack_poses(poses) -> tuple[np.ndarray, np.ndarray]:
    """``(F, 3, 3)`` rotations and ``(F, 3)`` translations of a pose list."""
    return np.stack([p.R for p in poses]), np.stack([p.t for p in poses])
