"""Deterministic synthetic scenes standing in for the learned front end.

A scene is a cloud of textured landmarks observed by a pinhole camera moving
along a ground-truth trajectory. Rendering a frame yields the four dense maps
the feature extractor would produce (inverse depth, prior weight, matching and
context features), and :class:`SceneOracle` plays the hidden-state updater by
returning, for every graph edge, a posterior weight and a flow correction
derived from ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import from_kv, read_kv, substream, to_kv
from .evaluation import Trajectory, write_trajectory
from .geometry import CameraModel, Intrinsics, Patch, Pose, reproject_batch, stack_poses

TRAJECTORY_SHAPES = ("line", "circle", "random_walk")
TEXTURE_MODES = ("random", "constant", "split")
MIN_VISIBLE = 50
_NOISE_BLOCK = 128


@dataclass(frozen=True)
class SceneConfig:
    landmarks: int = 3000
    frames: int = 50
    trajectory: str = "line"
    step: float = 0.1
    radius: float = 10.0
    angular_step: float = 0.02
    max_angular_velocity: float = 0.03
    image_width: int = 640
    image_height: int = 480
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 320.0
    cy: float = 240.0
    depth_min: float = 4.0
    depth_max: float = 20.0
    texture: str = "random"
    texture_low: float = 0.1
    texture_high: float = 0.9
    attenuation_distance: float = 1000.0
    flow_noise: float = 0.0
    channels: int = 32
    context_channels: int = 8
    frame_interval: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.landmarks < 100:
            raise ValueError("landmarks must be >= 100")
        if self.frames < 12:
            raise ValueError("frames must be >= 12")
        if self.trajectory not in TRAJECTORY_SHAPES:
            raise ValueError(f"trajectory must be one of {TRAJECTORY_SHAPES}, got {self.trajectory!r}")
        if self.texture not in TEXTURE_MODES:
            raise ValueError(f"texture must be one of {TEXTURE_MODES}, got {self.texture!r}")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("need 0 < depth_min < depth_max")
        if self.flow_noise < 0:
            raise ValueError("flow_noise must be nonnegative")
        for name in ("texture_low", "texture_high"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_file(cls, path, **overrides) -> SceneConfig:
        return from_kv(cls, read_kv(path), **overrides)

    def camera(self) -> CameraModel:
        return CameraModel.from_image(
            Intrinsics(self.fx, self.fy, self.cx, self.cy), self.image_width, self.image_height
        )


@dataclass(eq=False)
class FrameBundle:
    """Dense per-frame maps at feature resolution.

    ``inv_depth_map`` is 0 where no landmark projects; ``landmark_ids`` holds
    the splatted landmark per pixel or -1.
    """

    inv_depth_map: np.ndarray
    prior_weight_map: np.ndarray
    matching_features: np.ndarray
    context_features: np.ndarray
    landmark_ids: np.ndarray

    def __post_init__(self):
        shape = self.inv_depth_map.shape
        if not (
            self.prior_weight_map.shape == shape
            and self.matching_features.shape[:2] == shape
            and self.context_features.shape[:2] == shape
            and self.landmark_ids.shape == shape
        ):
            raise ValueError("frame maps must share width x height")
        if np.any(self.inv_depth_map < 0):
            raise ValueError("inverse depths must be nonnegative")
        if np.any((self.prior_weight_map < 0) | (self.prior_weight_map > 1)):
            raise ValueError("prior weights must lie in [0, 1]")
        for arr in (self.inv_depth_map, self.prior_weight_map, self.matching_features, self.landmark_ids):
            arr.flags.writeable = False


@dataclass(frozen=True)
class EdgeOracle:
    posterior_weight: float
    flow_correction: np.ndarray


@dataclass(eq=False)
class SyntheticScene:
    config: SceneConfig
    landmarks: np.ndarray
    texture: np.ndarray
    trajectory: Trajectory
    cam: CameraModel
    seed: int
    descriptors: np.ndarray
    _bundles: dict = field(default_factory=dict, repr=False)
    _visible: dict = field(default_factory=dict, repr=False)
    _background: np.ndarray | None = field(default=None, repr=False)

    @property
    def poses(self) -> list[Pose]:
        return self.trajectory.poses

    @property
    def num_frames(self) -> int:
        return len(self.trajectory)

    def scaled(self, s: float) -> SyntheticScene:
        """Same scene with every length multiplied by ``s``."""
        traj = Trajectory(self.trajectory.timestamps.copy(), [p.scaled(s) for p in self.poses])
        return SyntheticScene(
            self.config,
            self.landmarks * s,
            self.texture.copy(),
            traj,
            self.cam,
            self.seed,
            self.descriptors,
        )

    def visible_counts(self) -> np.ndarray:
        """Landmarks in front of and projecting inside each frame."""
        return np.array([self.observations(k)[2].sum() for k in range(self.num_frames)])

    def observations(self, frame: int):
        """``(uv, z, visible)`` of every landmark in ``frame``."""
        pose = self.poses[frame]
        X = self.landmarks @ pose.R.T + pose.t
        z = X[:, 2]
        intr = self.cam.intrinsics
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([intr.fx * X[:, 0] / z + intr.cx, intr.fy * X[:, 1] / z + intr.cy], axis=-1)
        visible = (z > 0) & self.cam.in_bounds(uv)
        return uv, z, visible

    def unoccluded(self, frame: int) -> np.ndarray:
        """Boolean mask of landmarks that won their pixel in ``frame``'s depth buffer."""
        if frame not in self._visible:
            ids = render_frame(self, frame).landmark_ids
            mask = np.zeros(len(self.landmarks), dtype=bool)
            mask[ids[ids >= 0]] = True
            self._visible[frame] = mask
        return self._visible[frame]


# --- generation --------------------------------------------------------------


def _camera_from_center(center: np.ndarray, forward: np.ndarray) -> Pose:
    f = forward / np.linalg.norm(forward)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, f)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    R_cw = np.stack([right, down, f], axis=1)
    R = R_cw.T
    return Pose.from_rt(R, -R @ center)


def _trajectory(cfg: SceneConfig, rng: np.random.Generator) -> list[Pose]:
    k = np.arange(cfg.frames)
    if cfg.trajectory == "line":
        return [Pose.from_rt(np.eye(3), -np.array([i * cfg.step, 0.0, 0.0])) for i in k]
    if cfg.trajectory == "circle":
        # Orbit of radius `radius` around the origin, looking at the centre.
        poses = []
        for theta in k * cfg.angular_step:
            c = cfg.radius * np.array([np.sin(theta), 0.0, -np.cos(theta)])
            poses.append(_camera_from_center(c, -c))
        return poses
    omega = rng.uniform(-cfg.max_angular_velocity, cfg.max_angular_velocity, size=cfg.frames)
    heading = np.concatenate([[0.0], np.cumsum(omega[1:])])
    poses, c = [], np.zeros(3)
    for i, h in enumerate(heading):
        fwd = np.array([np.sin(h), 0.0, np.cos(h)])
        if i:
            c = c + cfg.step * fwd
        poses.append(_camera_from_center(c, fwd))
    return poses


def generate_scene(config: SceneConfig) -> SyntheticScene:
    """Build a scene; landmarks are sampled inside the frusta of the frames."""
    cfg = config
    cam = cfg.camera()
    rng = substream(cfg.seed, "scene")
    poses = _trajectory(cfg, rng)

    n = cfg.landmarks
    owner = np.arange(n) % cfg.frames
    u = rng.uniform(0, cam.width - 1, n)
    v = rng.uniform(0, cam.height - 1, n)
    depth = rng.uniform(cfg.depth_min, cfg.depth_max, n)
    intr = cam.intrinsics
    X_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones(n)], axis=-1) * depth[:, None]
    Rs, ts = stack_poses(poses)
    landmarks = np.einsum("nji,nj->ni", Rs[owner], X_cam - ts[owner])

    if cfg.texture == "random":
        texture = rng.uniform(0.0, 1.0, n)
    elif cfg.texture == "constant":
        texture = np.full(n, cfg.texture_high)
    else:
        split = np.median(landmarks[:, 0])
        texture = np.where(landmarks[:, 0] < split, cfg.texture_low, cfg.texture_high)

    desc = substream(cfg.seed, "descriptors").standard_normal((n, cfg.channels))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)

    stamps = np.arange(cfg.frames) * cfg.frame_interval
    scene = SyntheticScene(cfg, landmarks, texture, Trajectory(stamps, poses), cam, cfg.seed, desc.astype(np.float32))
    counts = scene.visible_counts()
    if counts.min() < MIN_VISIBLE:
        bad = int(np.argmin(counts))
        raise ValueError(f"frame {bad} observes only {counts[bad]} landmarks (< {MIN_VISIBLE})")
    return scene


# --- rendering ---------------------------------------------------------------


def _background(cfg: SceneConfig, cam: CameraModel) -> np.ndarray:
    rng = substream(cfg.seed, "background")
    freq = rng.uniform(0.02, 0.15, size=(cfg.channels, 2)) * rng.choice([-1, 1], size=(cfg.channels, 2))
    phase = rng.uniform(0, 2 * np.pi, size=cfg.channels)
    yy, xx = np.mgrid[0 : cam.height, 0 : cam.width]
    arg = xx[..., None] * freq[:, 0] + yy[..., None] * freq[:, 1] + phase
    bg = np.cos(arg)
    bg /= np.linalg.norm(bg, axis=-1, keepdims=True)
    return bg.astype(np.float32)


def render_frame(scene: SyntheticScene, frame_id: int) -> FrameBundle:
    """Splat every visible landmark onto its nearest pixel.

    Each pixel keeps the closest landmark (lowest id on equal depth). The
    prior weight is the landmark's texture attenuated by distance; matching
    features are the landmark's unit descriptor, or a smooth unit background
    field on empty pixels.
    """
    if not 0 <= frame_id < scene.num_frames:
        raise IndexError(f"frame {frame_id} outside trajectory of {scene.num_frames} frames")
    if frame_id in scene._bundles:
        return scene._bundles[frame_id]
    cfg, cam = scene.config, scene.cam
    H, W = cam.height, cam.width
    uv, z, visible = scene.observations(frame_id)
    ids = np.flatnonzero(visible)
    col = np.floor(uv[ids, 0] + 0.5).astype(int)
    row = np.floor(uv[ids, 1] + 0.5).astype(int)
    pix = row * W + col
    order = np.lexsort((ids, z[ids], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    win_ids, win_pix = ids[win], pix[win]

    landmark_ids = np.full(H * W, -1, dtype=np.int64)
    landmark_ids[win_pix] = win_ids
    inv_depth = np.zeros(H * W)
    inv_depth[win_pix] = 1.0 / z[win_ids]
    atten = np.minimum(1.0, cfg.attenuation_distance / z[win_ids])
    prior = np.zeros(H * W)
    prior[win_pix] = np.clip(scene.texture[win_ids] * atten, 0.0, 1.0)

    if scene._background is None:
        scene._background = _background(cfg, cam)
    feats = scene._background.reshape(H * W, -1).copy()
    feats[win_pix] = scene.descriptors[win_ids]
    ctx_proj = substream(cfg.seed, "context").standard_normal((cfg.channels, cfg.context_channels))
    context = np.zeros((H * W, cfg.context_channels), dtype=np.float32)
    context[win_pix] = scene.descriptors[win_ids] @ ctx_proj.astype(np.float32)

    bundle = FrameBundle(
        inv_depth.reshape(H, W),
        prior.reshape(H, W),
        feats.reshape(H, W, -1),
        context.reshape(H, W, -1),
        landmark_ids.reshape(H, W),
    )
    scene._bundles[frame_id] = bundle
    return bundle


# --- hidden-state updater substitute ----------------------------------------


class SceneOracle:
    """Posterior weights and flow corrections from ground truth.

    For an edge (patch ``l`` of frame ``j``, target ``i``) the patch's true
    geometry is its pixel grid at the ground-truth inverse depth found at the
    anchor pixel. The flow correction is the true reprojection minus the
    current one plus seeded Gaussian noise of standard deviation
    ``noise / sqrt(texture)``; the noise is a pure function of
    ``(seed, j, l, i)`` so repeated refreshes are reproducible. The weight is
    the anchor landmark's texture, zeroed when the landmark is occluded in the
    target frame or any true pixel leaves the view.
    """

    def __init__(self, scene: SyntheticScene, noise: float | None = None, seed: int | None = None):
        self.scene = scene
        self.noise = scene.config.flow_noise if noise is None else float(noise)
        self.seed = scene.seed if seed is None else int(seed)
        self._noise_blocks: dict = {}
        Rs, ts = stack_poses(scene.poses)
        self._R, self._t = Rs, ts

    def truth(self, frame_ids, anchors):
        """Ground-truth inverse depth and landmark id at anchor pixels."""
        rows, cols = anchors[:, 1], anchors[:, 0]
        d = np.empty(len(frame_ids))
        lid = np.empty(len(frame_ids), dtype=np.int64)
        for f in np.unique(frame_ids):
            sel = frame_ids == f
            b = render_frame(self.scene, int(f))
            d[sel] = b.inv_depth_map[rows[sel], cols[sel]]
            lid[sel] = b.landmark_ids[rows[sel], cols[sel]]
        return d, lid

    def true_projection(self, coords, src, tgt, d_true):
        """``(uv, valid)`` of patch pixels under ground-truth poses."""
        return reproject_batch(
            coords,
            np.broadcast_to(d_true[:, None], coords.shape[:2]),
            self._R[src][:, None],
            self._t[src][:, None],
            self._R[tgt][:, None],
            self._t[tgt][:, None],
            self.scene.cam,
        )

    def _noise(self, j: int, l: int, i: int, npix: int) -> np.ndarray:
        key = (j, i, l // _NOISE_BLOCK, npix)
        block = self._noise_blocks.get(key)
        if block is None:
            rng = substream(self.seed, "noise", j, i, l // _NOISE_BLOCK, npix)
            block = rng.standard_normal((_NOISE_BLOCK, npix, 2))
            self._noise_blocks[key] = block
        return block[l % _NOISE_BLOCK]

    def query(self, src, patch_ids, tgt, coords, anchors, projected):
        """Batched oracle: arrays over edges; returns ``(flow, weight)``."""
        src = np.asarray(src, dtype=np.int64)
        tgt = np.asarray(tgt, dtype=np.int64)
        anchors = np.asarray(anchors, dtype=np.int64)
        n, npix = coords.shape[:2]
        flow = np.zeros((n, npix, 2))
        weight = np.zeros(n)
        if n == 0:
            return flow, weight
        d_true, lid = self.truth(src, anchors)
        has = d_true > 0
        if not has.any():
            return flow, weight
        idx = np.flatnonzero(has)
        uv, ok = self.true_projection(coords[idx], src[idx], tgt[idx], d_true[idx])
        flow[idx] = uv - projected[idx]
        seen = np.ones(len(idx), dtype=bool)
        for f in np.unique(tgt[idx]):
            sel = tgt[idx] == f
            seen[sel] = self.scene.unoccluded(int(f))[lid[idx][sel]]
        w = self.scene.texture[lid[idx]] * (ok.all(axis=1) & seen)
        weight[idx] = np.clip(w, 0.0, 1.0)
        if self.noise > 0:
            # Noise variance is inversely proportional to texture, so the
            # posterior weight is an inverse-variance weight.
            tex = self.scene.texture[lid[idx]]
            scale = self.noise / np.sqrt(np.where(tex > 0, tex, 1.0))
            for k, s in zip(idx, scale):
                flow[k] += s * self._noise(int(src[k]), int(patch_ids[k]), int(tgt[k]), npix)
        return flow, weight

    def __call__(self, graph, edges: np.ndarray, projected: np.ndarray):
        pk = graph.edge_patch[edges]
        return self.query(
            graph.patch_frame[pk],
            graph.patch_id[pk],
            graph.edge_target[edges],
            graph.patch_coords[pk],
            graph.patch_anchor[pk],
            projected,
        )


def oracle_edge(
    scene: SyntheticScene,
    patch: Patch,
    target_frame: int,
    projected: np.ndarray,
    noise: float = 0.0,
    seed: int | None = None,
) -> EdgeOracle:
    """Single-edge form of :class:`SceneOracle`.

    ``projected`` is the patch's reprojection under the current estimates.
    """
    oracle = SceneOracle(scene, noise=noise, seed=seed)
    flow, w = oracle.query(
        [patch.frame_id],
        [patch.patch_id],
        [target_frame],
        patch.coords[None],
        np.array([patch.anchor]),
        np.asarray(projected, dtype=float)[None],
    )
    return EdgeOracle(float(w[0]), flow[0])


# --- export ------------------------------------------------------------------


def format_landmarks(scene: SyntheticScene) -> str:
    """One landmark per line: ``id x y z texture``."""
    lines = [
        f"{i} {x!r} {y!r} {z!r} {t!r}"
        for i, ((x, y, z), t) in enumerate(zip(scene.landmarks.tolist(), scene.texture.tolist()))
    ]
    return "\n".join(lines) + "\n"


def read_landmarks(path) -> tuple[np.ndarray, np.ndarray]:
    pts, tex = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 5 or int(fields[0]) != len(pts):
            raise ValueError(f"{path}:{lineno}: expected 'id x y z texture' with sequential ids")
        pts.append([float(f) for f in fields[1:4]])
        tex.append(float(fields[4]))
    return np.array(pts), np.array(tex)


def write_scene(scene: SyntheticScene, out_dir, bundles: bool = True) -> list[Path]:
    """Write config, landmarks, ground truth and (optionally) frame maps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    cfg_path = out / "scene.cfg"
    cfg_path.write_text(to_kv(scene.config), encoding="utf-8")
    lm_path = out / "landmarks.txt"
    lm_path.write_text(format_landmarks(scene), encoding="utf-8")
    gt_path = out / "groundtruth.tum"
    write_trajectory(scene.trajectory, gt_path)
    written += [cfg_path, lm_path, gt_path]
    if bundles:
        frames = out / "frames"
        frames.mkdir(exist_ok=True)
        for k in range(scene.num_frames):
            b = render_frame(scene, k)
            for name in ("inv_depth_map", "prior_weight_map", "matching_features", "landmark_ids"):
                p = frames / f"{k:05d}_{name}.npy"
                np.save(p, getattr(b, name))
                written.append(p)
    return written

