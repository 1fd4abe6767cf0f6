"""Bipartite patch-frame graph and the correlation lookup.

The graph is stored column-wise: one array per attribute, indexed by patch
or by edge, so refreshes and the solver can work on whole edge sets at once.
:meth:`PatchGraph.edge` and :meth:`PatchGraph.patch` give record views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, Patch, reproject_batch, stack_poses

CORR_RADIUS = 3
CORR_SIZE = 2 * CORR_RADIUS + 1


@dataclass(frozen=True, eq=False)
class Edge:
    patch_ref: tuple[int, int]
    target_frame: int
    projected_coords: np.ndarray
    correlation: np.ndarray
    flow_correction: np.ndarray
    posterior_weight: float
    valid: bool


class _Columns:
    """Append-only set of equally long arrays with amortised growth."""

    def __init__(self, specs: dict):
        self._specs = specs
        self._n = 0
        self._data = {k: np.zeros((0, *shape), dtype=dt) for k, (shape, dt) in specs.items()}

    def __len__(self) -> int:
        return self._n

    def __getitem__(self, key) -> np.ndarray:
        return self._data[key][: self._n]

    def append(self, **cols) -> np.ndarray:
        k = len(next(iter(cols.values())))
        need = self._n + k
        cap = len(next(iter(self._data.values())))
        if need > cap:
            new_cap = max(need, 2 * cap, 64)
            for name, arr in self._data.items():
                grown = np.zeros((new_cap, *arr.shape[1:]), dtype=arr.dtype)
                grown[: self._n] = arr[: self._n]
                self._data[name] = grown
        for name, arr in self._data.items():
            if name in cols:
                arr[self._n : need] = cols[name]
        idx = np.arange(self._n, need)
        self._n = need
        return idx


class PatchGraph:
    """Patches connected to every frame within ``radius`` of their source frame.

    Self-edges (target equals source) are kept; they feed distillation targets
    and are skipped by the solver.
    """

    def __init__(self, radius: int = 10, patch_size: int = 3, channels: int = 0):
        if radius < 1:
            raise ValueError("radius must be >= 1")
        self.radius = int(radius)
        self.patch_size = int(patch_size)
        self.channels = int(channels)
        self.frame_count = 0
        npix = patch_size * patch_size
        self._patches = _Columns(
            {
                "frame": ((), np.int64),
                "pid": ((), np.int64),
                "coords": ((npix, 2), float),
                "inv_depth": ((npix,), float),
                "anchor": ((2,), np.int64),
                "features": ((npix, self.channels), np.float32),
                "upto": ((), np.int64),
            }
        )
        self._edges = _Columns(
            {
                "patch": ((), np.int64),
                "target": ((), np.int64),
                "coords": ((npix, 2), float),
                "pixel_valid": ((npix,), bool),
                "valid": ((), bool),
                "flow": ((npix, 2), float),
                "weight": ((), float),
                "corr": ((patch_size, patch_size, CORR_SIZE, CORR_SIZE), np.float32),
            }
        )

    # -- column views ---------------------------------------------------------
    @property
    def num_patches(self) -> int:
        return len(self._patches)

    @property
    def num_edges(self) -> int:
        return len(self._edges)

    @property
    def frames(self) -> list[int]:
        return list(range(self.frame_count))

    patch_frame = property(lambda self: self._patches["frame"])
    patch_id = property(lambda self: self._patches["pid"])
    patch_coords = property(lambda self: self._patches["coords"])
    patch_inv_depth = property(lambda self: self._patches["inv_depth"])
    patch_anchor = property(lambda self: self._patches["anchor"])
    patch_features = property(lambda self: self._patches["features"])
    edge_patch = property(lambda self: self._edges["patch"])
    edge_target = property(lambda self: self._edges["target"])
    edge_coords = property(lambda self: self._edges["coords"])
    edge_pixel_valid = property(lambda self: self._edges["pixel_valid"])
    edge_valid = property(lambda self: self._edges["valid"])
    edge_flow = property(lambda self: self._edges["flow"])
    edge_weight = property(lambda self: self._edges["weight"])
    edge_corr = property(lambda self: self._edges["corr"])

    @property
    def edge_source(self) -> np.ndarray:
        return self.patch_frame[self.edge_patch]

    # -- records --------------------------------------------------------------
    def patch(self, k: int) -> Patch:
        return Patch(
            int(self.patch_frame[k]),
            int(self.patch_id[k]),
            self.patch_coords[k].copy(),
            self.patch_inv_depth[k].copy(),
            tuple(int(a) for a in self.patch_anchor[k]),
        )

    def patches(self) -> list[Patch]:
        return [self.patch(k) for k in range(self.num_patches)]

    def edge(self, k: int) -> Edge:
        pk = int(self.edge_patch[k])
        return Edge(
            (int(self.patch_frame[pk]), int(self.patch_id[pk])),
            int(self.edge_target[k]),
            self.edge_coords[k].copy(),
            self.edge_corr[k].copy(),
            self.edge_flow[k].copy(),
            float(self.edge_weight[k]),
            bool(self.edge_valid[k]),
        )

    def edges(self) -> list[Edge]:
        return [self.edge(k) for k in range(self.num_edges)]

    # -- construction ---------------------------------------------------------
    def add_patches(self, patches, features: np.ndarray | None = None) -> np.ndarray:
        """Append patches; ``features`` are their ``(n, p*p, C)`` matching features."""
        patches = list(patches)
        if not patches:
            return np.zeros(0, dtype=np.int64)
        for p in patches:
            if p.size != self.patch_size:
                raise ValueError(f"patch size {p.size} does not match graph patch size {self.patch_size}")
        cols = dict(
            frame=[p.frame_id for p in patches],
            pid=[p.patch_id for p in patches],
            coords=np.stack([p.coords for p in patches]),
            inv_depth=np.stack([p.inv_depth for p in patches]),
            anchor=[p.anchor for p in patches],
        )
        if features is not None and self.channels:
            cols["features"] = features
        return self._patches.append(**cols)

    def connect(self, frame_count: int) -> np.ndarray:
        """Add every missing edge within the radius; returns the new edge indices."""
        self.frame_count = max(self.frame_count, int(frame_count))
        F, r = self.frame_count, self.radius
        src = self.patch_frame
        # Every earlier connect() added all edges to frames below its frame
        # count, so only targets from that count onward can be missing.
        lo = np.maximum(np.maximum(src - r, 0), self._patches["upto"])
        hi = np.minimum(src + r, F - 1)
        counts = np.maximum(hi - lo + 1, 0)
        pk = np.repeat(np.arange(len(src)), counts)
        offset = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        tgt = np.repeat(lo, counts) + offset
        self._patches._data["upto"][: len(src)] = F
        return self._edges.append(patch=pk, target=tgt)

    def extend(self, patches, frame_count: int, features: np.ndarray | None = None) -> np.ndarray:
        """Add new patches and grow the edge set to ``frame_count`` frames."""
        self.add_patches(patches, features)
        return self.connect(frame_count)

    def set_inv_depth(self, patch_idx: np.ndarray, values: np.ndarray) -> None:
        self._patches._data["inv_depth"][patch_idx] = np.asarray(values, dtype=float)[:, None]

    def write_edges(self, idx, **cols) -> None:
        n = len(self._edges)
        for name, val in cols.items():
            self._edges._data[name][:n][idx] = val

    def copy(self) -> PatchGraph:
        g = PatchGraph(self.radius, self.patch_size, self.channels)
        g.frame_count = self.frame_count
        for src, dst in ((self._patches, g._patches), (self._edges, g._edges)):
            dst._n = src._n
            dst._data = {k: v[: src._n].copy() for k, v in src._data.items()}
        return g


def build_graph(patches_per_frame, frame_count: int, r: int = 10, features=None) -> PatchGraph:
    """Graph over per-frame patch lists, connecting each patch to frames within ``r``."""
    patches_per_frame = [list(ps) for ps in patches_per_frame]
    size = next((p.size for ps in patches_per_frame for p in ps), 3)
    channels = 0 if features is None else features[0].shape[-1]
    g = PatchGraph(r, size, channels)
    for k, ps in enumerate(patches_per_frame):
        g.add_patches(ps, None if features is None else features[k])
    g.connect(frame_count)
    return g


def expected_edge_count(source_frames, frame_count: int, r: int) -> int:
    src = np.asarray(source_frames)
    return int(np.sum(np.minimum(src + r, frame_count - 1) - np.maximum(src - r, 0) + 1))


# --- correlation -------------------------------------------------------------


def correlate_batch(patch_features: np.ndarray, feature_map: np.ndarray, coords: np.ndarray, chunk: int = 256):
    """Correlation volumes of many patches against one target feature map.

    ``patch_features`` is ``(n, p*p, C)``, ``coords`` ``(n, p*p, 2)``. Entry
    ``[e, u, v, a, b]`` is the inner product of patch pixel ``(u, v)`` with the
    bilinearly interpolated target feature at its projection displaced by
    ``(b - 3, a - 3)`` in ``(x, y)``. Lookups outside the map read zeros.
    """
    n, npix, C = patch_features.shape
    if feature_map.shape[-1] != C:
        raise ValueError(f"channel mismatch: patch {C} vs map {feature_map.shape[-1]}")
    p = int(round(np.sqrt(npix)))
    H, W = feature_map.shape[:2]
    pad = CORR_SIZE + 1
    fmap = np.zeros((H + 2 * pad, W + 2 * pad, C), dtype=np.float32)
    fmap[pad : pad + H, pad : pad + W] = feature_map
    out = np.zeros((n, p, p, CORR_SIZE, CORR_SIZE), dtype=np.float32)

    xy = np.nan_to_num(np.asarray(coords, dtype=float), nan=-1e6, posinf=1e6, neginf=-1e6)
    x0 = np.floor(xy[..., 0])
    y0 = np.floor(xy[..., 1])
    fx = (xy[..., 0] - x0).astype(np.float32)
    fy = (xy[..., 1] - y0).astype(np.float32)
    # Blocks far outside the map are moved to an all-zero pad position.
    lo = -(CORR_RADIUS + 2)
    x0 = np.clip(x0, lo, W + CORR_RADIUS).astype(np.int64)
    y0 = np.clip(y0, lo, H + CORR_RADIUS).astype(np.int64)
    offs = np.arange(-CORR_RADIUS, CORR_RADIUS + 2)
    for s in range(0, n, chunk):
        e = slice(s, min(s + chunk, n))
        g = patch_features[e].astype(np.float32)
        yi = y0[e][..., None, None] + offs[:, None] + pad
        xi = x0[e][..., None, None] + offs[None, :] + pad
        block = fmap[yi, xi]  # (m, npix, 8, 8, C)
        dots = np.einsum("mkc,mkabc->mkab", g, block, optimize=True)
        ax = fx[e][..., None, None]
        ay = fy[e][..., None, None]
        corr = (
            (1 - ay) * (1 - ax) * dots[..., :-1, :-1]
            + (1 - ay) * ax * dots[..., :-1, 1:]
            + ay * (1 - ax) * dots[..., 1:, :-1]
            + ay * ax * dots[..., 1:, 1:]
        )
        out[e] = corr.reshape(-1, p, p, CORR_SIZE, CORR_SIZE)
    return out


def correlate(patch_features: np.ndarray, target_feature_map: np.ndarray, projected_coords: np.ndarray) -> np.ndarray:
    """``(p, p, 7, 7)`` correlation volume of one patch; see :func:`correlate_batch`."""
    return correlate_batch(
        np.asarray(patch_features)[None], np.asarray(target_feature_map), np.asarray(projected_coords)[None]
    )[0]


# --- refresh -----------------------------------------------------------------


def _pose_arrays(poses, frames: np.ndarray):
    frames = np.asarray(frames)
    try:
        needed = [poses[int(f)] for f in np.unique(frames)]
    except (KeyError, IndexError):
        raise KeyError("missing pose estimate for a frame referenced by the graph") from None
    if any(p is None for p in needed):
        raise KeyError("missing pose estimate for a frame referenced by the graph")
    F = int(frames.max()) + 1 if len(frames) else 0
    plist = [poses[f] if f in set(np.unique(frames).tolist()) else needed[0] for f in range(F)]
    return stack_poses(plist)


def update_edges(
    graph: PatchGraph,
    poses,
    cam: CameraModel,
    oracle,
    feature_maps=None,
    edges: np.ndarray | None = None,
) -> PatchGraph:
    """Refresh projections, correlations and oracle outputs of ``edges`` (default all).

    ``poses`` maps frame id to the current :class:`Pose`. ``oracle`` is called
    as ``oracle(graph, edge_idx, projected)`` and returns ``(flow, weight)``.
    ``feature_maps(frame_id)`` supplies target matching features; without it
    correlations are left untouched. Edges with any invalid pixel get
    ``valid = False`` and weight 0.
    """
    idx = np.arange(graph.num_edges) if edges is None else np.asarray(edges, dtype=np.int64)
    if len(idx) == 0:
        return graph
    pk = graph.edge_patch[idx]
    src = graph.patch_frame[pk]
    tgt = graph.edge_target[idx]
    Rs, ts = _pose_arrays(poses, np.concatenate([src, tgt]))
    uv, pix_ok = reproject_batch(
        graph.patch_coords[pk],
        graph.patch_inv_depth[pk],
        Rs[src][:, None],
        ts[src][:, None],
        Rs[tgt][:, None],
        ts[tgt][:, None],
        cam,
    )
    valid = pix_ok.all(axis=1)
    flow, weight = oracle(graph, idx, uv)
    weight = np.where(valid, weight, 0.0)
    graph.write_edges(idx, coords=uv, pixel_valid=pix_ok, valid=valid, flow=flow, weight=weight)
    if feature_maps is not None and graph.channels:
        for f in np.unique(tgt):
            sel = tgt == f
            corr = correlate_batch(graph.patch_features[pk[sel]], feature_maps(int(f)), uv[sel])
            graph.write_edges(idx[sel], corr=corr)
    return graph


# --- snapshots ---------------------------------------------------------------


def format_graph(graph: PatchGraph) -> str:
    """One edge per line: ``j l i weight valid``."""
    pk = graph.edge_patch
    rows = zip(graph.patch_frame[pk], graph.patch_id[pk], graph.edge_target, graph.edge_weight, graph.edge_valid)
    return "".join(f"{j} {l} {i} {w:.6f} {int(v)}\n" for j, l, i, w, v in rows)


def parse_graph(text: str) -> list[tuple[int, int, int, float, bool]]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        f = line.split()
        if len(f) != 5:
            raise ValueError(f"line {lineno}: expected 'j l i weight valid'")
        out.append((int(f[0]), int(f[1]), int(f[2]), float(f[3]), bool(int(f[4]))))
    return out
