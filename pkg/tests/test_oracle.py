import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from patchvo.geometry import Pose, make_patch, reproject
from patchvo.oracle import (
    SceneConfig,
    SceneOracle,
    format_landmarks,
    generate_scene,
    oracle_edge,
    read_landmarks,
    render_frame,
    write_scene,
)


def _brute_force_visible(scene, k):
    pose = scene.poses[k]
    intr = scene.cam.intrinsics
    count = 0
    for X in scene.landmarks:
        x, y, z = pose.R @ X + pose.t
        if z <= 0:
            continue
        u, v = intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy
        if 0 <= u <= scene.cam.width - 1 and 0 <= v <= scene.cam.height - 1:
            count += 1
    return count


class TestGenerate:
    def test_deterministic(self):
        cfg = SceneConfig(landmarks=500, frames=12, seed=11)
        a, b = generate_scene(cfg), generate_scene(cfg)
        assert format_landmarks(a) == format_landmarks(b)
        assert_array_equal(render_frame(a, 5).matching_features, render_frame(b, 5).matching_features)

    def test_seed_changes_scene(self):
        a = generate_scene(SceneConfig(landmarks=500, frames=12, seed=1))
        b = generate_scene(SceneConfig(landmarks=500, frames=12, seed=2))
        assert not np.allclose(a.landmarks, b.landmarks)

    def test_visible_counts_match_brute_force(self):
        scene = generate_scene(SceneConfig(landmarks=100, frames=20, seed=7))
        expected = [_brute_force_visible(scene, k) for k in range(20)]
        assert_array_equal(scene.visible_counts(), expected)
        assert min(expected) >= 50

    def test_circle_translation_norm(self):
        scene = generate_scene(SceneConfig(trajectory="circle", radius=10.0, landmarks=1000, frames=20))
        for p in scene.poses:
            assert abs(np.linalg.norm(p.translation) - 10.0) < 1e-9

    def test_random_walk_bounded_turn_rate(self):
        cfg = SceneConfig(trajectory="random_walk", landmarks=1000, frames=30, max_angular_velocity=0.03)
        scene = generate_scene(cfg)
        for a, b in zip(scene.poses, scene.poses[1:]):
            rel = b @ a.inverse()
            assert np.degrees(np.arccos(np.clip((np.trace(rel.R) - 1) / 2, -1, 1))) <= np.degrees(0.03) + 1e-9

    def test_too_few_visible_rejected(self):
        with pytest.raises(ValueError, match="observes only"):
            generate_scene(SceneConfig(landmarks=100, frames=200, step=1.0))

    @pytest.mark.parametrize("bad", [dict(landmarks=99), dict(frames=11), dict(texture="stripes"), dict(flow_noise=-1)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            SceneConfig(**bad)


class TestRender:
    def test_maps_share_shape_and_ranges(self, small_scene):
        b = render_frame(small_scene, 3)
        H, W = small_scene.cam.height, small_scene.cam.width
        assert b.inv_depth_map.shape == b.prior_weight_map.shape == (H, W)
        assert b.matching_features.shape[:2] == (H, W)
        assert b.inv_depth_map.min() >= 0
        assert 0 <= b.prior_weight_map.min() and b.prior_weight_map.max() <= 1

    def test_empty_pixels(self, small_scene):
        b = render_frame(small_scene, 0)
        empty = b.landmark_ids < 0
        assert empty.any()
        assert (b.inv_depth_map[empty] == 0).all() and (b.prior_weight_map[empty] == 0).all()

    def test_unit_texture_gives_unit_prior(self):
        scene = generate_scene(SceneConfig(landmarks=500, frames=12, texture="constant", texture_high=1.0))
        b = render_frame(scene, 0)
        assert_array_equal(b.prior_weight_map[b.landmark_ids >= 0], 1.0)

    def test_backprojection_consistency(self, small_scene):
        b = render_frame(small_scene, 4)
        pose = small_scene.poses[4]
        intr = small_scene.cam.intrinsics
        rows, cols = np.nonzero(b.landmark_ids >= 0)
        for r, c in list(zip(rows, cols))[::50]:
            X = pose.R @ small_scene.landmarks[b.landmark_ids[r, c]] + pose.t
            assert abs(1 / X[2] - b.inv_depth_map[r, c]) < 1e-12
            u, v = intr.fx * X[0] / X[2] + intr.cx, intr.fy * X[1] / X[2] + intr.cy
            assert abs(u - c) <= 0.5 and abs(v - r) <= 0.5

    def test_true_correspondence_has_best_feature_match(self, small_scene, rng):
        b0, b1 = render_frame(small_scene, 0), render_frame(small_scene, 1)
        shared = np.intersect1d(b0.landmark_ids[b0.landmark_ids >= 0], b1.landmark_ids[b1.landmark_ids >= 0])
        H, W = b1.landmark_ids.shape
        for lid in rng.choice(shared, 50, replace=False):
            p0 = np.argwhere(b0.landmark_ids == lid)[0]
            p1 = np.argwhere(b1.landmark_ids == lid)[0]
            g = b0.matching_features[p0[0], p0[1]]
            best = g @ b1.matching_features[p1[0], p1[1]]
            others = np.stack([rng.integers(0, H, 100), rng.integers(0, W, 100)], axis=1)
            others = others[b1.landmark_ids[others[:, 0], others[:, 1]] != lid]
            assert (b1.matching_features[others[:, 0], others[:, 1]] @ g < best).all()

    def test_bundle_is_read_only(self, small_scene):
        b = render_frame(small_scene, 0)
        with pytest.raises(ValueError):
            b.inv_depth_map[0, 0] = 1.0

    def test_frame_out_of_range(self, small_scene):
        with pytest.raises(IndexError):
            render_frame(small_scene, small_scene.num_frames)


def _anchored_patch(scene, frame, k=0, margin=10):
    b = render_frame(scene, frame)
    rows, cols = np.nonzero(b.landmark_ids >= 0)
    inner = (cols > margin) & (cols < scene.cam.width - margin) & (rows > margin) & (rows < scene.cam.height - margin)
    r, c = rows[inner][k], cols[inner][k]
    return make_patch(frame, k, (c, r), b.inv_depth_map[r, c], scene.cam)


class TestOracle:
    def test_zero_correction_at_truth(self, small_scene):
        p = _anchored_patch(small_scene, 2)
        uv, _ = reproject(p, small_scene.poses[2], small_scene.poses[3], small_scene.cam)
        out = oracle_edge(small_scene, p, 3, uv)
        assert_allclose(out.flow_correction, 0.0, atol=1e-9)
        assert 0 <= out.posterior_weight <= 1

    def test_perturbed_target_matches_analytic_difference(self, small_scene):
        p = _anchored_patch(small_scene, 2, k=5)
        gt, _ = reproject(p, small_scene.poses[2], small_scene.poses[3], small_scene.cam)
        bumped = Pose.from_rt(small_scene.poses[3].R, small_scene.poses[3].t + [0.1, 0, 0])
        uv, _ = reproject(p, small_scene.poses[2], bumped, small_scene.cam)
        out = oracle_edge(small_scene, p, 3, uv)
        assert_allclose(out.flow_correction, gt - uv, atol=1e-9)

    def test_out_of_view_has_zero_weight(self, small_scene):
        # Line trajectory moves along +x; a pixel on the far left leaves the view.
        b = render_frame(small_scene, 0)
        rows, cols = np.nonzero(b.landmark_ids >= 0)
        k = np.argmin(cols)
        p = make_patch(0, 0, (cols[k], rows[k]), b.inv_depth_map[rows[k], cols[k]], small_scene.cam)
        uv, valid = reproject(p, small_scene.poses[0], small_scene.poses[13], small_scene.cam)
        assert not valid.all()
        assert oracle_edge(small_scene, p, 13, uv).posterior_weight == 0.0

    def test_unit_texture_visible_landmark_weight_one(self):
        scene = generate_scene(SceneConfig(landmarks=800, frames=12, texture="constant", texture_high=1.0))
        oracle = SceneOracle(scene)
        p = _anchored_patch(scene, 5, margin=30)
        lid = render_frame(scene, 5).landmark_ids[p.anchor[1], p.anchor[0]]
        for i in range(12):
            uv, valid = reproject(p, scene.poses[5], scene.poses[i], scene.cam)
            flow, w = oracle.query([5], [p.patch_id], [i], p.coords[None], np.array([p.anchor]), uv[None])
            if valid.all() and scene.unoccluded(i)[lid]:
                assert w[0] == 1.0

    def test_noise_is_reproducible_and_scaled(self, small_scene):
        p = _anchored_patch(small_scene, 1)
        uv, _ = reproject(p, small_scene.poses[1], small_scene.poses[2], small_scene.cam)
        a = oracle_edge(small_scene, p, 2, uv, noise=0.25, seed=9).flow_correction
        b = oracle_edge(small_scene, p, 2, uv, noise=0.25, seed=9).flow_correction
        c = oracle_edge(small_scene, p, 2, uv, noise=0.5, seed=9).flow_correction
        assert_array_equal(a, b)
        assert_allclose(c, 2 * a, rtol=1e-12)

    def test_noise_statistics(self):
        scene = generate_scene(SceneConfig(landmarks=800, frames=12, texture="constant", texture_high=1.0))
        oracle = SceneOracle(scene, noise=0.25, seed=1)
        samples = np.concatenate([oracle._noise(0, l, 1, 9) for l in range(2000)]).ravel()
        assert abs(samples.mean()) < 0.01
        assert abs(samples.std() - 1.0) < 0.01


class TestExport:
    def test_landmark_roundtrip(self, small_scene, tmp_path):
        path = tmp_path / "lm.txt"
        path.write_text(format_landmarks(small_scene))
        pts, tex = read_landmarks(path)
        assert_array_equal(pts, small_scene.landmarks)
        assert_array_equal(tex, small_scene.texture)

    def test_write_scene_deterministic(self, tmp_path):
        cfg = SceneConfig(landmarks=300, frames=12, seed=4)
        for name in ("a", "b"):
            write_scene(generate_scene(cfg), tmp_path / name)
        for f in sorted((tmp_path / "a").rglob("*")):
            if f.is_file():
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
