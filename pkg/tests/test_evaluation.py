import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.spatial.transform import Rotation

from patchvo.evaluation import (
    DegenerateAlignmentError,
    LossWeights,
    Trajectory,
    TrajectoryFormatError,
    align_sim3,
    ate_rmse,
    auc_error,
    combined_loss,
    pose_flow_losses,
    read_trajectory,
    relative_pose_loss,
    write_trajectory,
)
from patchvo.geometry import Pose, make_patch
from patchvo.graph import build_graph


def _random_trajectory(n, seed=0):
    rng = np.random.default_rng(seed)
    quats = Rotation.random(n, random_state=seed).as_quat()
    return Trajectory(np.arange(n) * 0.1, [Pose(q, rng.normal(size=3) * 3) for q in quats])


def _random_similarity(seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.2, 5.0), Rotation.random(random_state=seed).as_matrix(), rng.normal(size=3) * 10


class TestAlign:
    def test_identity(self):
        traj = _random_trajectory(20)
        s, R, t = align_sim3(traj, traj)
        assert s == pytest.approx(1.0, abs=1e-12)
        assert_allclose(R, np.eye(3), atol=1e-12)
        assert_allclose(t, 0.0, atol=1e-10)

    def test_scale_two(self):
        ref = _random_trajectory(20)
        est = ref.transformed(2.0, np.eye(3), np.zeros(3))
        s, _, _ = align_sim3(est, ref)
        assert abs(s - 0.5) <= 1e-9

    def test_recovers_random_similarity(self):
        ref = _random_trajectory(50, seed=1)
        s0, R0, t0 = _random_similarity(2)
        est = ref.transformed(s0, R0, t0)
        s, R, t = align_sim3(est, ref)
        assert_allclose(s, 1 / s0, rtol=1e-8)
        assert_allclose(R, R0.T, atol=1e-8)
        assert_allclose(s * est.positions() @ R.T + t, ref.positions(), atol=1e-8)

    def test_collinear_rejected(self):
        poses = [Pose(np.array([0, 0, 0, 1.0]), [k, 0, 0]) for k in range(5)]
        traj = Trajectory(np.arange(5), poses)
        with pytest.raises(DegenerateAlignmentError):
            align_sim3(traj, traj)

    def test_coincident_rejected(self):
        traj = Trajectory(np.arange(4), [Pose.identity()] * 4)
        with pytest.raises(DegenerateAlignmentError):
            align_sim3(traj, traj)


class TestATE:
    def test_identical(self):
        traj = _random_trajectory(10)
        assert ate_rmse(traj, traj) == pytest.approx(0.0, abs=1e-12)

    def test_constant_offset(self):
        ref = _random_trajectory(30)
        est = ref.transformed(1.0, np.eye(3), np.array([5.0, -2.0, 1.0]))
        assert ate_rmse(est, ref, align=True) <= 1e-9
        assert ate_rmse(est, ref, align=False) == pytest.approx(np.sqrt(30.0))

    def test_gaussian_noise_statistics(self):
        rng = np.random.default_rng(5)
        n, sigma = 10_000, 0.05
        centres = rng.normal(size=(n, 3)) * 10
        noisy = centres + rng.normal(size=(n, 3)) * sigma
        ident = np.array([0, 0, 0, 1.0])
        ref = Trajectory(np.arange(n), [Pose(ident, -c) for c in centres])
        est = Trajectory(np.arange(n), [Pose(ident, -c) for c in noisy])
        assert ate_rmse(est, ref, align=False) == pytest.approx(sigma * np.sqrt(3), rel=0.05)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_similarity_invariance(self, seed):
        ref = _random_trajectory(15, seed=seed % 97)
        rng = np.random.default_rng(seed)
        est = Trajectory(ref.timestamps, [p @ Pose.exp(rng.normal(size=6) * 0.05) for p in ref.poses])
        s, R, t = _random_similarity(seed)
        moved = est.transformed(s, R, t)
        assert abs(ate_rmse(moved, ref) - ate_rmse(est, ref)) <= 1e-9

    def test_no_association(self):
        a = _random_trajectory(5)
        b = Trajectory(a.timestamps + 100, a.poses)
        with pytest.raises(ValueError):
            ate_rmse(a, b)

    def test_association_tolerates_small_offsets(self):
        ref = _random_trajectory(10)
        est = Trajectory(ref.timestamps + 0.004, ref.poses)
        assert ate_rmse(est, ref) == pytest.approx(0.0, abs=1e-9)


class TestAUC:
    def test_perfect(self):
        assert auc_error([0.0, 0.0], 1.0) == pytest.approx(1.0)

    def test_all_above(self):
        assert auc_error([2.0, 3.0], 1.0) == 0.0

    def test_midpoint_step(self):
        assert auc_error([0.5], 1.0) == pytest.approx(0.5, abs=0.01)

    def test_two_sequences(self):
        # half the sequences succeed at every threshold
        assert auc_error([0.0, 2.0], 1.0) == pytest.approx(0.5)

    @given(
        st.lists(st.floats(0, 2), min_size=1, max_size=10),
        st.integers(0, 9),
        st.floats(0, 1),
    )
    def test_monotone(self, ates, k, bump):
        k = k % len(ates)
        worse = list(ates)
        worse[k] += bump
        assert auc_error(worse, 1.0) <= auc_error(ates, 1.0) + 1e-15

    def test_errors(self):
        with pytest.raises(ValueError):
            auc_error([], 1.0)
        with pytest.raises(ValueError):
            auc_error([0.1], 0.0)


class TestLosses:
    def test_combined_examples(self):
        assert combined_loss(0, 0, 0) == 0
        assert combined_loss(0.1, 1.0, 0.05) == pytest.approx(1.6)

    def test_default_weights(self):
        w = LossWeights()
        assert (w.pose, w.flow, w.pw) == (10.0, 0.1, 10.0)

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5))
    def test_linearity(self, a, b, c, k):
        w = LossWeights(1.5, 0.3, 2.0)
        w2 = LossWeights(2 * 1.5, 2 * 0.3, 2 * 2.0)
        assert combined_loss(a, b, c, w2) == pytest.approx(2 * combined_loss(a, b, c, w))
        assert combined_loss(k * a, b, c, w) == pytest.approx(combined_loss(a, b, c, w) + (k - 1) * 1.5 * a)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            combined_loss(-1, 0, 0)
        with pytest.raises(ValueError):
            LossWeights(pose=-1)

    def test_pose_loss_example(self):
        ident = np.array([0, 0, 0, 1.0])
        ref = Trajectory([0, 1], [Pose(ident, [0, 0, 0]), Pose(ident, [0, 0, 0])])
        est = Trajectory([0, 1], [Pose(ident, [0, 0, 0]), Pose(ident, [0.3, 0, 0])])
        assert relative_pose_loss(est, ref) == pytest.approx(0.3)

    def test_flow_loss_example(self, cam):
        g = build_graph([[make_patch(0, 0, (20, 20), 0.5, cam, p=1)]], 1, r=1)
        g.write_edges(0, coords=np.array([[20.0, 20.0]]), valid=True)
        gt = np.array([[[17.0, 24.0]]])
        traj = _random_trajectory(3)
        pose_loss, flow_loss = pose_flow_losses(traj, traj, g, gt)
        assert pose_loss == pytest.approx(0.0, abs=1e-12)
        assert flow_loss == pytest.approx(7.0)


class TestTUM:
    def test_roundtrip(self, tmp_path):
        traj = _random_trajectory(25, seed=8)
        write_trajectory(traj, tmp_path / "t.tum")
        back = read_trajectory(tmp_path / "t.tum")
        assert_allclose(back.timestamps, traj.timestamps, atol=1e-9)
        for a, b in zip(back.poses, traj.poses):
            assert_allclose(a.R, b.R, atol=1e-9)
            assert_allclose(a.t, b.t, atol=1e-9)

    def test_identity_line(self, tmp_path):
        (tmp_path / "t.tum").write_text("0.0 0 0 0 0 0 0 1\n")
        traj = read_trajectory(tmp_path / "t.tum")
        assert traj.timestamps[0] == 0.0
        assert_allclose(traj.poses[0].R, np.eye(3))
        assert_allclose(traj.poses[0].t, 0.0)

    def test_wrong_arity_names_line(self, tmp_path):
        (tmp_path / "t.tum").write_text("0.0 0 0 0 0 0 0 1\n1.0 0 0 0 0 0 1\n")
        with pytest.raises(TrajectoryFormatError, match=":2:"):
            read_trajectory(tmp_path / "t.tum")

    def test_non_unit_quaternion(self, tmp_path):
        (tmp_path / "t.tum").write_text("0.0 0 0 0 0 0 0 1.01\n")
        with pytest.raises(TrajectoryFormatError, match="quaternion"):
            read_trajectory(tmp_path / "t.tum")

    def test_small_quaternion_drift_accepted(self, tmp_path):
        (tmp_path / "t.tum").write_text("0.0 0 0 0 0 0 0 1.0005\n")
        read_trajectory(tmp_path / "t.tum")

    def test_non_increasing_timestamps(self):
        with pytest.raises(ValueError):
            Trajectory([1.0, 1.0], [Pose.identity()] * 2)
