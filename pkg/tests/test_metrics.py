import numpy as np
import pytest

from errors import UsageError
from kinematics import forward_kinematics
from metrics import (Trajectory, acceleration_error, count_collisions, discrete_frechet, marker_tracks,
                     motion_report, tracking_error, velocity_error)
from objective import DemoFrame
from skeleton import CHAINS, FINGERS, NODE_INDEX


def _brute_force_frechet(dist):
    m, n = dist.shape
    best = [np.inf]

    def walk(i, j, worst):
        worst = max(worst, dist[i, j])
        if worst >= best[0]:
            return
        if i == m - 1 and j == n - 1:
            best[0] = worst
            return
        if i + 1 < m and j + 1 < n:
            walk(i + 1, j + 1, worst)
        if i + 1 < m:
            walk(i + 1, j, worst)
        if j + 1 < n:
            walk(i, j + 1, worst)

    walk(0, 0, 0.0)
    return best[0]


@pytest.mark.slow
def test_frechet_matches_exhaustive_couplings():
    rng = np.random.default_rng(11)
    for _ in range(500):
        p = rng.normal(size=(int(rng.integers(1, 9)), 3))
        q = rng.normal(size=(int(rng.integers(1, 9)), 3))
        dist = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=-1)
        assert discrete_frechet(p, q) == _brute_force_frechet(dist)


def test_frechet_symmetry_and_translation(rng):
    p = rng.normal(size=(7, 3))
    q = rng.normal(size=(5, 3))
    shift = np.array([0.4, -2.0, 1.5])
    assert discrete_frechet(p, q) == pytest.approx(discrete_frechet(q, p))
    assert discrete_frechet(p + shift, q + shift) == pytest.approx(discrete_frechet(p, q))
    assert discrete_frechet(p, p) == 0.0


def test_frechet_of_offset_lines():
    p = np.stack([np.linspace(0.0, 1.0, 5), np.zeros(5), np.zeros(5)], axis=1)
    assert discrete_frechet(p, p + [0.0, 0.3, 0.0]) == pytest.approx(0.3)
    assert discrete_frechet(Trajectory(p), p[::-1]) == pytest.approx(1.0)


def test_empty_trajectory_is_rejected():
    with pytest.raises(UsageError):
        discrete_frechet(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(UsageError):
        Trajectory(np.zeros((3, 3)), dt=0.0)


def test_velocity_and_acceleration_errors():
    dt = 0.1
    t = np.arange(6) * dt
    demo = np.stack([t, np.zeros(6), np.zeros(6)], axis=1)
    robot = np.stack([2.0 * t, np.zeros(6), np.zeros(6)], axis=1)
    assert velocity_error(robot, demo, dt) == pytest.approx(1.0)
    assert acceleration_error(robot, demo, dt) == pytest.approx(0.0, abs=1e-9)
    curved = np.stack([t ** 2, np.zeros(6), np.zeros(6)], axis=1)
    assert acceleration_error(curved, np.zeros_like(curved), dt) == pytest.approx(2.0)
    with pytest.raises(UsageError):
        velocity_error(robot[:1], demo[:1], dt)
    with pytest.raises(UsageError):
        acceleration_error(robot[:2], demo[:2], dt)
    with pytest.raises(UsageError):
        velocity_error(robot, demo[:4], dt)


def _tracked_frames(model, angles):
    """Demo frames whose wrists and elbows sit exactly on the robot's."""
    transforms = forward_kinematics(model, angles)
    lengths = model.norm_lengths
    frames = []
    for k in range(len(angles)):
        positions = np.zeros((len(NODE_INDEX), 3))
        for chain in model.chains:
            positions[NODE_INDEX[f"wrist_{chain.name}"]] = transforms.site_position(chain.wrist)[k]
            positions[NODE_INDEX[f"elbow_{chain.name}"]] = transforms.site_position(chain.elbow)[k]
        frames.append(DemoFrame(positions, np.tile(np.eye(3), (len(CHAINS), 1, 1)),
                                [lengths[c].arm for c in CHAINS], [lengths[c].forearm for c in CHAINS],
                                np.full((len(CHAINS), len(FINGERS)), 0.05)))
    return frames


def test_perfect_tracking_scores_zero(arm5, rng):
    t = np.linspace(0.0, 1.0, 6)[:, None]
    angles = 0.5 * (arm5.lower + arm5.upper) + 0.3 * np.sin(3.0 * t + np.arange(arm5.n_dof))
    frames = _tracked_frames(arm5, angles)
    assert tracking_error(frames, angles, arm5) == pytest.approx(0.0, abs=1e-12)
    report = motion_report("perfect", frames, angles, arm5, dt=0.1, iterations=[3, 5])
    assert report.frechet == pytest.approx(0.0, abs=1e-12)
    assert report.velocity == pytest.approx(0.0, abs=1e-9)
    assert report.acceleration == pytest.approx(0.0, abs=1e-7)
    assert report.iterations == 4.0
    assert len(report.as_row()) == len(report.HEADER)


def test_tracks_scale_by_arm_length(arm5):
    angles = np.zeros((2, arm5.n_dof))
    frames = [f.scaled(2.0) for f in _tracked_frames(arm5, angles)]
    tracks = marker_tracks(frames, angles, arm5)
    assert set(tracks) == {"wrist_left", "elbow_left", "wrist_right", "elbow_right"}
    robot, demo = tracks["wrist_left"]
    np.testing.assert_allclose(demo, robot, atol=1e-12)


def test_single_frame_report_has_no_derivatives(arm5):
    angles = np.zeros((1, arm5.n_dof))
    report = motion_report("still", _tracked_frames(arm5, angles), angles, arm5, dt=0.1)
    assert report.velocity is None and report.acceleration is None
    assert report.collisions == 0 and report.limit_violations == 0


def test_mismatched_lengths_are_rejected(arm5):
    angles = np.zeros((3, arm5.n_dof))
    with pytest.raises(UsageError):
        tracking_error(_tracked_frames(arm5, angles)[:2], angles, arm5)


def test_collision_count_over_frames(arm5):
    angles = np.zeros((3, arm5.n_dof))
    angles[1:, arm5.dof_names.index("left_shoulder_roll")] = -0.31
    assert count_collisions(arm5, angles) >= 2
    assert count_collisions(arm5, angles[:1]) == 0
