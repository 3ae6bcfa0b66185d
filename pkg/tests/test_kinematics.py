import numpy as np
import pytest
from hypothesis import given, strategies as st

from errors import UsageError, ValidationError
from kinematics import (JointSpec, RobotModel, axis_rotation, capsule_distance, forward_kinematics, marker_positions,
                        matrix_to_rpy, pair_distances, rpy_to_matrix)
from metrics import count_collisions


@given(st.integers(min_value=0, max_value=10 ** 6))
def test_rotations_stay_orthonormal(arm7, seed):
    angles = np.random.default_rng(seed).uniform(arm7.lower, arm7.upper, size=(4, arm7.n_dof))
    transforms = forward_kinematics(arm7, angles)
    for r in transforms.rotations:
        r = np.asarray(r)
        error = np.abs(r @ np.swapaxes(r, -1, -2) - np.eye(3))
        assert error.max() < 1e-9
        np.testing.assert_allclose(np.linalg.det(r), 1.0, atol=1e-9)


def test_batched_matches_single(arm7, rng):
    angles = rng.uniform(arm7.lower, arm7.upper, size=(3, arm7.n_dof))
    batch = marker_positions(arm7, forward_kinematics(arm7, angles))
    for k in range(3):
        single = marker_positions(arm7, forward_kinematics(arm7, angles[k]))
        for name, p in single.items():
            np.testing.assert_allclose(batch[name][k], p, atol=1e-12)


def test_zero_pose_sites(arm5):
    zero = arm5.zero_pose_sites
    np.testing.assert_allclose(zero["shoulder_left"], [0.0, 0.098, 0.0], atol=1e-12)
    np.testing.assert_allclose(zero["wrist_left"], [0.0, 0.098, -0.161], atol=1e-12)
    np.testing.assert_allclose(zero["wrist_right"], [0.0, -0.098, -0.161], atol=1e-12)


def test_normalization_lengths(arm5):
    lengths = arm5.norm_lengths["left"]
    assert lengths.arm == pytest.approx(0.161)
    assert lengths.forearm == pytest.approx(0.056)
    assert lengths.fingers == ()


def test_shoulder_pitch_swings_arm_forward(arm5):
    angles = np.zeros(arm5.n_dof)
    angles[arm5.dof_names.index("left_shoulder_pitch")] = np.pi / 2
    transforms = forward_kinematics(arm5, angles)
    np.testing.assert_allclose(transforms.site_position("wrist_left"), [-0.161, 0.098, 0.0], atol=1e-12)


def test_wrong_angle_count(arm5):
    with pytest.raises(UsageError):
        forward_kinematics(arm5, np.zeros(arm5.n_dof + 1))


def test_unknown_site(arm5):
    with pytest.raises(UsageError):
        arm5.site("nose")
    with pytest.raises(UsageError):
        marker_positions(arm5, forward_kinematics(arm5, np.zeros(arm5.n_dof)), ["nose"])


def test_model_validation():
    root = JointSpec("base", None, (0.0, 0.0, 0.0), kind="fixed")
    with pytest.raises(ValidationError):
        RobotModel("twins", (root, JointSpec("base", "base", (0.0, 0.0, 0.1), lower=-1, upper=1)))
    with pytest.raises(ValidationError):
        RobotModel("orphan", (root, JointSpec("a", "missing", (0.0, 0.0, 0.1), lower=-1, upper=1)))


def test_rpy_round_trip():
    rpy = np.array([0.3, -0.5, 1.1])
    np.testing.assert_allclose(matrix_to_rpy(rpy_to_matrix(rpy)), rpy, atol=1e-12)


def test_capsule_distance_crossing_segments():
    a = (np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.1)
    b = (np.array([0.5, -1.0, 0.5]), np.array([0.5, 1.0, 0.5]), 0.1)
    assert float(capsule_distance(a, b)) == pytest.approx(0.3, abs=1e-9)


def test_capsule_distance_parallel_and_overlapping():
    a = (np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.05)
    b = (np.array([0.5, 0.3, 0.0]), np.array([2.0, 0.3, 0.0]), 0.05)
    assert float(capsule_distance(a, b)) == pytest.approx(0.2, abs=1e-9)
    c = (np.array([0.5, 0.05, 0.0]), np.array([0.5, 1.0, 0.0]), 0.05)
    assert float(capsule_distance(a, c)) < 0


@given(st.integers(min_value=0, max_value=10 ** 6))
def test_capsule_distance_matches_sampling(seed):
    rng = np.random.default_rng(seed)
    p0, p1, q0, q1 = rng.uniform(-1.0, 1.0, size=(4, 3))
    exact = float(capsule_distance((p0, p1, 0.0), (q0, q1, 0.0)))
    # dense points along p against the exact point-to-segment distance to q
    points = p0 + np.linspace(0.0, 1.0, 10 ** 4)[:, None] * (p1 - p0)
    d2 = q1 - q0
    t = np.clip((points - q0) @ d2 / (d2 @ d2), 0.0, 1.0)
    sampled = np.min(np.linalg.norm(points - (q0 + t[:, None] * d2), axis=-1))
    assert exact <= sampled + 1e-9
    assert sampled - exact < 1e-3


@given(st.integers(min_value=0, max_value=10 ** 6))
def test_capsule_distance_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    p0, p1, q0, q1 = rng.uniform(-1.0, 1.0, size=(4, 3))
    ra, rb = rng.uniform(0.01, 0.2, size=2)
    forward = float(capsule_distance((p0, p1, ra), (q0, q1, rb)))
    backward = float(capsule_distance((q0, q1, rb), (p0, p1, ra)))
    assert abs(forward - backward) < 1e-12


def test_capsule_distance_parallel_unit_segments():
    a = (np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.1)
    b = (np.array([0.0, 1.0, 0.0]), np.array([1.0, 1.0, 0.0]), 0.1)
    assert float(capsule_distance(a, b)) == pytest.approx(0.8, abs=1e-9)


def test_capsule_distance_identical_segments():
    a = (np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), 0.1)
    assert float(capsule_distance(a, a)) == pytest.approx(-0.2, abs=1e-8)


def _rx(a):
    return np.array([[1.0, 0.0, 0.0], [0.0, np.cos(a), -np.sin(a)], [0.0, np.sin(a), np.cos(a)]])


def _ry(a):
    return np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])


def _rz(a):
    return np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])


def _homogeneous(joint, angle):
    k = np.asarray(joint.axis, dtype=float)
    cross = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    spin = np.cos(angle) * np.eye(3) + np.sin(angle) * cross + (1.0 - np.cos(angle)) * np.outer(k, k)
    roll, pitch, yaw = joint.origin_rpy
    h = np.eye(4)
    h[:3, :3] = _rz(yaw) @ _ry(pitch) @ _rx(roll) @ spin
    h[:3, 3] = joint.origin_offset
    return h


def _random_chain(rng, n=7):
    base = JointSpec("base", None, tuple(rng.uniform(-0.2, 0.2, 3)), tuple(rng.uniform(-np.pi, np.pi, 3)),
                     kind="fixed")
    joints = [base]
    for k in range(n):
        axis = rng.normal(size=3)
        joints.append(JointSpec(f"j{k}", joints[-1].name, tuple(rng.uniform(-0.3, 0.3, 3)),
                                tuple(rng.uniform(-np.pi, np.pi, 3)), tuple(axis / np.linalg.norm(axis)),
                                lower=-np.pi, upper=np.pi))
    return RobotModel("chain", tuple(joints))


@given(st.integers(min_value=0, max_value=10 ** 6))
def test_fk_matches_homogeneous_matrices(seed):
    rng = np.random.default_rng(seed)
    model = _random_chain(rng)
    angles = rng.uniform(-np.pi, np.pi, model.n_dof)
    transforms = forward_kinematics(model, angles)
    h = np.eye(4)
    values = dict(zip(model.dof_names, angles))
    for joint in model.joints:
        h = h @ _homogeneous(joint, values.get(joint.name, 0.0))
        np.testing.assert_allclose(transforms.rotation(joint.name), h[:3, :3], atol=1e-9)
        np.testing.assert_allclose(transforms.position(joint.name), h[:3, 3], atol=1e-9)


def _subtree(model, top):
    """The joints below `top` re-rooted on an identity anchor."""
    anchor = JointSpec("anchor", None, (0.0, 0.0, 0.0), kind="fixed")
    names = {top.name}
    joints = [anchor, JointSpec(top.name, "anchor", top.origin_offset, top.origin_rpy, top.axis, top.lower,
                                top.upper, top.node_type, top.kind)]
    for joint in model.joints:
        if joint.parent in names:
            names.add(joint.name)
            joints.append(joint)
    return RobotModel("subtree", tuple(joints))


def test_fk_composes_over_subtrees(arm7, rng):
    angles = rng.uniform(arm7.lower, arm7.upper)
    full = forward_kinematics(arm7, angles)
    values = dict(zip(arm7.dof_names, angles))
    for top in arm7.joints:
        if top.parent is None:
            continue
        sub = _subtree(arm7, top)
        local = forward_kinematics(sub, np.array([values[name] for name in sub.dof_names]))
        r_parent = full.rotation(top.parent)
        t_parent = full.position(top.parent)
        for joint in sub.joints[1:]:
            np.testing.assert_allclose(full.rotation(joint.name), r_parent @ local.rotation(joint.name),
                                       atol=1e-12)
            np.testing.assert_allclose(full.position(joint.name),
                                       t_parent + r_parent @ local.position(joint.name), atol=1e-12)


def test_collision_pairs_skip_adjacent_links(arm5):
    names = [c.name for c in arm5.capsules]
    pairs = {(names[i], names[j]) for i, j in arm5.collision_pairs}
    assert len(arm5.collision_pairs) == 17
    assert ("left_upper_arm", "left_forearm") not in pairs
    assert ("left_upper_arm", "left_hand") in pairs
    assert ("left_hand", "right_hand") in pairs


def test_rest_pose_is_collision_free(arm5):
    distances = pair_distances(arm5, forward_kinematics(arm5, np.zeros((1, arm5.n_dof))))
    assert min(float(d[0]) for d in distances) > arm5.d_min
    assert count_collisions(arm5, np.zeros(arm5.n_dof)) == 0


def test_arm_swung_into_torso_collides(arm5):
    angles = np.zeros(arm5.n_dof)
    angles[arm5.dof_names.index("left_shoulder_roll")] = -0.31
    assert count_collisions(arm5, angles) >= 1


def test_joint_rotation_follows_rodrigues(arm5):
    angles = np.zeros(arm5.n_dof)
    angles[arm5.dof_names.index("left_shoulder_pitch")] = 0.7
    rotation = forward_kinematics(arm5, angles).rotation("left_shoulder_pitch")
    np.testing.assert_allclose(rotation, axis_rotation((0.0, 1.0, 0.0), 0.7), atol=1e-12)
