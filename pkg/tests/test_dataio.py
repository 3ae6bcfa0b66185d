import json
import os

import numpy as np
import pytest

from dataio import (MAX_STEP, DemoSequence, load_demo, load_demo_dir, load_robot, make_dataset, robot_from_dict,
                    robot_to_dict, save_dataset, save_demo, save_robot, synth_demo)
from errors import ConfigurationError, ParseError, ValidationError
from kinematics import matrix_to_rpy
from skeleton import HUMAN_NODES, human_model, rest_pose


def test_robot_round_trip(tmp_path, arm7):
    path = save_robot(arm7, str(tmp_path / "copy.robot"))
    loaded = load_robot(path)
    assert loaded.dof_names == arm7.dof_names
    np.testing.assert_array_equal(loaded.lower, arm7.lower)
    np.testing.assert_array_equal(loaded.upper, arm7.upper)
    assert loaded.collision_pairs == arm7.collision_pairs
    assert robot_to_dict(loaded) == robot_to_dict(arm7)


def test_missing_robot_file(tmp_path):
    with pytest.raises(OSError):
        load_robot(str(tmp_path / "absent.robot"))


def test_robot_syntax_error_reports_line(tmp_path):
    path = tmp_path / "broken.robot"
    path.write_text('{\n  "format": "robot",\n  "version": 1,,\n}\n')
    with pytest.raises(ParseError) as info:
        load_robot(str(path))
    assert info.value.line == 3


def test_missing_limits_names_the_joint(arm5):
    data = robot_to_dict(arm5)
    joint = next(j for j in data["joints"] if "limits" in j)
    del joint["limits"]
    with pytest.raises(ParseError) as info:
        robot_from_dict(data, "arm.robot")
    assert joint["name"] in str(info.value)
    assert info.value.field.endswith(".limits")


def test_robot_version_mismatch(arm5):
    data = robot_to_dict(arm5)
    data["version"] = 99
    with pytest.raises(ParseError) as info:
        robot_from_dict(data)
    assert info.value.field == "version"


def test_non_numeric_capsule_radius_is_a_parse_error(arm5):
    data = robot_to_dict(arm5)
    data["capsules"][0]["radius"] = "wide"
    with pytest.raises(ParseError) as info:
        robot_from_dict(data, "arm.robot")
    assert info.value.field.endswith(".radius")
    assert data["capsules"][0]["name"] in str(info.value)


def test_non_numeric_d_min_is_a_parse_error(arm5):
    data = robot_to_dict(arm5)
    data["d_min"] = [0.01]
    with pytest.raises(ParseError) as info:
        robot_from_dict(data)
    assert info.value.field == "robot.d_min"


def test_non_numeric_demo_values_are_parse_errors(tmp_path, short_demo):
    path = tmp_path / "bad.demo"
    save_demo(short_demo, str(path))
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["dt"] = "fast"
    path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(ParseError) as info:
        load_demo(str(path))
    assert info.value.field == "header.dt" and info.value.line == 1

    record = json.loads(lines[2])
    record["arm_lengths"] = ["long", "short"]
    path.write_text("\n".join([lines[0], lines[1], json.dumps(record)] + lines[3:]) + "\n")
    with pytest.raises(ParseError) as info:
        load_demo(str(path))
    assert info.value.field.endswith(".arm_lengths") and info.value.line == 3


def test_demo_round_trip(tmp_path, short_demo):
    path = save_demo(short_demo, str(tmp_path / "demo.demo"))
    loaded = load_demo(path)
    assert len(loaded) == len(short_demo)
    assert loaded.label == short_demo.label
    assert loaded.dt == pytest.approx(short_demo.dt)
    np.testing.assert_allclose(loaded.positions(), short_demo.positions())
    np.testing.assert_allclose(loaded.frames[2].wrist_rotations, short_demo.frames[2].wrist_rotations)


def test_demo_with_euler_wrists(tmp_path, short_demo):
    path = tmp_path / "euler.demo"
    save_demo(short_demo, str(path), euler=True)
    record = json.loads(path.read_text().splitlines()[1])
    assert "wrist_rotations" not in record
    np.testing.assert_allclose(record["wrist_euler"][0], matrix_to_rpy(short_demo.frames[0].wrist_rotations[0]))
    loaded = load_demo(str(path))
    for a, b in zip(loaded.frames, short_demo.frames):
        np.testing.assert_allclose(a.wrist_rotations, b.wrist_rotations, atol=1e-9)


def test_demo_bad_frame_reports_line_and_field(tmp_path, short_demo):
    path = tmp_path / "bad.demo"
    save_demo(short_demo, str(path))
    lines = path.read_text().splitlines()
    record = json.loads(lines[3])
    del record["positions"]
    lines[3] = json.dumps(record)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        load_demo(str(path))
    assert info.value.line == 4
    assert info.value.field.endswith("positions")


def test_demo_invalid_json_line(tmp_path, short_demo):
    path = tmp_path / "torn.demo"
    save_demo(short_demo, str(path))
    lines = path.read_text().splitlines()
    lines[2] = lines[2][:20]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError) as info:
        load_demo(str(path))
    assert info.value.line == 3


def test_demo_header_checks(tmp_path):
    path = tmp_path / "other.demo"
    path.write_text(json.dumps({"format": "robot", "version": 1}) + "\n")
    with pytest.raises(ParseError):
        load_demo(str(path))
    path.write_text("")
    with pytest.raises(ParseError):
        load_demo(str(path))


def test_teleporting_joint_is_rejected(short_demo):
    frames = list(short_demo.frames)
    jumped = frames[4].scaled(1.0)
    jumped.positions = jumped.positions + np.array([2.0 * MAX_STEP, 0.0, 0.0])
    frames[4] = jumped
    with pytest.raises(ValidationError):
        DemoSequence(frames, short_demo.dt, label="jump").validate()


def test_synthetic_demos_are_smooth_and_seeded():
    a = synth_demo(42, 60)
    b = synth_demo(42, 60)
    np.testing.assert_array_equal(a.positions(), b.positions())
    assert not np.array_equal(a.positions(), synth_demo(43, 60).positions())
    steps = np.linalg.norm(np.diff(a.positions(), axis=0), axis=-1)
    assert steps.max() < MAX_STEP
    a.validate()
    assert a.positions().shape == (60, len(HUMAN_NODES), 3)


@pytest.mark.slow
@pytest.mark.parametrize("difficulty", [0.5, 1.0])
def test_synthetic_wrists_stay_below_two_meters_per_second(difficulty):
    wrists = [HUMAN_NODES.index("wrist_left"), HUMAN_NODES.index("wrist_right")]
    fastest = 0.0
    for seed in range(1000):
        demo = synth_demo(seed, 40, difficulty=difficulty, style=("sign", "crossing")[seed % 2])
        steps = np.linalg.norm(np.diff(demo.positions()[:, wrists], axis=0), axis=-1)
        fastest = max(fastest, float(steps.max()) / demo.dt)
    assert fastest <= 2.0


def test_make_dataset_sizes(tmp_path):
    train, test = make_dataset(n_train=3, n_test=2, frame_range=(5, 9))
    assert len(train) == 3 and len(test) == 2
    assert all(5 <= len(s) <= 9 for s in train + test)
    assert not {s.label for s in train} & {s.label for s in test}
    paths = save_dataset(test, str(tmp_path / "test"))
    assert len(paths) == 2
    loaded = load_demo_dir(str(tmp_path / "test"))
    assert [s.label for s in loaded] == sorted(s.label for s in test)
    assert load_demo_dir(str(tmp_path)) == []
    assert os.path.isdir(str(tmp_path / "test"))


def test_rest_pose_styles():
    model = human_model()
    assert rest_pose(model, "sign").shape == (model.n_dof,)
    with pytest.raises(ConfigurationError):
        rest_pose(model, "dance")
