import csv
import json
import os

import numpy as np
import pytest

import autodiff as ad
from autodiff import OpRule
from commands import GRADCHECK_COMPONENTS, run_gradcheck
from dataio import load_demo_dir, load_robot
from errors import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK
from main import build_parser, main
from metrics import motion_report
from storage import read_trajectory

pytestmark = pytest.mark.slow

ARM5 = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "robots", "arm5x2.robot")


def _small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps({
        "robot": ARM5,
        "n_train": 2,
        "n_test": 2,
        "frame_min": 4,
        "frame_max": 6,
        "d_z": 4,
        "chunk": 8,
        "optim": {"max_iters": 5, "plateau": 2, "lr": 0.05},
        "train": {"epochs": 1, "batch": 8, "lr": 0.001},
    }))
    return str(path)


def _run(tmp_path, command, *flags, out="runs"):
    return main([command, "--config", _small_config(tmp_path), "--output-dir", str(tmp_path / out)] + list(flags))


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_parser_knows_every_command():
    parser = build_parser()
    for command in ("synth", "train", "retarget", "eval", "compare-init", "ablate", "gradcheck"):
        args = parser.parse_args([command, "--w-ee", "2", "--no-warm-start"])
        assert args.command == command
        assert getattr(args, "weights.ee") == 2.0
        assert args.warm_start is False


def test_pipeline(tmp_path):
    out = tmp_path / "runs"
    assert _run(tmp_path, "synth") == EXIT_OK
    assert len(load_demo_dir(str(out / "synth" / "test"))) == 2
    assert len(_rows(out / "synth" / "sequences.csv")) == 5

    assert _run(tmp_path, "train") == EXIT_OK
    assert (out / "train" / "nets.npz").exists()
    assert len(_rows(out / "train" / "loss_curve.csv")) == 2
    manifest = json.loads((out / "train" / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["d_z"] == 4

    assert _run(tmp_path, "retarget") == EXIT_OK
    summary = _rows(out / "retarget" / "retarget.csv")
    assert len(summary) == 3
    robot = load_robot(ARM5)
    demos = {seq.label: seq for seq in load_demo_dir(str(out / "synth" / "test"))}
    for label, seq in demos.items():
        angles = read_trajectory(str(out / "retarget" / "trajectories" / f"{label}.csv"), robot.dof_names)
        assert angles.shape == (len(seq), robot.n_dof)
        assert np.all(angles >= robot.lower) and np.all(angles <= robot.upper)
        losses = _rows(out / "retarget" / "losses" / f"{label}.csv")
        assert losses[0][:2] == ["frame", "iteration"]

    assert _run(tmp_path, "eval", "--trajectories", str(out / "retarget" / "trajectories")) == EXIT_OK
    report = _rows(out / "eval" / "report.csv")
    assert len(report) == 3
    for row in report[1:]:
        seq = demos[row[0]]
        angles = read_trajectory(str(out / "retarget" / "trajectories" / f"{row[0]}.csv"), robot.dof_names)
        expected = motion_report(row[0], seq.frames, angles, robot, seq.dt)
        assert float(row[2]) == pytest.approx(expected.frechet, rel=1e-9)
        assert int(row[6]) == expected.collisions

    manifest = json.loads((out / "eval" / "manifest.json").read_text())
    retargeted = json.loads((out / "retarget" / "manifest.json").read_text())
    assert manifest["source_config_hash"] == retargeted["config_hash"]

    assert _run(tmp_path, "eval") == EXIT_OK
    assert len(_rows(out / "eval" / "timing.csv")) == 3

    assert _run(tmp_path, "compare-init") == EXIT_OK
    curves = _rows(out / "compare-init" / "curves.csv")
    assert curves[0] == ["iteration", "neural", "random_var0.1", "random_var0.2", "stats"]
    assert len(curves) == 1 + 6
    for column in range(1, 5):
        values = [float(r[column]) for r in curves[1:]]
        assert all(b <= a for a, b in zip(values, values[1:]))
    summary = _rows(out / "compare-init" / "summary.csv")
    assert [r[0] for r in summary[1:]] == curves[0][1:]


def test_reruns_are_byte_identical(tmp_path):
    for out in ("a", "b"):
        for command in ("train", "retarget"):
            assert _run(tmp_path, command, out=out) == EXIT_OK
    a, b = tmp_path / "a" / "retarget", tmp_path / "b" / "retarget"
    assert (a / "retarget.csv").read_bytes() == (b / "retarget.csv").read_bytes()
    for name in os.listdir(a / "trajectories"):
        assert (a / "trajectories" / name).read_bytes() == (b / "trajectories" / name).read_bytes()


def test_parallel_jobs_match_serial(tmp_path):
    assert _run(tmp_path, "train") == EXIT_OK
    checkpoint = str(tmp_path / "runs" / "train" / "nets.npz")
    assert _run(tmp_path, "retarget", "--checkpoint", checkpoint, out="serial") == EXIT_OK
    assert _run(tmp_path, "retarget", "--checkpoint", checkpoint, "--jobs", "2", out="parallel") == EXIT_OK
    serial = tmp_path / "serial" / "retarget" / "trajectories"
    parallel = tmp_path / "parallel" / "retarget" / "trajectories"
    assert sorted(os.listdir(serial)) == sorted(os.listdir(parallel))
    for name in os.listdir(serial):
        assert (serial / name).read_bytes() == (parallel / name).read_bytes()


def test_ablation_grid(tmp_path):
    code = _run(tmp_path, "ablate", "--ablate-architectures", "graph,dense", "--ablate-activations", "tanh",
                "--ablate-modes", "feedforward")
    assert code == EXIT_OK
    rows = _rows(tmp_path / "runs" / "ablate" / "ablation.csv")
    assert len(rows) == 3
    assert [r[0] for r in rows[1:]] == ["GAE+FK", "AE+FK"]
    assert all(float(r[7]) == 0.0 for r in rows[1:])


def test_gradcheck_command_passes(tmp_path):
    assert _run(tmp_path, "gradcheck", "--gradcheck-seeds", "3") == EXIT_OK
    rows = _rows(tmp_path / "runs" / "gradcheck" / "gradcheck.csv")
    assert [r[0] for r in rows[1:]] == list(GRADCHECK_COMPONENTS)
    assert all(r[4] == "True" for r in rows[1:])


def test_gradcheck_catches_a_broken_rule(monkeypatch, arm5):
    forward = ad.OPS["sin"].forward
    monkeypatch.setitem(ad.OPS, "sin", OpRule(forward, lambda g, xs, o, a: (1.5 * g * np.cos(xs[0]),)))
    result = run_gradcheck("fk", arm5, seeds=3)
    assert not result.passed
    assert result.max_error > 1e-4


@pytest.mark.parametrize("component", ["decode", "objective_z", "graph_conv"])
def test_gradcheck_network_components_use_every_seed(arm5, component):
    result = run_gradcheck(component, arm5, seeds=4)
    assert result.points + result.skipped == 4
    assert result.points > 0


def test_exit_codes(tmp_path):
    assert _run(tmp_path, "retarget", "--mode", "teleport") == EXIT_CONFIG
    assert _run(tmp_path, "retarget", out="empty") == EXIT_CONFIG
    assert _run(tmp_path, "synth", "--robot", str(tmp_path / "absent.robot"), out="x") == EXIT_OK
    assert _run(tmp_path, "train", "--robot", str(tmp_path / "absent.robot")) == EXIT_IO
    assert _run(tmp_path, "retarget", "--checkpoint", str(tmp_path / "absent.npz")) == EXIT_IO
    data = json.loads(open(ARM5).read())
    data["capsules"][0]["radius"] = "wide"
    bad = tmp_path / "bad_radius.robot"
    bad.write_text(json.dumps(data))
    assert _run(tmp_path, "train", "--robot", str(bad)) == EXIT_IO


def test_eval_rejects_trajectories_of_another_robot(tmp_path):
    assert _run(tmp_path, "train") == EXIT_OK
    assert _run(tmp_path, "retarget") == EXIT_OK
    trajectories = str(tmp_path / "runs" / "retarget" / "trajectories")
    arm7 = os.path.join(os.path.dirname(ARM5), "arm7x2_hand.robot")
    assert _run(tmp_path, "eval", "--trajectories", trajectories, "--robot", arm7) == EXIT_CONFIG
    assert not (tmp_path / "runs" / "eval" / "report.csv").exists()


def test_gradcheck_failure_exit_code(tmp_path, monkeypatch):
    forward = ad.OPS["sin"].forward
    monkeypatch.setitem(ad.OPS, "sin", OpRule(forward, lambda g, xs, o, a: (1.5 * g * np.cos(xs[0]),)))
    assert _run(tmp_path, "gradcheck", "--gradcheck-seeds", "2") == EXIT_NUMERIC
