import numpy as np
import pytest

from dataio import robot_from_dict, robot_to_dict
from errors import ConfigurationError, UsageError
from graphnet import decode, encode
from objective import ObjectiveWeights
from retarget import (Adam, LatentOptions, TrainOptions, baseline_joint_optimize, baseline_optimize_batch,
                      count_limit_violations, feedforward_batch, initial_latents, latent_optimize,
                      latent_optimize_batch, random_init, retarget_frame, retarget_frames, retarget_sequence,
                      stats_init, train)

QUICK = LatentOptions(max_iters=12, plateau=3, lr=5e-2)


def test_adam_first_step():
    params = {"x": np.array([1.0])}
    Adam(lr=0.1).step(params, {"x": np.array([2.0])})
    assert params["x"][0] == pytest.approx(0.9, abs=1e-6)


def test_adam_mask_freezes_entries():
    params = {"x": np.array([1.0, 1.0])}
    adam = Adam(lr=0.1)
    adam.step(params, {"x": np.array([2.0, 2.0])}, mask={"x": np.array([True, False])})
    assert params["x"][1] == 1.0
    assert adam.v["x"][1] == 0.0


def test_latent_optimization_keeps_best_iterate(small_nets, short_demo):
    frame = short_demo.frames[0]
    z0 = encode(small_nets, frame.positions)
    run = latent_optimize(frame, z0, small_nets, ObjectiveWeights(), QUICK)
    assert run.best.total <= run.initial.total
    assert run.iterations_used <= QUICK.max_iters
    assert run.stop_reason in ("plateau", "max_iters")
    np.testing.assert_allclose(run.angles, decode(small_nets, run.z), atol=1e-12)


def test_plateau_rule_replays_from_history(small_nets, short_demo):
    frames = short_demo.frames[:4]
    runs = latent_optimize_batch(frames, encode(small_nets, short_demo.positions()[:4]), small_nets,
                                 ObjectiveWeights(), QUICK)
    for run in runs:
        totals = run.totals()
        assert len(totals) == run.iterations_used + 1
        assert run.best.total == min(totals)
        best, stale = totals[0], 0
        stopped = None
        for k, value in enumerate(totals[1:], start=1):
            if value < best:
                best, stale = value, 0
            else:
                stale += 1
            if stale >= QUICK.plateau:
                stopped = "plateau"
                assert k == len(totals) - 1
        assert run.stop_reason == (stopped or "max_iters")


def test_batch_matches_single_frames(small_nets, short_demo):
    frames = short_demo.frames[:3]
    z0 = encode(small_nets, short_demo.positions()[:3])
    batch = latent_optimize_batch(frames, z0, small_nets, ObjectiveWeights(), QUICK)
    for k, frame in enumerate(frames):
        single = latent_optimize(frame, z0[k], small_nets, ObjectiveWeights(), QUICK)
        np.testing.assert_allclose(batch[k].angles, single.angles, atol=1e-8)
        assert batch[k].iterations_used == single.iterations_used


def test_latent_shape_is_checked(small_nets, short_demo):
    with pytest.raises(UsageError):
        latent_optimize_batch(short_demo.frames[:2], np.zeros((2, 3, 3)), small_nets, ObjectiveWeights())


def test_feedforward_uses_no_iterations(small_nets, short_demo):
    runs = feedforward_batch(short_demo.frames, small_nets, ObjectiveWeights())
    assert len(runs) == len(short_demo)
    assert all(r.iterations_used == 0 and len(r.trajectory) == 1 for r in runs)
    z = encode(small_nets, short_demo.positions())
    np.testing.assert_allclose(np.stack([r.angles for r in runs]), decode(small_nets, z), atol=1e-12)


def test_retargeted_angles_stay_within_limits(small_nets, short_demo):
    robot = small_nets.robot
    angles, runs = retarget_sequence(short_demo.frames, small_nets, ObjectiveWeights(), options=QUICK, chunk=3)
    assert angles.shape == (len(short_demo), robot.n_dof)
    assert len(runs) == len(short_demo)
    assert np.all(angles >= robot.lower) and np.all(angles <= robot.upper)
    assert count_limit_violations(angles, robot) == 0


def test_unknown_mode_and_init(small_nets, short_demo):
    with pytest.raises(ConfigurationError):
        retarget_frames(short_demo.frames, small_nets, ObjectiveWeights(), mode="ik")
    with pytest.raises(ConfigurationError):
        initial_latents(small_nets, short_demo.frames, init="zeros")
    with pytest.raises(ConfigurationError):
        stats_init(small_nets, 0, 2)


def test_random_init_is_seeded():
    a = random_init(0.5, 7, (2, 3, 4))
    np.testing.assert_array_equal(a, random_init(0.5, 7, (2, 3, 4)))
    assert not np.array_equal(a, random_init(0.5, 8, (2, 3, 4)))
    with pytest.raises(ConfigurationError):
        random_init(-1.0, 0, (1,))


def test_warm_start_chains_latents(small_nets, short_demo):
    frames = short_demo.frames[:3]
    angles, runs = retarget_sequence(frames, small_nets, ObjectiveWeights(), options=QUICK, warm_start=True)
    assert angles.shape == (3, small_nets.robot.n_dof)
    second = latent_optimize(frames[1], runs[0].z, small_nets, ObjectiveWeights(), QUICK)
    np.testing.assert_allclose(runs[1].angles, second.angles, atol=1e-12)


def test_baseline_leaves_narrow_limits_without_penalty(arm5, short_demo):
    data = robot_to_dict(arm5)
    for joint in data["joints"]:
        if "limits" in joint:
            joint["limits"] = [-0.05, 0.05]
    narrow = robot_from_dict(data)
    runs = baseline_optimize_batch(short_demo.frames, narrow, ObjectiveWeights(lim=0.0),
                                   LatentOptions(max_iters=40, lr=5e-2))
    assert sum(r.limit_violations for r in runs) >= 1
    assert all(r.z is None for r in runs)


def test_baseline_rejects_unknown_init(arm5, short_demo):
    with pytest.raises(ConfigurationError):
        baseline_optimize_batch(short_demo.frames, arm5, ObjectiveWeights(), init="zero")
    with pytest.raises(ConfigurationError):
        baseline_optimize_batch(short_demo.frames, arm5, ObjectiveWeights(), init="explicit")


def test_train_returns_a_trained_copy(small_nets, short_demo):
    before = {k: v.copy() for k, v in small_nets.params.items()}
    options = TrainOptions(batch=4, lr=1e-3, epochs=2, patience=5)
    result = train(short_demo.frames, small_nets, ObjectiveWeights(), options)
    assert result.epochs_run == 2 and len(result.losses) == 2
    assert all(np.array_equal(small_nets.params[k], before[k]) for k in before)
    assert any(not np.array_equal(result.nets.params[k], before[k]) for k in before)
    assert result.nets.latent_mean.shape == small_nets.latent_shape
    assert np.all(result.nets.latent_std >= 0)


def test_supervised_training_needs_references(small_nets, short_demo):
    with pytest.raises(ConfigurationError):
        train(short_demo.frames, small_nets, ObjectiveWeights(), TrainOptions(objective="supervised", epochs=1))
    references = np.zeros((len(short_demo), small_nets.robot.n_dof))
    result = train(short_demo.frames, small_nets, ObjectiveWeights(),
                   TrainOptions(objective="supervised", epochs=1, batch=8), references)
    assert np.isfinite(result.losses[0])


def test_option_validation():
    assert LatentOptions().validate() == []
    assert LatentOptions(max_iters=101).validate()
    assert TrainOptions(objective="rl").validate()
    with pytest.raises(UsageError):
        train([], None, ObjectiveWeights())


def test_single_frame_entry_points(small_nets, short_demo):
    frame = short_demo.frames[1]
    angles, run = retarget_frame(frame, small_nets, ObjectiveWeights(), options=QUICK)
    np.testing.assert_array_equal(angles, run.angles)
    ff_angles, ff_run = retarget_frame(frame, small_nets, ObjectiveWeights(), mode="feedforward")
    assert ff_run.iterations_used == 0
    assert run.best.total <= ff_run.best.total + 1e-9
    base = baseline_joint_optimize(frame, small_nets.robot, ObjectiveWeights(lim=10.0), QUICK, init="random", seed=3)
    assert base.best.total <= base.initial.total
    assert base.angles.shape == (small_nets.robot.n_dof,)


def test_zero_learning_rate_leaves_weights_untouched(small_nets, short_demo):
    result = train(short_demo.frames, small_nets, ObjectiveWeights(), TrainOptions(batch=4, lr=0.0, epochs=2))
    for name, value in small_nets.params.items():
        np.testing.assert_array_equal(result.nets.params[name], value)


def test_training_is_reproducible(small_nets, short_demo):
    options = TrainOptions(batch=3, lr=1e-3, epochs=3, seed=9)
    a = train(short_demo.frames, small_nets, ObjectiveWeights(), options)
    b = train(short_demo.frames, small_nets, ObjectiveWeights(), options)
    assert a.losses == b.losses
    assert all(np.array_equal(a.nets.params[k], b.nets.params[k]) for k in a.nets.params)


def test_training_on_one_frame_lowers_its_loss(small_nets, short_demo):
    options = TrainOptions(batch=1, lr=1e-3, epochs=25, patience=100)
    result = train(short_demo.frames[:1], small_nets, ObjectiveWeights(), options)
    assert result.epochs_run == 25
    assert result.losses[-1] < result.losses[0]


def test_random_init_spread():
    np.testing.assert_array_equal(random_init(0.0, 3, (4, 5)), np.zeros((4, 5)))
    draws = random_init(0.5, 11, (1000, 1000))
    assert abs(draws.mean()) < 0.01 * 0.5
    assert draws.std() == pytest.approx(0.5, rel=0.01)


def test_prior_alone_shrinks_the_latent(small_nets, short_demo):
    prior_only = ObjectiveWeights(ee=0.0, ori=0.0, elb=0.0, fin=0.0, col=0.0)
    z0 = random_init(1.0, 5, small_nets.latent_shape)
    run = latent_optimize(short_demo.frames[0], z0, small_nets, prior_only, QUICK)
    assert run.best.total < run.initial.total
    assert np.linalg.norm(run.z) < np.linalg.norm(z0)
