"""
Sub-command implementations behind main.py.

Every command writes its outputs into `<output_dir>/<command>/` next to a
manifest.json and returns a process exit code.
"""
import logging
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import check_gradient
from config import RunConfig
from dataio import DemoSequence, load_demo, load_demo_dir, load_robot, make_dataset, save_dataset, synth_demo
from errors import EXIT_NUMERIC, EXIT_OK, ConfigurationError, DegeneratePointError
from graphnet import (GraphConvLayer, RetargetNets, decode, graph_conv, init_weights, load_checkpoint,
                      robot_graph, save_checkpoint)
from kinematics import RobotModel, forward_kinematics, marker_positions, pair_distances
from metrics import MotionReport, motion_report, tracking_error
from objective import (DemoFrame, DemoTargets, ObjectiveWeights, collision_loss, elbow_loss,
                       end_effector_loss, finger_loss, joint_limit_loss, orientation_loss, total_objective)
from retarget import (OptimRun, baseline_optimize_batch, count_limit_violations, retarget_frames,
                      retarget_sequence, train)
from storage import StorageHandler, read_trajectory

logger = logging.getLogger(__name__)

LOSS_HEADER = ("frame", "iteration", "ee", "ori", "elb", "fin", "col", "reg", "total")

# Per-process state for --jobs workers
_WORKER: Dict = {}


def _init_worker(nets: RetargetNets, weights: ObjectiveWeights, settings: Dict) -> None:
    _WORKER.clear()
    _WORKER.update(nets=nets, weights=weights, settings=settings)


def _retarget_motion(job: Tuple[int, List[DemoFrame]]) -> Tuple[int, np.ndarray, List[OptimRun], float]:
    index, frames = job
    s = _WORKER["settings"]
    start = time.perf_counter()
    angles, runs = retarget_sequence(frames, _WORKER["nets"], _WORKER["weights"], s["mode"], s["init"],
                                     s["options"], s["seed"] + index, s["sigma"], s["warm_start"], s["chunk"])
    return index, angles, runs, time.perf_counter() - start


def _flatten(sequences: Sequence[DemoSequence]) -> List[DemoFrame]:
    return [frame for seq in sequences for frame in seq.frames]


class RetargetApp:
    """Command-line application: one `cmd_*` method per sub-command."""

    def __init__(self, config: RunConfig, storage: Optional[StorageHandler] = None):
        """Initialize the application.

        Args:
            config: validated run configuration
            storage: output handler, defaults to one rooted at config.output_dir
        """
        self.config = config
        self.storage = storage or StorageHandler(config.output_dir)
        self._robot: Optional[RobotModel] = None
        self._dataset: Optional[Tuple[List[DemoSequence], List[DemoSequence]]] = None

    # ----- inputs -------------------------------------------------------

    @property
    def robot(self) -> RobotModel:
        if self._robot is None:
            self._robot = load_robot(self.config.robot)
            logger.info(f"Loaded robot '{self._robot.name}' with {self._robot.n_dof} actuated joints")
        return self._robot

    def _synthetic(self) -> Tuple[List[DemoSequence], List[DemoSequence]]:
        if self._dataset is None:
            c = self.config
            self._dataset = make_dataset(c.n_train, c.n_test, c.seed, (c.frame_min, c.frame_max), c.dt,
                                         c.difficulty, c.style)
        return self._dataset

    def _load(self, path: str) -> List[DemoSequence]:
        sequences = load_demo_dir(path) if os.path.isdir(path) else [load_demo(path)]
        logger.info(f"Loaded {len(sequences)} demonstration(s) from {path}")
        return sequences

    def _limit(self, sequences: List[DemoSequence]) -> List[DemoSequence]:
        limit = self.config.frame_limit
        if limit is None:
            return sequences
        return [DemoSequence(s.frames[:limit], s.dt, s.skeleton, s.label) for s in sequences]

    def train_sequences(self) -> List[DemoSequence]:
        if self.config.train_demos:
            return self._limit(self._load(self.config.train_demos))
        return self._limit(self._synthetic()[0])

    def test_sequences(self) -> List[DemoSequence]:
        if self.config.demos:
            return self._limit(self._load(self.config.demos))
        return self._limit(self._synthetic()[1])

    def _fresh_nets(self, architecture: Optional[str] = None, activation: Optional[str] = None) -> RetargetNets:
        c = self.config
        return init_weights(c.seed, self.robot, architecture=architecture or c.architecture,
                            activation=activation or c.activation, bound=c.bound, d_z=c.d_z,
                            bidirectional=c.bidirectional)

    def nets(self) -> RetargetNets:
        """Trained nets from --checkpoint, or from a previous train run in the same output directory."""
        path = self.config.checkpoint
        if not path:
            previous = os.path.join(self.storage.data_dir, "train", "nets.npz")
            if not os.path.exists(previous):
                raise ConfigurationError("checkpoint: no checkpoint given and no previous train run found")
            path = previous
        return load_checkpoint(path, self.robot)

    def _references(self, frames: Sequence[DemoFrame]) -> np.ndarray:
        """Joint-space baseline solutions, clipped into the limits, as supervised targets."""
        robot = self.robot
        out = []
        for start in range(0, len(frames), self.config.chunk):
            runs = baseline_optimize_batch(frames[start:start + self.config.chunk], robot, self.config.weights,
                                           self.config.optim)
            out += [r.angles for r in runs]
        logger.info(f"Computed {len(out)} supervised reference poses")
        return np.clip(np.array(out), robot.lower, robot.upper)

    def _retarget_all(self, sequences: Sequence[DemoSequence], nets: RetargetNets,
                      mode: Optional[str] = None) -> List[Tuple[np.ndarray, List[OptimRun], float]]:
        """Retarget every motion, in parallel when jobs > 1; results come back in motion order."""
        c = self.config
        settings = {"mode": mode or c.mode, "init": c.init, "options": c.optim, "seed": c.seed,
                    "sigma": c.sigma, "warm_start": c.warm_start, "chunk": c.chunk}
        jobs = [(i, seq.frames) for i, seq in enumerate(sequences)]
        if c.jobs > 1 and len(jobs) > 1:
            with mp.Pool(processes=min(c.jobs, len(jobs)), initializer=_init_worker,
                         initargs=(nets, c.weights, settings)) as pool:
                results = pool.map(_retarget_motion, jobs)
        else:
            _init_worker(nets, c.weights, settings)
            results = [_retarget_motion(job) for job in jobs]
        results.sort(key=lambda r: r[0])
        return [(angles, runs, seconds) for _, angles, runs, seconds in results]

    # ----- commands -----------------------------------------------------

    def cmd_synth(self) -> int:
        """Write the synthetic train and test demonstration sets."""
        train_set, test_set = self._synthetic()
        rows = []
        for split, sequences in (("train", train_set), ("test", test_set)):
            directory = os.path.join(self.storage.run_dir("synth"), split)
            save_dataset(sequences, directory)
            rows += [[seq.label, split, len(seq), seq.dt] for seq in sequences]
        self.storage.write_csv("synth", "sequences.csv", ["motion", "split", "frames", "dt"], rows)
        self.storage.write_manifest("synth", self.config)
        logger.info(f"Wrote {len(train_set)} train and {len(test_set)} test demonstrations")
        return EXIT_OK

    def _train_nets(self, frames: Sequence[DemoFrame], objective: str, references: Optional[np.ndarray] = None,
                    architecture: Optional[str] = None, activation: Optional[str] = None):
        options = self.config.train
        if options.objective != objective:
            options = replace(options, objective=objective)
        return train(frames, self._fresh_nets(architecture, activation), self.config.weights, options, references)

    def cmd_train(self) -> int:
        """Train encoder and decoder; write nets.npz and loss_curve.csv."""
        frames = _flatten(self.train_sequences())
        logger.info(f"Training on {len(frames)} frames ({self.config.architecture}, {self.config.activation})")
        references = self._references(frames) if self.config.train.objective == "supervised" else None
        result = self._train_nets(frames, self.config.train.objective, references)
        path = self.storage.path("train", "nets.npz")
        save_checkpoint(result.nets, path, extra={"epochs_run": result.epochs_run, "early_exit": result.early_exit,
                                                  "config_hash": self.config.config_hash()})
        self.storage.write_csv("train", "loss_curve.csv", ["epoch", "mean_loss"],
                               ([k + 1, loss] for k, loss in enumerate(result.losses)))
        self.storage.write_manifest("train", self.config, {"checkpoint": path, "epochs_run": result.epochs_run,
                                                           "early_exit": result.early_exit})
        return EXIT_OK

    def cmd_retarget(self) -> int:
        """Retarget every demonstration; write trajectories, per-frame loss logs and a summary."""
        nets = self.nets()
        robot = nets.robot
        sequences = self.test_sequences()
        summary, timing = [], []
        for seq, (angles, runs, seconds) in zip(sequences, self._retarget_all(sequences, nets)):
            self.storage.write_trajectory("retarget", seq.label, angles, robot.dof_names, seq.dt)
            rows = ([k, it] + b.as_row() for k, run in enumerate(runs) for it, b in run.trajectory)
            self.storage.write_csv("retarget", os.path.join("losses", f"{seq.label}.csv"), LOSS_HEADER, rows)
            reasons = [r.stop_reason for r in runs]
            summary.append([seq.label, len(seq), self.config.mode, self.config.init,
                            float(np.mean([r.iterations_used for r in runs])),
                            float(np.mean([r.initial.total for r in runs])),
                            float(np.mean([r.best.total for r in runs])),
                            count_limit_violations(angles, robot),
                            reasons.count("plateau"), reasons.count("max_iters")])
            timing.append([seq.label, seconds])
            logger.info(f"Retargeted {seq.label}: {len(seq)} frames, mean final loss {summary[-1][6]:.4g}")
        self.storage.write_csv("retarget", "retarget.csv",
                               ["motion", "frames", "mode", "init", "mean_iterations", "mean_initial_loss",
                                "mean_final_loss", "limit_violations", "stopped_plateau", "stopped_max_iters"],
                               summary)
        self.storage.write_csv("retarget", "timing.csv", ["motion", "seconds"], timing)
        self.storage.write_manifest("retarget", self.config, {"motions": len(sequences), "robot": robot.name})
        return EXIT_OK

    def _trajectory_source(self, robot: RobotModel) -> Optional[Dict]:
        """Manifest of the retarget run in this output directory, when it wrote the given trajectories."""
        written = os.path.join(self.storage.data_dir, "retarget", "trajectories")
        if os.path.abspath(self.config.trajectories) != os.path.abspath(written):
            return None
        manifest = self.storage.load_json("retarget", "manifest.json")
        if manifest is None:
            logger.warning(f"No retarget manifest next to {self.config.trajectories}")
            return None
        if manifest.get("robot", robot.name) != robot.name:
            raise ConfigurationError(f"trajectories in {self.config.trajectories} were retargeted for robot "
                                     f"'{manifest['robot']}', not '{robot.name}'")
        return manifest

    def cmd_eval(self) -> int:
        """Per-motion report: Frechet distance, velocity and acceleration error, collisions."""
        sequences = self.test_sequences()
        robot = self.robot
        reports: List[MotionReport] = []
        timing = []
        source = None
        if self.config.trajectories:
            source = self._trajectory_source(robot)
            for seq in sequences:
                start = time.perf_counter()
                angles = read_trajectory(os.path.join(self.config.trajectories, f"{seq.label}.csv"), robot.dof_names)
                reports.append(motion_report(seq.label, seq.frames, angles, robot, seq.dt))
                timing.append([seq.label, time.perf_counter() - start])
        else:
            nets = self.nets()
            for seq, (angles, runs, seconds) in zip(sequences, self._retarget_all(sequences, nets)):
                reports.append(motion_report(seq.label, seq.frames, angles, robot, seq.dt,
                                             [r.iterations_used for r in runs]))
                timing.append([seq.label, seconds])
        self.storage.write_csv("eval", "report.csv", MotionReport.HEADER, (r.as_row() for r in reports))
        self.storage.write_csv("eval", "timing.csv", ["motion", "seconds"], timing)
        extra = {"motions": len(reports)}
        if source is not None:
            extra["source_config_hash"] = source.get("config_hash")
        self.storage.write_manifest("eval", self.config, extra)
        if reports:
            logger.info(f"Mean Frechet distance over {len(reports)} motions: "
                        f"{np.mean([r.frechet for r in reports]):.4f} m")
        return EXIT_OK

    def cmd_compare_init(self) -> int:
        """Best-so-far loss curves of latent optimisation from each initialisation."""
        c = self.config
        nets = self.nets()
        frames = _flatten(self.test_sequences())
        inits = [("neural", "neural", c.sigma)]
        inits += [(f"random_var{v:g}", "random", float(np.sqrt(v))) for v in c.compare_variances]
        if nets.latent_mean is not None:
            inits.append(("stats", "stats", 1.0))
        else:
            logger.warning("Checkpoint has no training latent statistics; skipping the stats init")

        best: Dict[str, np.ndarray] = {}
        iterations: Dict[str, np.ndarray] = {}
        length = c.optim.max_iters + 1
        for label, init, sigma in inits:
            runs = retarget_frames(frames, nets, c.weights, "latent_opt", init, c.optim, c.seed, sigma, c.chunk)
            curves = np.empty((len(runs), length))
            for k, run in enumerate(runs):
                so_far = np.minimum.accumulate(run.totals())
                curves[k, :len(so_far)] = so_far
                curves[k, len(so_far):] = so_far[-1]
            best[label] = curves
            iterations[label] = np.array([r.iterations_used for r in runs], dtype=float)
            logger.info(f"{label}: mean loss {curves[:, 0].mean():.4g} -> {curves[:, -1].mean():.4g}")

        labels = [label for label, _, _ in inits]
        means = {label: best[label].mean(axis=0) for label in labels}
        self.storage.write_csv("compare-init", "curves.csv", ["iteration"] + labels,
                               ([i] + [float(means[label][i]) for label in labels] for i in range(length)))

        others = [label for label in labels if label != "neural"]
        reference = np.mean([best[label][:, -1] for label in others], axis=0) if others else None
        summary = []
        for label in labels:
            curves = best[label]
            if reference is None:
                reach = float("nan")
            else:
                hit = curves <= reference[:, None]
                reach = float(np.mean(np.where(hit.any(axis=1), hit.argmax(axis=1), length)))
            summary.append([label, float(curves[:, 0].mean()), float(curves[:, -1].mean()),
                            float(iterations[label].mean()), reach])
        self.storage.write_csv("compare-init", "summary.csv",
                               ["init", "initial_loss", "final_loss", "mean_iterations", "iterations_to_reference"],
                               summary)
        self.storage.write_manifest("compare-init", self.config, {"frames": len(frames), "inits": labels})
        return EXIT_OK

    def cmd_ablate(self) -> int:
        """Train and evaluate every architecture x objective x activation x mode combination."""
        c = self.config
        frames = _flatten(self.train_sequences())
        tests = self.test_sequences()
        objectives = ["fk"] + (["supervised"] if c.ablate_supervised else [])
        references = self._references(frames) if c.ablate_supervised else None
        rows = []
        for architecture in c.ablate_architectures:
            for objective in objectives:
                for activation in c.ablate_activations:
                    result = self._train_nets(frames, objective, references if objective == "supervised" else None,
                                              architecture, activation)
                    method = ("GAE" if architecture == "graph" else "AE") + ("+FK" if objective == "fk" else "")
                    for mode in c.ablate_modes:
                        outputs = self._retarget_all(tests, result.nets, mode)
                        errors = [tracking_error(seq.frames, angles, self.robot)
                                  for seq, (angles, _, _) in zip(tests, outputs)]
                        runs = [run for _, motion_runs, _ in outputs for run in motion_runs]
                        violations = sum(count_limit_violations(angles, self.robot) for angles, _, _ in outputs)
                        rows.append([method, architecture, objective, activation, mode,
                                     float(np.mean(errors)) if errors else float("nan"),
                                     float(np.mean([r.best.total for r in runs])) if runs else float("nan"),
                                     float(np.mean([r.iterations_used for r in runs])) if runs else 0.0,
                                     violations, result.epochs_run])
                        logger.info(f"{method} {activation} {mode}: tracking error {rows[-1][5]:.4f} m")
        self.storage.write_csv("ablate", "ablation.csv",
                               ["method", "architecture", "objective", "activation", "mode", "tracking_error",
                                "mean_loss", "mean_iterations", "limit_violations", "epochs_run"], rows)
        self.storage.write_manifest("ablate", self.config, {"runs": len(rows)})
        return EXIT_OK

    def cmd_gradcheck(self) -> int:
        """Finite-difference check of every differentiable component; exit 3 on any failure."""
        c = self.config
        results = [run_gradcheck(name, self.robot, c.gradcheck_seeds, c.gradcheck_tolerance, c.seed,
                                 c.activation) for name in GRADCHECK_COMPONENTS]
        self.storage.write_csv("gradcheck", "gradcheck.csv",
                               ["component", "points", "skipped", "max_error", "passed"],
                               ([r.component, r.points, r.skipped, r.max_error, r.passed] for r in results))
        self.storage.write_manifest("gradcheck", self.config, {"passed": all(r.passed for r in results)})
        failed = [r.component for r in results if not r.passed]
        if failed:
            logger.error(f"Gradient check failed for: {', '.join(failed)}")
            return EXIT_NUMERIC
        logger.info(f"Gradient check passed for all {len(results)} components")
        return EXIT_OK


# ----- gradient checking -----------------------------------------------------

@dataclass
class GradcheckResult:
    component: str
    points: int
    skipped: int
    max_error: float
    passed: bool


GradcheckCase = Tuple[Callable, np.ndarray]


def _random_angles(rng: np.random.Generator, robot: RobotModel, margin: float = 0.0) -> np.ndarray:
    return rng.uniform(robot.lower - margin, robot.upper + margin)


def _demo_targets(rng: np.random.Generator, robot: RobotModel) -> DemoTargets:
    demo = synth_demo(int(rng.integers(0, 2 ** 31)), 1)
    return DemoTargets.from_frames(demo.frames, robot)


def _batched_fk(robot: RobotModel, x):
    return forward_kinematics(robot, ad.reshape(x, (1, robot.n_dof)))


def _case_fk(rng, robot, activation) -> GradcheckCase:
    names = [m.name for m in robot.markers]
    w = rng.normal(size=(len(names), 3))

    def f(x):
        sites = marker_positions(robot, forward_kinematics(robot, x), names)
        return ad.reduce_sum(ad.mul(ad.concat([ad.reshape(sites[n], (1, 3)) for n in names], axis=0), w))
    return f, _random_angles(rng, robot)


def _loss_case(loss: Callable) -> Callable:
    def build(rng, robot, activation) -> GradcheckCase:
        targets = _demo_targets(rng, robot)
        return (lambda x: ad.reduce_sum(loss(robot, _batched_fk(robot, x), targets))), _random_angles(rng, robot)
    return build


def _case_orientation(rng, robot, activation) -> GradcheckCase:
    targets = _demo_targets(rng, robot)

    def f(x):
        transforms = _batched_fk(robot, x)
        rotations = [transforms.rotations[robot.joint_index[chain.wrist_frame]] for chain in robot.chains]
        return ad.reduce_sum(orientation_loss(rotations, [targets.rotations[:, k] for k in range(len(rotations))]))
    return f, _random_angles(rng, robot)


def _case_finger(rng, robot, activation) -> Optional[GradcheckCase]:
    if not any(chain.fingers for chain in robot.chains):
        return None
    return _loss_case(finger_loss)(rng, robot, activation)


def _case_collision(rng, robot, activation) -> Optional[GradcheckCase]:
    """Random pose with at least one capsule pair inside d_min."""
    if not robot.collision_pairs:
        return None
    poses = rng.uniform(robot.lower, robot.upper, size=(256, robot.n_dof))
    distances = np.stack(pair_distances(robot, forward_kinematics(robot, poses)), axis=1)
    active = np.flatnonzero((distances < robot.d_min).any(axis=1))
    if not active.size:
        raise DegeneratePointError("no sampled pose brings a capsule pair inside d_min")
    return (lambda x: ad.reduce_sum(collision_loss(robot, _batched_fk(robot, x)))), poses[active[0]]


def _case_joint_limit(rng, robot, activation) -> GradcheckCase:
    return (lambda x: ad.reduce_sum(joint_limit_loss(x, robot.lower, robot.upper))), \
        _random_angles(rng, robot, margin=0.5)


def _case_graph_conv(rng, robot, activation) -> GradcheckCase:
    graph = robot_graph(robot)
    layer = GraphConvLayer("check", 4, 3, graph.edge_ch, activation)
    layer.init(rng)
    w = rng.normal(size=(graph.n_nodes, 3))
    return (lambda x: ad.reduce_sum(ad.mul(graph_conv(layer, graph, x), w))), \
        rng.normal(size=(graph.n_nodes, 4))


def _latent_slice(rng, nets: RetargetNets):
    """Latent code whose row `k` is the checked variable; the other rows stay fixed."""
    base = rng.normal(size=nets.latent_shape)
    k = int(rng.integers(nets.latent_shape[0]))
    onehot = np.zeros((nets.latent_shape[0], 1))
    onehot[k] = 1.0
    point = base[k].copy()
    base[k] = 0.0
    return (lambda x: ad.add(base, ad.mul(onehot, x))), point


def _case_decode(rng, robot, activation) -> GradcheckCase:
    nets = init_weights(int(rng.integers(0, 2 ** 31)), robot, activation=activation)
    latent, point = _latent_slice(rng, nets)
    w = rng.normal(size=robot.n_dof)
    return (lambda x: ad.reduce_sum(ad.mul(decode(nets, latent(x)), w))), point


def _case_objective_z(rng, robot, activation) -> GradcheckCase:
    nets = init_weights(int(rng.integers(0, 2 ** 31)), robot, activation=activation)
    latent, point = _latent_slice(rng, nets)
    targets = _demo_targets(rng, robot)
    weights = ObjectiveWeights()

    def f(x):
        z = ad.reshape(latent(x), (1,) + nets.latent_shape)
        return ad.reduce_sum(total_objective(robot, decode(nets, z), targets, weights, z=z).total)
    return f, point


GRADCHECK_COMPONENTS: Dict[str, Callable] = {
    "fk": _case_fk,
    "end_effector": _loss_case(end_effector_loss),
    "orientation": _case_orientation,
    "elbow": _loss_case(elbow_loss),
    "finger": _case_finger,
    "collision": _case_collision,
    "joint_limit": _case_joint_limit,
    "graph_conv": _case_graph_conv,
    "decode": _case_decode,
    "objective_z": _case_objective_z,
}


def run_gradcheck(component: str, robot: RobotModel, seeds: int = 100, tolerance: float = 1e-4, seed: int = 0,
                  activation: str = "leaky_relu", attempts: int = 20, kink_margin: float = 1e-4) -> GradcheckResult:
    """Worst relative gradient error of one component over seeded random points.

    Points that land within `kink_margin` of a kink are redrawn, at most
    `attempts` times per seed; a seed that never yields a usable point counts
    as skipped.
    """
    if component not in GRADCHECK_COMPONENTS:
        raise ConfigurationError(f"unknown gradcheck component '{component}'")
    build = GRADCHECK_COMPONENTS[component]
    worst, points, skipped = 0.0, 0, 0
    for s in range(seeds):
        rng = np.random.default_rng([seed, list(GRADCHECK_COMPONENTS).index(component), s])
        for _ in range(attempts):
            try:
                case = build(rng, robot, activation)
                if case is None:
                    logger.info(f"{component}: not applicable to robot '{robot.name}'")
                    return GradcheckResult(component, 0, 0, 0.0, True)
                f, point = case
                worst = max(worst, check_gradient(f, point, min_grad=1e-6, kink_margin=kink_margin))
                points += 1
                break
            except DegeneratePointError as e:
                logger.debug(f"{component} seed {s}: redrawing ({e})")
        else:
            skipped += 1
    passed = points > 0 and worst < tolerance
    logger.info(f"{component}: {points} points, max relative error {worst:.3e} ({'pass' if passed else 'FAIL'})")
    return GradcheckResult(component, points, skipped, worst, passed)
