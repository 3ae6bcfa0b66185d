"""
Training, latent-space optimisation and the direct joint-angle baseline.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tape
from errors import ConfigurationError, NumericalError, UsageError
from graphnet import RetargetNets, decode, encode
from kinematics import RobotModel
from objective import (DemoFrame, DemoTargets, LossBreakdown, ObjectiveWeights, latent_regularizer,
                       supervised_loss, total_objective)

logger = logging.getLogger(__name__)

MODES = ("feedforward", "latent_opt")
INITS = ("neural", "random", "stats")
BASELINE_INITS = ("mid", "random", "explicit")


class Adam:
    """Adam over a dict of numpy arrays, updated in place."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             mask: Optional[Dict[str, np.ndarray]] = None) -> None:
        """Apply one update; where `mask` is given only the marked entries move."""
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if mask is not None and name in mask:
                keep = mask[name]
                update = np.where(keep, update, 0.0)
                m = np.where(keep, m, self.m.get(name, np.zeros_like(g)))
                v = np.where(keep, v, self.v.get(name, np.zeros_like(g)))
            self.m[name] = m
            self.v[name] = v
            params[name] -= update


@dataclass(frozen=True)
class LatentOptions:
    max_iters: int = 100
    plateau: int = 5
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> List[str]:
        problems = []
        if not 1 <= self.max_iters <= 100:
            problems.append(f"optim.max_iters: must be within [1, 100], got {self.max_iters}")
        if self.plateau < 1:
            problems.append(f"optim.plateau: must be at least 1, got {self.plateau}")
        if self.lr < 0:
            problems.append(f"optim.lr: must be >= 0, got {self.lr}")
        return problems


@dataclass(frozen=True)
class TrainOptions:
    batch: int = 16
    lr: float = 1e-4
    epochs: int = 200
    clip: float = 10.0
    patience: int = 10
    min_delta: float = 1e-6
    objective: str = "fk"
    frame_stride: int = 1
    seed: int = 0

    def validate(self) -> List[str]:
        problems = []
        if self.batch < 1:
            problems.append(f"train.batch: must be positive, got {self.batch}")
        if self.lr < 0:
            problems.append(f"train.lr: must be >= 0, got {self.lr}")
        if self.epochs < 1:
            problems.append(f"train.epochs: must be positive, got {self.epochs}")
        if self.objective not in ("fk", "supervised"):
            problems.append(f"train.objective: must be fk or supervised, got '{self.objective}'")
        if self.frame_stride < 1:
            problems.append(f"train.frame_stride: must be positive, got {self.frame_stride}")
        return problems


@dataclass
class OptimRun:
    """One frame's optimisation: the loss at every evaluated iterate and the best one."""

    trajectory: List[Tuple[int, LossBreakdown]]
    z: Optional[np.ndarray]
    angles: np.ndarray
    iterations_used: int
    stop_reason: str
    best_iteration: int = 0
    limit_violations: int = 0

    @property
    def initial(self) -> LossBreakdown:
        return self.trajectory[0][1]

    @property
    def best(self) -> LossBreakdown:
        return self.trajectory[self.best_iteration][1]

    def totals(self) -> List[float]:
        return [b.total for _, b in self.trajectory]


@dataclass
class TrainResult:
    nets: RetargetNets
    losses: List[float]
    epochs_run: int
    early_exit: bool


def _descend(x0: np.ndarray, evaluate: Callable, options: LatentOptions, tape: Tape, label: str
             ) -> Tuple[List[OptimRun], np.ndarray]:
    """Per-frame Adam descent with best-iterate tracking and the plateau stopping rule.

    `evaluate(tape, x)` returns (ObjectiveTerms, angles) for the (B, ...) iterate x.
    A frame stops once `options.plateau` consecutive iterates fail to beat its best
    loss, or after `options.max_iters` updates; stopped frames no longer move.
    """
    x = np.array(x0, dtype=float)
    batch = x.shape[0]
    adam = Adam(options.lr, options.beta1, options.beta2, options.eps)
    best = np.full(batch, np.inf)
    best_x = x.copy()
    best_angles = None
    best_iter = np.zeros(batch, dtype=int)
    stale = np.zeros(batch, dtype=int)
    active = np.ones(batch, dtype=bool)
    used = np.zeros(batch, dtype=int)
    reasons = [""] * batch
    history: List[List[Tuple[int, LossBreakdown]]] = [[] for _ in range(batch)]
    mark = tape.checkpoint()

    for iteration in range(options.max_iters + 1):
        tape.truncate(mark)
        xv = tape.variable(x)
        terms, angles = evaluate(tape, xv)
        totals = ad.payload(terms.total)
        angle_data = ad.payload(angles)
        if best_angles is None:
            best_angles = angle_data.copy()
        if iteration == 0 and not np.all(np.isfinite(totals)):
            bad = int(np.flatnonzero(~np.isfinite(totals))[0])
            raise NumericalError(f"{label}: non-finite objective at the initial iterate", frame=bad)
        breakdowns = LossBreakdown.from_terms(terms)
        for b in np.flatnonzero(active):
            history[b].append((iteration, breakdowns[b]))
            if np.isfinite(totals[b]) and totals[b] < best[b]:
                best[b] = totals[b]
                best_x[b] = x[b]
                best_angles[b] = angle_data[b]
                best_iter[b] = len(history[b]) - 1
                stale[b] = 0
            elif iteration > 0:
                stale[b] += 1
            if stale[b] >= options.plateau:
                active[b] = False
                reasons[b] = "plateau"
            elif iteration == options.max_iters:
                active[b] = False
                reasons[b] = "max_iters"
        if not active.any():
            break
        tape.backward(ad.reduce_sum(terms.total))
        grad = xv.grad
        keep = np.broadcast_to(active.reshape((batch,) + (1,) * (x.ndim - 1)), x.shape)
        holder = {"x": x}
        adam.step(holder, {"x": grad}, mask={"x": keep})
        x = holder["x"]
        used[active] += 1
        logger.debug(f"{label} iteration {iteration + 1}: active {int(active.sum())}/{batch}, "
                     f"mean best {float(np.mean(best)):.6g}")

    runs = [OptimRun(history[b], best_x[b].copy(), best_angles[b].copy(), int(used[b]), reasons[b],
                     int(best_iter[b])) for b in range(batch)]
    return runs, best_x


def random_init(sigma: float, seed: int, shape: Tuple[int, ...]) -> np.ndarray:
    """z0 ~ N(0, sigma^2) i.i.d. per entry."""
    if sigma < 0:
        raise ConfigurationError(f"latent init sigma must be >= 0, got {sigma}")
    return np.random.default_rng(seed).normal(0.0, sigma, size=shape)


def stats_init(nets: RetargetNets, seed: int, batch: int) -> np.ndarray:
    """Gaussian draw with the per-entry latent mean and spread seen on the training set."""
    if nets.latent_mean is None:
        raise ConfigurationError("checkpoint carries no training latent statistics")
    noise = np.random.default_rng(seed).normal(0.0, 1.0, size=(batch,) + nets.latent_shape)
    return nets.latent_mean + nets.latent_std * noise


def _positions(frames: Sequence[DemoFrame]) -> np.ndarray:
    return np.stack([f.positions for f in frames])


def initial_latents(nets: RetargetNets, frames: Sequence[DemoFrame], init: str = "neural",
                    seed: int = 0, sigma: float = 1.0) -> np.ndarray:
    """Starting latent codes (B, N_r, d_z) for a batch of frames."""
    if init == "neural":
        return encode(nets, _positions(frames))
    if init == "random":
        return random_init(sigma, seed, (len(frames),) + nets.latent_shape)
    if init == "stats":
        return stats_init(nets, seed, len(frames))
    raise ConfigurationError(f"init must be one of {INITS}, got '{init}'")


def latent_optimize_batch(frames: Sequence[DemoFrame], z0: np.ndarray, nets: RetargetNets,
                          weights: ObjectiveWeights, options: LatentOptions = LatentOptions()) -> List[OptimRun]:
    """Optimise each frame's latent code against a frozen decoder; frames run side by side."""
    if not frames:
        return []
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (len(frames),) + nets.latent_shape:
        raise UsageError(f"initial latents must have shape {(len(frames),) + nets.latent_shape}, got {z0.shape}")
    targets = DemoTargets.from_frames(frames, nets.robot)
    tape = Tape()
    params = nets.bind(tape, trainable=False)

    def evaluate(tape, z):
        angles = decode(nets, z, params)
        return total_objective(nets.robot, angles, targets, weights, z=z), angles

    runs, _ = _descend(z0, evaluate, options, tape, "latent")
    return runs


def latent_optimize(demo: DemoFrame, z0: np.ndarray, nets: RetargetNets, weights: ObjectiveWeights,
                    options: LatentOptions = LatentOptions()) -> OptimRun:
    return latent_optimize_batch([demo], np.asarray(z0, dtype=float)[None], nets, weights, options)[0]


def feedforward_batch(frames: Sequence[DemoFrame], nets: RetargetNets, weights: ObjectiveWeights,
                      z0: Optional[np.ndarray] = None) -> List[OptimRun]:
    """Decode the encoder's latent codes directly, without any optimisation."""
    if not frames:
        return []
    z = encode(nets, _positions(frames)) if z0 is None else np.asarray(z0, dtype=float)
    angles = decode(nets, z)
    terms = total_objective(nets.robot, angles, DemoTargets.from_frames(frames, nets.robot), weights, z=z)
    return [OptimRun([(0, breakdown)], z[b], angles[b], 0, "feedforward")
            for b, breakdown in enumerate(LossBreakdown.from_terms(terms))]


def retarget_frames(frames: Sequence[DemoFrame], nets: RetargetNets, weights: ObjectiveWeights,
                    mode: str = "latent_opt", init: str = "neural", options: LatentOptions = LatentOptions(),
                    seed: int = 0, sigma: float = 1.0, chunk: int = 64) -> List[OptimRun]:
    """Retarget independent frames, `chunk` frames per optimisation batch."""
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got '{mode}'")
    if not frames:
        return []
    if mode == "feedforward":
        init = "neural"
    z0 = initial_latents(nets, frames, init, seed, sigma)
    runs: List[OptimRun] = []
    for start in range(0, len(frames), chunk):
        part = frames[start:start + chunk]
        if mode == "feedforward":
            runs += feedforward_batch(part, nets, weights, z0[start:start + chunk])
        else:
            runs += latent_optimize_batch(part, z0[start:start + chunk], nets, weights, options)
    return runs


def retarget_frame(demo: DemoFrame, nets: RetargetNets, weights: ObjectiveWeights, mode: str = "latent_opt",
                   init: str = "neural", options: LatentOptions = LatentOptions(), seed: int = 0,
                   sigma: float = 1.0) -> Tuple[np.ndarray, OptimRun]:
    run = retarget_frames([demo], nets, weights, mode, init, options, seed, sigma)[0]
    return run.angles, run


def retarget_sequence(frames: Sequence[DemoFrame], nets: RetargetNets, weights: ObjectiveWeights,
                      mode: str = "latent_opt", init: str = "neural", options: LatentOptions = LatentOptions(),
                      seed: int = 0, sigma: float = 1.0, warm_start: bool = False, chunk: int = 64
                      ) -> Tuple[np.ndarray, List[OptimRun]]:
    """Robot joint trajectory (T, n_dof) for a demonstration sequence.

    Frames are independent unless `warm_start` is set, in which case frame t
    starts from the optimised latent code of frame t-1.
    """
    if not frames:
        return np.zeros((0, nets.robot.n_dof)), []
    if warm_start and mode == "latent_opt":
        z = initial_latents(nets, frames[:1], init, seed, sigma)[0]
        runs = []
        for frame in frames:
            run = latent_optimize(frame, z, nets, weights, options)
            runs.append(run)
            z = run.z
    else:
        runs = retarget_frames(frames, nets, weights, mode, init, options, seed, sigma, chunk)
    return np.stack([r.angles for r in runs]), runs


def baseline_optimize_batch(frames: Sequence[DemoFrame], model: RobotModel, weights: ObjectiveWeights,
                            options: LatentOptions = LatentOptions(), init: str = "mid", seed: int = 0,
                            angles0: Optional[np.ndarray] = None) -> List[OptimRun]:
    """Adam directly on joint angles with the soft joint-limit penalty; angles are never clamped."""
    if not frames:
        return []
    batch = len(frames)
    if init == "mid":
        x0 = np.broadcast_to(0.5 * (model.lower + model.upper), (batch, model.n_dof)).copy()
    elif init == "random":
        x0 = np.random.default_rng(seed).uniform(model.lower, model.upper, size=(batch, model.n_dof))
    elif init == "explicit":
        if angles0 is None:
            raise ConfigurationError("explicit baseline init needs starting angles")
        x0 = np.broadcast_to(np.asarray(angles0, dtype=float), (batch, model.n_dof)).copy()
    else:
        raise ConfigurationError(f"baseline init must be one of {BASELINE_INITS}, got '{init}'")
    targets = DemoTargets.from_frames(frames, model)

    def evaluate(tape, angles):
        return total_objective(model, angles, targets, weights, include_limits=True), angles

    runs, _ = _descend(x0, evaluate, options, Tape(), "baseline")
    for run in runs:
        run.z = None
        run.limit_violations = count_limit_violations(run.angles, model)
    return runs


def baseline_joint_optimize(demo: DemoFrame, model: RobotModel, weights: ObjectiveWeights,
                            options: LatentOptions = LatentOptions(), init: str = "mid", seed: int = 0,
                            angles0: Optional[np.ndarray] = None) -> OptimRun:
    return baseline_optimize_batch([demo], model, weights, options, init, seed, angles0)[0]


def count_limit_violations(angles: np.ndarray, model: RobotModel) -> int:
    angles = np.asarray(angles, dtype=float)
    return int(np.sum((angles < model.lower) | (angles > model.upper)))


def _clip_global_norm(grads: Dict[str, np.ndarray], limit: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if limit > 0 and norm > limit:
        scale = limit / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def latent_statistics(nets: RetargetNets, frames: Sequence[DemoFrame], chunk: int = 256
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """Per-entry mean and standard deviation of the encoder's codes over a frame set."""
    total = np.zeros(nets.latent_shape)
    squares = np.zeros(nets.latent_shape)
    for start in range(0, len(frames), chunk):
        z = encode(nets, _positions(frames[start:start + chunk]))
        total += z.sum(axis=0)
        squares += (z * z).sum(axis=0)
    n = max(len(frames), 1)
    mean = total / n
    return mean, np.sqrt(np.maximum(squares / n - mean * mean, 0.0))


def train(frames: Sequence[DemoFrame], nets: RetargetNets, weights: ObjectiveWeights,
          options: TrainOptions = TrainOptions(), references: Optional[np.ndarray] = None) -> TrainResult:
    """Train encoder and decoder together on mean objective + latent prior.

    Args:
        frames: training frames
        nets: networks to start from (not modified)
        weights: objective weights
        options: batch size, learning rate, epochs, clipping and early exit
        references: (n_frames, n_dof) target angles, required by the supervised objective

    Returns:
        TrainResult: trained copy of the nets and the per-epoch mean loss
    """
    if not frames:
        raise UsageError("training needs at least one frame")
    problems = options.validate()
    if problems:
        raise ConfigurationError("; ".join(problems))
    if options.objective == "supervised" and references is None:
        raise ConfigurationError("supervised training needs reference angles")

    nets = nets.copy()
    robot = nets.robot
    picked = np.arange(0, len(frames), options.frame_stride)
    chosen = [frames[i] for i in picked]
    positions = _positions(chosen)
    targets = DemoTargets.from_frames(chosen, robot)
    if references is not None:
        references = np.asarray(references, dtype=float)[picked]
    rng = np.random.default_rng(options.seed)
    adam = Adam(options.lr)
    losses: List[float] = []
    early_exit = False

    for epoch in range(options.epochs):
        order = rng.permutation(len(chosen))
        epoch_sum = 0.0
        for start in range(0, len(order), options.batch):
            rows = order[start:start + options.batch]
            tape = Tape()
            params = nets.bind(tape, trainable=True)
            z = encode(nets, positions[rows], params)
            angles = decode(nets, z, params)
            if options.objective == "fk":
                loss = total_objective(robot, angles, targets.take(rows), weights, z=z).total
            else:
                loss = ad.add(supervised_loss(angles, references[rows]), latent_regularizer(z, weights.sigma))
            values = ad.payload(loss)
            if not np.all(np.isfinite(values)):
                bad = int(picked[rows[int(np.flatnonzero(~np.isfinite(values))[0])]])
                raise NumericalError(f"non-finite training loss in epoch {epoch + 1}", frame=bad)
            tape.backward(ad.mul(ad.reduce_sum(loss), 1.0 / len(rows)))
            grads = {name: value.grad for name, value in params.items()}
            _clip_global_norm(grads, options.clip)
            adam.step(nets.params, grads)
            epoch_sum += float(values.sum())
        losses.append(epoch_sum / len(chosen))
        logger.info(f"Epoch {epoch + 1}/{options.epochs}: mean loss {losses[-1]:.6g}")
        if len(losses) > options.patience and \
                losses[-1 - options.patience] - min(losses[-options.patience:]) < options.min_delta:
            early_exit = True
            logger.info(f"Stopping early after epoch {epoch + 1}: no improvement over {options.patience} epochs")
            break

    nets.latent_mean, nets.latent_std = latent_statistics(nets, chosen)
    return TrainResult(nets, losses, len(losses), early_exit)
