"""
Evaluation metrics: discrete Frechet distance, tracking error, velocity and
acceleration error, and collision counts.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import UsageError
from kinematics import RobotModel, forward_kinematics, pair_distances
from objective import DemoFrame
from skeleton import CHAINS, NODE_INDEX

logger = logging.getLogger(__name__)


@dataclass
class Trajectory:
    samples: np.ndarray
    dt: float = 1.0 / 30.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1, 3)
        if len(self.samples) < 1:
            raise UsageError("a trajectory needs at least one sample")
        if not self.dt > 0:
            raise UsageError(f"trajectory dt must be positive, got {self.dt}")


TrackLike = Union[Trajectory, np.ndarray, Sequence]


def _samples(track: TrackLike) -> np.ndarray:
    if isinstance(track, Trajectory):
        return track.samples
    samples = np.asarray(track, dtype=float)
    if samples.size == 0:
        raise UsageError("a trajectory needs at least one sample")
    return samples.reshape(-1, 3)


def discrete_frechet(a: TrackLike, b: TrackLike) -> float:
    """Discrete Frechet distance via the coupling dynamic program."""
    p, q = _samples(a), _samples(b)
    dist = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=-1)
    m, n = dist.shape
    c = np.empty((m, n))
    c[0, 0] = dist[0, 0]
    for j in range(1, n):
        c[0, j] = max(dist[0, j], c[0, j - 1])
    for i in range(1, m):
        c[i, 0] = max(dist[i, 0], c[i - 1, 0])
        for j in range(1, n):
            c[i, j] = max(dist[i, j], min(c[i - 1, j], c[i, j - 1], c[i - 1, j - 1]))
    return float(c[m - 1, n - 1])


def marker_tracks(frames: Sequence[DemoFrame], angles: np.ndarray, model: RobotModel
                  ) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Robot and scaled demo tracks (T, 3) of each wrist and elbow.

    Demo positions are scaled per arm by the ratio of robot to demo shoulder-to-wrist length.
    """
    angles = np.asarray(angles, dtype=float).reshape(-1, model.n_dof)
    if len(frames) != len(angles):
        raise UsageError(f"{len(frames)} demo frames against {len(angles)} robot frames")
    if not len(frames):
        raise UsageError("cannot evaluate an empty motion")
    transforms = forward_kinematics(model, angles)
    tracks = {}
    for chain in model.chains:
        if chain.name not in CHAINS:
            raise UsageError(f"robot chain '{chain.name}' has no human counterpart")
        c = CHAINS.index(chain.name)
        ratio = np.array([model.norm_lengths[chain.name].arm / f.arm_lengths[c] for f in frames])[:, None]
        for part, site in (("wrist", chain.wrist), ("elbow", chain.elbow)):
            demo = np.stack([f.positions[NODE_INDEX[f"{part}_{chain.name}"]] for f in frames]) * ratio
            tracks[f"{part}_{chain.name}"] = (transforms.site_position(site), demo)
    return tracks


def tracking_error(frames: Sequence[DemoFrame], angles: np.ndarray, model: RobotModel) -> float:
    """Mean discrete Frechet distance over the wrist and elbow tracks of both arms."""
    tracks = marker_tracks(frames, angles, model)
    return float(np.mean([discrete_frechet(robot, demo) for robot, demo in tracks.values()]))


def _differences(tracks: np.ndarray, dt: float, order: int) -> np.ndarray:
    if not dt > 0:
        raise UsageError(f"dt must be positive, got {dt}")
    out = np.asarray(tracks, dtype=float)
    for _ in range(order):
        out = np.diff(out, axis=-2) / dt
    return out


def velocity_error(robot: np.ndarray, demo: np.ndarray, dt: float) -> float:
    """Mean over frames and tracks of |v_robot - v_demo| with forward-difference velocities.

    Tracks are (T, 3) or stacked (K, T, 3).
    """
    robot, demo = np.asarray(robot, dtype=float), np.asarray(demo, dtype=float)
    if robot.shape != demo.shape:
        raise UsageError(f"track shapes differ: {robot.shape} vs {demo.shape}")
    if robot.shape[-2] < 2:
        raise UsageError("velocity error needs at least 2 samples")
    diff = _differences(robot, dt, 1) - _differences(demo, dt, 1)
    return float(np.mean(np.linalg.norm(diff, axis=-1)))


def acceleration_error(robot: np.ndarray, demo: np.ndarray, dt: float) -> float:
    """Mean over frames and tracks of |a_robot - a_demo| with second differences."""
    robot, demo = np.asarray(robot, dtype=float), np.asarray(demo, dtype=float)
    if robot.shape != demo.shape:
        raise UsageError(f"track shapes differ: {robot.shape} vs {demo.shape}")
    if robot.shape[-2] < 3:
        raise UsageError("acceleration error needs at least 3 samples")
    diff = _differences(robot, dt, 2) - _differences(demo, dt, 2)
    return float(np.mean(np.linalg.norm(diff, axis=-1)))


def count_collisions(model: RobotModel, angles: np.ndarray, d_min: Optional[float] = None) -> int:
    """Number of (frame, capsule pair) events closer than d_min."""
    d_min = model.d_min if d_min is None else d_min
    angles = np.asarray(angles, dtype=float).reshape(-1, model.n_dof)
    if not len(angles) or not model.collision_pairs:
        return 0
    distances = pair_distances(model, forward_kinematics(model, angles))
    return int(sum(np.sum(d < d_min) for d in distances))


@dataclass
class MotionReport:
    label: str
    frames: int
    frechet: float
    velocity: Optional[float]
    acceleration: Optional[float]
    iterations: float
    collisions: int
    limit_violations: int

    HEADER = ("motion", "frames", "frechet", "velocity_error", "acceleration_error",
              "mean_iterations", "collisions", "limit_violations")

    def as_row(self) -> List:
        return [self.label, self.frames, self.frechet, self.velocity, self.acceleration,
                self.iterations, self.collisions, self.limit_violations]


def motion_report(label: str, frames: Sequence[DemoFrame], angles: np.ndarray, model: RobotModel,
                  dt: float, iterations: Sequence[int] = ()) -> MotionReport:
    """Every per-motion metric of the evaluation report."""
    angles = np.asarray(angles, dtype=float).reshape(-1, model.n_dof)
    tracks = marker_tracks(frames, angles, model)
    robot = np.stack([r for r, _ in tracks.values()])
    demo = np.stack([d for _, d in tracks.values()])
    frechet = float(np.mean([discrete_frechet(r, d) for r, d in tracks.values()]))
    velocity = velocity_error(robot, demo, dt) if len(frames) >= 2 else None
    acceleration = acceleration_error(robot, demo, dt) if len(frames) >= 3 else None
    violations = int(np.sum((angles < model.lower) | (angles > model.upper)))
    report = MotionReport(label, len(frames), frechet, velocity, acceleration,
                          float(np.mean(iterations)) if len(iterations) else 0.0,
                          count_collisions(model, angles), violations)
    logger.info(f"Motion {label}: frechet {frechet:.4f} m, {report.collisions} collision events")
    return report
