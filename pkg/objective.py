"""
Retargeting objective: end-effector, orientation, elbow, finger and collision terms,
the latent prior, and the soft joint-limit penalty used by the direct-angle baseline.

All losses are batched over frames and return one value per frame, shape (B,).
"""
import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

import autodiff as ad
from errors import ConfigurationError, UsageError, ValidationError
from kinematics import FrameTransforms, RobotModel, forward_kinematics, pair_distances
from skeleton import CHAINS, FINGERS, NODE_INDEX

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ObjectiveWeights:
    ee: float = 1000.0
    ori: float = 100.0
    elb: float = 100.0
    fin: float = 100.0
    col: float = 1000.0
    lim: float = 0.0
    sigma: float = 1.0

    def validate(self) -> List[str]:
        problems = [f"weights.{f.name}: must be >= 0, got {getattr(self, f.name)}"
                    for f in fields(self) if not getattr(self, f.name) >= 0]
        if self.sigma == 0:
            problems.append("weights.sigma: must be positive")
        return problems

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(eq=False)
class DemoFrame:
    """One frame of a human demonstration.

    Args:
        positions: (26, 3) human node positions in meters, in skeleton.HUMAN_NODES order
        wrist_rotations: (2, 3, 3) wrist orientations, left then right
        arm_lengths: (2,) shoulder to wrist lengths
        forearm_lengths: (2,) elbow to wrist lengths
        finger_lengths: (2, 5) metacarpal to tip lengths
    """

    positions: np.ndarray
    wrist_rotations: np.ndarray
    arm_lengths: np.ndarray
    forearm_lengths: np.ndarray
    finger_lengths: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.wrist_rotations = np.asarray(self.wrist_rotations, dtype=float)
        self.arm_lengths = np.asarray(self.arm_lengths, dtype=float)
        self.forearm_lengths = np.asarray(self.forearm_lengths, dtype=float)
        self.finger_lengths = np.asarray(self.finger_lengths, dtype=float)

    def validate(self, tolerance: float = 1e-6) -> None:
        expected = {
            "positions": (len(NODE_INDEX), 3),
            "wrist_rotations": (len(CHAINS), 3, 3),
            "arm_lengths": (len(CHAINS),),
            "forearm_lengths": (len(CHAINS),),
            "finger_lengths": (len(CHAINS), len(FINGERS)),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValidationError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("positions must be finite")
        for k, r in enumerate(self.wrist_rotations):
            error = np.max(np.abs(r @ r.T - np.eye(3)))
            if not error <= tolerance:
                raise ValidationError(f"wrist rotation {CHAINS[k]} is not orthonormal (error {error:.2e})")
        for name in ("arm_lengths", "forearm_lengths", "finger_lengths"):
            if np.any(getattr(self, name) <= 0):
                raise ValidationError(f"{name} must be positive")

    def scaled(self, factor: float) -> "DemoFrame":
        return DemoFrame(self.positions * factor, self.wrist_rotations.copy(), self.arm_lengths * factor,
                         self.forearm_lengths * factor, self.finger_lengths * factor)


@dataclass
class DemoTargets:
    """Normalized demonstration quantities matched against one robot, batched over B frames."""

    ee: np.ndarray         # (B, C, 3) wrist / arm length
    elbow: np.ndarray      # (B, C, 3) (wrist - elbow) / forearm length
    rotations: np.ndarray  # (B, C, 3, 3)
    fingers: np.ndarray    # (B, F, 3) (tip - metacarpal) / finger length, robot finger order

    @property
    def batch(self) -> int:
        return self.ee.shape[0]

    def take(self, rows) -> "DemoTargets":
        return DemoTargets(self.ee[rows], self.elbow[rows], self.rotations[rows], self.fingers[rows])

    @classmethod
    def from_frames(cls, frames: Sequence[DemoFrame], model: RobotModel) -> "DemoTargets":
        ee, elbow, rotations, fingers = [], [], [], []
        for frame in frames:
            f_ee, f_elb, f_rot, f_fin = [], [], [], []
            for chain in model.chains:
                if chain.name not in CHAINS:
                    raise UsageError(f"robot chain '{chain.name}' has no human counterpart (expected {CHAINS})")
                c = CHAINS.index(chain.name)
                wrist = frame.positions[NODE_INDEX[f"wrist_{chain.name}"]]
                elb = frame.positions[NODE_INDEX[f"elbow_{chain.name}"]]
                f_ee.append(wrist / frame.arm_lengths[c])
                f_elb.append((wrist - elb) / frame.forearm_lengths[c])
                f_rot.append(frame.wrist_rotations[c])
                for finger in chain.fingers:
                    if finger.name not in FINGERS:
                        raise UsageError(f"robot finger '{finger.name}' has no human counterpart")
                    k = FINGERS.index(finger.name)
                    meta = frame.positions[NODE_INDEX[f"{chain.name}_{finger.name}_meta"]]
                    tip = frame.positions[NODE_INDEX[f"{chain.name}_{finger.name}_tip"]]
                    f_fin.append((tip - meta) / frame.finger_lengths[c, k])
            ee.append(f_ee)
            elbow.append(f_elb)
            rotations.append(f_rot)
            fingers.append(np.array(f_fin).reshape(-1, 3))
        n = len(frames)
        c = len(model.chains)
        f = sum(len(chain.fingers) for chain in model.chains)
        return cls(np.array(ee, dtype=float).reshape(n, c, 3), np.array(elbow, dtype=float).reshape(n, c, 3),
                   np.array(rotations, dtype=float).reshape(n, c, 3, 3),
                   np.array(fingers, dtype=float).reshape(n, f, 3))


def _squared_norm(diff):
    return ad.reduce_sum(ad.square(diff), axis=-1)


def _accumulate(parts, batch: int):
    total = None
    for part in parts:
        total = part if total is None else ad.add(total, part)
    return np.zeros(batch) if total is None else total


def _batch_of(transforms: FrameTransforms) -> int:
    return ad.payload(transforms.translations[-1]).shape[0]


def end_effector_loss(model: RobotModel, transforms: FrameTransforms, targets: DemoTargets):
    """Sum over chains of |p/l - p_demo/l_demo|^2."""
    parts = []
    for c, chain in enumerate(model.chains):
        p = transforms.site_position(chain.end_effector, batched=True)
        scaled = ad.mul(p, 1.0 / model.norm_lengths[chain.name].arm)
        parts.append(_squared_norm(ad.sub(scaled, targets.ee[:, c])))
    return _accumulate(parts, _batch_of(transforms))


def orientation_loss(rotations: Sequence, targets: Sequence):
    """Sum over wrists of the squared Frobenius distance |R - R_demo|^2."""
    if len(rotations) != len(targets):
        raise UsageError(f"{len(rotations)} wrist rotations against {len(targets)} demo rotations")
    parts = []
    for r, r_hat in zip(rotations, targets):
        if ad.payload(r).shape[-2:] != (3, 3) or np.shape(r_hat)[-2:] != (3, 3):
            raise UsageError("orientation loss needs 3x3 rotation matrices")
        parts.append(ad.reduce_sum(ad.reduce_sum(ad.square(ad.sub(r, r_hat)), axis=-1), axis=-1))
    return _accumulate(parts, 1) if parts else 0.0


def _orientation_term(model: RobotModel, transforms: FrameTransforms, targets: DemoTargets):
    rotations = [transforms.rotations[model.joint_index[chain.wrist_frame]] for chain in model.chains]
    if not rotations:
        return np.zeros(_batch_of(transforms))
    return orientation_loss(rotations, [targets.rotations[:, c] for c in range(len(rotations))])


def elbow_loss(model: RobotModel, transforms: FrameTransforms, targets: DemoTargets):
    """Sum over chains of the squared difference of normalized elbow-to-wrist vectors."""
    parts = []
    for c, chain in enumerate(model.chains):
        wrist = transforms.site_position(chain.wrist, batched=True)
        elbow = transforms.site_position(chain.elbow, batched=True)
        scaled = ad.mul(ad.sub(wrist, elbow), 1.0 / model.norm_lengths[chain.name].forearm)
        parts.append(_squared_norm(ad.sub(scaled, targets.elbow[:, c])))
    return _accumulate(parts, _batch_of(transforms))


def finger_loss(model: RobotModel, transforms: FrameTransforms, targets: DemoTargets):
    """Sum over fingers of the squared difference of normalized metacarpal-to-tip vectors; 0 without hands."""
    parts = []
    k = 0
    for chain in model.chains:
        lengths = model.norm_lengths[chain.name].fingers
        for finger, length in zip(chain.fingers, lengths):
            tip = transforms.site_position(finger.tip, batched=True)
            meta = transforms.site_position(finger.metacarpal, batched=True)
            scaled = ad.mul(ad.sub(tip, meta), 1.0 / length)
            parts.append(_squared_norm(ad.sub(scaled, targets.fingers[:, k])))
            k += 1
    return _accumulate(parts, _batch_of(transforms))


def collision_loss(model: RobotModel, transforms: FrameTransforms, d_min: Optional[float] = None):
    """Sum of exp(-d^2) over capsule pairs closer than d_min; the gate carries no gradient."""
    d_min = model.d_min if d_min is None else d_min
    if d_min <= 0:
        raise UsageError(f"d_min must be positive, got {d_min}")
    parts = []
    for d in pair_distances(model, transforms):
        data = ad.payload(d)
        gate = (data < d_min).astype(float)
        if isinstance(d, ad.Value):
            d.tape.note_kink(np.abs(data - d_min))
        parts.append(ad.mul(ad.exp(ad.neg(ad.square(d))), gate))
    return _accumulate(parts, _batch_of(transforms))


def joint_limit_loss(angles, lower, upper):
    """Quadratic hinge on limit violations, summed over joints."""
    above = ad.maximum(ad.sub(angles, np.asarray(upper, dtype=float)), 0.0)
    below = ad.maximum(ad.sub(np.asarray(lower, dtype=float), angles), 0.0)
    return ad.reduce_sum(ad.add(ad.square(above), ad.square(below)), axis=-1)


def latent_regularizer(z, sigma: float = 1.0):
    """|z|^2 / sigma^2 per frame for a (B, N_r, d_z) latent."""
    if sigma <= 0:
        raise ConfigurationError(f"latent prior sigma must be positive, got {sigma}")
    batch = ad.payload(z).shape[0]
    flat = ad.reshape(z, (batch, -1))
    return ad.mul(ad.reduce_sum(ad.square(flat), axis=-1), 1.0 / sigma ** 2)


def supervised_loss(angles, reference):
    """Squared distance to reference joint angles (plain regression, no kinematics)."""
    return ad.reduce_sum(ad.square(ad.sub(angles, np.asarray(reference, dtype=float))), axis=-1)


TERMS = ("ee", "ori", "elb", "fin", "col")


@dataclass
class ObjectiveTerms:
    """Per-frame loss terms (tape Values or arrays of shape (B,))."""

    ee: object
    ori: object
    elb: object
    fin: object
    col: object
    reg: object
    lim: object
    total: object


@dataclass(frozen=True)
class LossBreakdown:
    ee: float
    ori: float
    elb: float
    fin: float
    col: float
    reg: float
    total: float
    lim: float = 0.0

    @classmethod
    def from_terms(cls, terms: ObjectiveTerms) -> List["LossBreakdown"]:
        values = {f.name: np.atleast_1d(ad.payload(getattr(terms, f.name))) for f in fields(cls)}
        batch = max(v.size for v in values.values())
        values = {k: np.broadcast_to(v, (batch,)) for k, v in values.items()}
        return [cls(**{k: float(v[b]) for k, v in values.items()}) for b in range(batch)]

    def as_row(self) -> List[float]:
        return [self.ee, self.ori, self.elb, self.fin, self.col, self.reg, self.total]


def total_objective(model: RobotModel, angles, targets: DemoTargets, weights: ObjectiveWeights,
                    z=None, include_limits: bool = False, transforms: Optional[FrameTransforms] = None
                    ) -> ObjectiveTerms:
    """FK, markers and the weighted sum of every term, plus |z|^2/sigma^2 when a latent is given.

    Args:
        model: robot model
        angles: (B, n_dof) joint angles, numpy or tape Value
        targets: demonstration targets for the same B frames
        weights: term weights
        z: optional (B, N_r, d_z) latent code for the prior term
        include_limits: add weights.lim times the soft joint-limit penalty

    Returns:
        ObjectiveTerms: each field is shaped (B,)
    """
    if ad.payload(angles).ndim == 1:
        angles = ad.reshape(angles, (1, -1))
    batch = ad.payload(angles).shape[0]
    if targets.batch != batch:
        raise UsageError(f"{batch} angle rows against {targets.batch} demo frames")
    if transforms is None:
        transforms = forward_kinematics(model, angles)
    ee = end_effector_loss(model, transforms, targets)
    ori = _orientation_term(model, transforms, targets)
    elb = elbow_loss(model, transforms, targets)
    fin = finger_loss(model, transforms, targets)
    col = collision_loss(model, transforms)
    total = _accumulate([ad.mul(ee, weights.ee), ad.mul(ori, weights.ori), ad.mul(elb, weights.elb),
                         ad.mul(fin, weights.fin), ad.mul(col, weights.col)], batch)
    reg = np.zeros(batch)
    if z is not None:
        reg = latent_regularizer(z, weights.sigma)
        total = ad.add(total, reg)
    lim = np.zeros(batch)
    if include_limits:
        lim = joint_limit_loss(angles, model.lower, model.upper)
        total = ad.add(total, ad.mul(lim, weights.lim))
    return ObjectiveTerms(ee, ori, elb, fin, col, reg, lim, total)
