"""
Kinematic trees, differentiable forward kinematics, marker sites and capsule distances.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Tape, Value
from errors import UsageError, ValidationError

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]

NODE_TYPES = ("arm", "hand")
JOINT_KINDS = ("revolute", "fixed")


def rpy_to_matrix(rpy: Sequence[float]) -> np.ndarray:
    """Fixed rotation from roll/pitch/yaw, extrinsic XYZ: R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    roll, pitch, yaw = (float(v) for v in rpy)
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def matrix_to_rpy(rotation: np.ndarray) -> np.ndarray:
    """Inverse of rpy_to_matrix (pitch in [-pi/2, pi/2])."""
    r = np.asarray(rotation, dtype=float)
    pitch = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    roll = np.arctan2(r[2, 1], r[2, 2])
    yaw = np.arctan2(r[1, 0], r[0, 0])
    return np.array([roll, pitch, yaw])


def skew(v: Sequence[float]) -> np.ndarray:
    x, y, z = (float(c) for c in v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_rotation(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


@dataclass(frozen=True)
class JointSpec:
    name: str
    parent: Optional[str]
    origin_offset: Vec3
    origin_rpy: Vec3 = (0.0, 0.0, 0.0)
    axis: Vec3 = (0.0, 0.0, 1.0)
    lower: float = 0.0
    upper: float = 0.0
    node_type: str = "arm"
    kind: str = "revolute"

    @property
    def actuated(self) -> bool:
        return self.kind == "revolute"

    def validate(self) -> None:
        if self.kind not in JOINT_KINDS:
            raise ValidationError(f"joint '{self.name}': unknown kind '{self.kind}'")
        if self.node_type not in NODE_TYPES:
            raise ValidationError(f"joint '{self.name}': node_type must be one of {NODE_TYPES}")
        if len(self.origin_offset) != 3 or len(self.origin_rpy) != 3 or len(self.axis) != 3:
            raise ValidationError(f"joint '{self.name}': offset, rpy and axis need three components")
        if self.actuated:
            if not self.lower < self.upper:
                raise ValidationError(f"joint '{self.name}': lower limit {self.lower} must be below upper {self.upper}")
            if abs(np.linalg.norm(self.axis) - 1.0) > 1e-9:
                raise ValidationError(f"joint '{self.name}': axis {self.axis} is not a unit vector")


@dataclass(frozen=True)
class Marker:
    name: str
    joint: str
    offset: Vec3 = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Capsule:
    name: str
    site_a: str
    site_b: str
    radius: float
    group: str


@dataclass(frozen=True)
class Finger:
    name: str
    metacarpal: str
    tip: str


@dataclass(frozen=True)
class Chain:
    """Sites of one arm used by the retargeting losses."""

    name: str
    shoulder: str
    elbow: str
    wrist: str
    end_effector: str
    wrist_frame: str
    fingers: Tuple[Finger, ...] = ()


@dataclass(frozen=True)
class NormLengths:
    arm: float
    forearm: float
    fingers: Tuple[float, ...] = ()


@dataclass(frozen=True)
class RobotModel:
    """Immutable kinematic tree with limits, marker sites, capsules and retargeting chains."""

    name: str
    joints: Tuple[JointSpec, ...]
    markers: Tuple[Marker, ...] = ()
    capsules: Tuple[Capsule, ...] = ()
    chains: Tuple[Chain, ...] = ()
    d_min: float = 0.02

    def __post_init__(self):
        self._validate()

    def _validate(self) -> None:
        seen = {}
        roots = []
        for i, joint in enumerate(self.joints):
            joint.validate()
            if joint.name in seen:
                raise ValidationError(f"duplicate joint '{joint.name}'")
            if joint.parent is None:
                roots.append(joint.name)
            elif joint.parent not in seen:
                raise ValidationError(
                    f"joint '{joint.name}': parent '{joint.parent}' must be listed before it")
            seen[joint.name] = i
        if len(roots) != 1:
            raise ValidationError(f"model '{self.name}' needs exactly one root joint, found {roots}")
        marker_names = set()
        for marker in self.markers:
            if marker.joint not in seen:
                raise ValidationError(f"marker '{marker.name}': unknown joint '{marker.joint}'")
            if marker.name in seen or marker.name in marker_names:
                raise ValidationError(f"marker '{marker.name}' reuses an existing site name")
            marker_names.add(marker.name)
        sites = set(seen) | marker_names
        for capsule in self.capsules:
            if capsule.radius <= 0:
                raise ValidationError(f"capsule '{capsule.name}': radius must be positive")
            for site in (capsule.site_a, capsule.site_b):
                if site not in sites:
                    raise ValidationError(f"capsule '{capsule.name}': unknown site '{site}'")
        for chain in self.chains:
            for site in (chain.shoulder, chain.elbow, chain.wrist, chain.end_effector):
                if site not in sites:
                    raise ValidationError(f"chain '{chain.name}': unknown site '{site}'")
            if chain.wrist_frame not in seen:
                raise ValidationError(f"chain '{chain.name}': wrist_frame '{chain.wrist_frame}' is not a joint")
            for finger in chain.fingers:
                for site in (finger.metacarpal, finger.tip):
                    if site not in sites:
                        raise ValidationError(f"chain '{chain.name}' finger '{finger.name}': unknown site '{site}'")
        if self.d_min <= 0:
            raise ValidationError(f"model '{self.name}': d_min must be positive")

    # -- derived, cached data ------------------------------------------------

    @cached_property
    def joint_index(self) -> Dict[str, int]:
        return {j.name: i for i, j in enumerate(self.joints)}

    @cached_property
    def marker_index(self) -> Dict[str, Marker]:
        return {m.name: m for m in self.markers}

    @cached_property
    def parent_index(self) -> Tuple[int, ...]:
        return tuple(-1 if j.parent is None else self.joint_index[j.parent] for j in self.joints)

    @cached_property
    def actuated(self) -> Tuple[int, ...]:
        """Indices (into joints) of the joints that carry an angle."""
        return tuple(i for i, j in enumerate(self.joints) if j.actuated)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_dof(self) -> int:
        return len(self.actuated)

    @cached_property
    def lower(self) -> np.ndarray:
        return np.array([self.joints[i].lower for i in self.actuated])

    @cached_property
    def upper(self) -> np.ndarray:
        return np.array([self.joints[i].upper for i in self.actuated])

    @cached_property
    def node_limits(self) -> np.ndarray:
        """(n_joints, 2) lower/upper per joint, zeros for fixed joints."""
        return np.array([[j.lower, j.upper] if j.actuated else [0.0, 0.0] for j in self.joints])

    @cached_property
    def dof_names(self) -> Tuple[str, ...]:
        return tuple(self.joints[i].name for i in self.actuated)

    @cached_property
    def _static(self) -> dict:
        n = self.n_joints
        selector = np.zeros((self.n_dof, n))
        for k, i in enumerate(self.actuated):
            selector[k, i] = 1.0
        axes = [skew(j.axis) if j.actuated else np.zeros((3, 3)) for j in self.joints]
        return {
            "selector": selector,
            "fixed_rotations": np.stack([rpy_to_matrix(j.origin_rpy) for j in self.joints]),
            "offsets": np.stack([np.asarray(j.origin_offset, dtype=float).reshape(3, 1) for j in self.joints]),
            "k": np.stack(axes),
            "k2": np.stack([k @ k for k in axes]),
        }

    def site(self, name: str) -> Tuple[int, np.ndarray]:
        """Joint index and local offset of a joint or marker site."""
        if name in self.joint_index:
            return self.joint_index[name], np.zeros(3)
        marker = self.marker_index.get(name)
        if marker is None:
            raise UsageError(f"unknown site '{name}' on model '{self.name}'")
        return self.joint_index[marker.joint], np.asarray(marker.offset, dtype=float)

    @cached_property
    def zero_pose_sites(self) -> Dict[str, np.ndarray]:
        transforms = forward_kinematics(self, np.zeros(self.n_dof))
        sites = {j.name: transforms.position(j.name) for j in self.joints}
        sites.update(marker_positions(self, transforms))
        return sites

    def _ancestors(self, index: int) -> List[int]:
        path = [index]
        while self.parent_index[path[-1]] >= 0:
            path.append(self.parent_index[path[-1]])
        return path

    def path_length(self, site_a: str, site_b: str) -> float:
        """Summed segment lengths along the tree path between two sites in the zero pose."""
        ja, _ = self.site(site_a)
        jb, _ = self.site(site_b)
        up_a = self._ancestors(ja)
        up_b = self._ancestors(jb)
        common = next(i for i in up_a if i in up_b)
        joints = up_a[:up_a.index(common) + 1] + list(reversed(up_b[:up_b.index(common)]))
        zero = self.zero_pose_sites
        points = [zero[site_a]] + [zero[self.joints[i].name] for i in joints] + [zero[site_b]]
        return float(sum(np.linalg.norm(b - a) for a, b in zip(points[:-1], points[1:])))

    @cached_property
    def norm_lengths(self) -> Dict[str, NormLengths]:
        lengths = {}
        for chain in self.chains:
            lengths[chain.name] = NormLengths(
                arm=self.path_length(chain.shoulder, chain.wrist),
                forearm=self.path_length(chain.elbow, chain.wrist),
                fingers=tuple(self.path_length(f.metacarpal, f.tip) for f in chain.fingers),
            )
            if lengths[chain.name].arm <= 0 or lengths[chain.name].forearm <= 0 \
                    or any(l <= 0 for l in lengths[chain.name].fingers):
                raise ValidationError(f"chain '{chain.name}' has a zero normalization length")
        return lengths

    @cached_property
    def collision_pairs(self) -> Tuple[Tuple[int, int], ...]:
        """Capsule index pairs checked by the collision loss.

        Pairs from different groups always count; pairs within a group count unless
        the two capsules share a site (adjacent links touch at their common joint).
        """
        pairs = []
        for i, a in enumerate(self.capsules):
            for j in range(i + 1, len(self.capsules)):
                b = self.capsules[j]
                if a.group != b.group or not ({a.site_a, a.site_b} & {b.site_a, b.site_b}):
                    pairs.append((i, j))
        return tuple(pairs)


@dataclass
class FrameTransforms:
    """Per-joint rotations and translations in the base frame (batched internally)."""

    model: RobotModel
    rotations: List[Union[np.ndarray, Value]]
    translations: List[Union[np.ndarray, Value]]
    batched: bool
    angles: Union[np.ndarray, Value, None] = None

    def _out(self, x):
        return x if self.batched else ad.take(x, 0)

    def rotation(self, joint: str):
        return self._out(self.rotations[self._index(joint)])

    def position(self, joint: str):
        return self._out(self.translations[self._index(joint)])

    def _index(self, joint: str) -> int:
        try:
            return self.model.joint_index[joint]
        except KeyError:
            raise UsageError(f"unknown joint '{joint}' on model '{self.model.name}'")

    def site_position(self, site: str, batched: Optional[bool] = None):
        """Base-frame position of a joint or marker site."""
        index, offset = self.model.site(site)
        p = self.translations[index]
        if np.any(offset):
            moved = ad.matmul(self.rotations[index], offset.reshape(3, 1))
            p = ad.add(p, ad.reshape(moved, ad.payload(p).shape))
        if batched is None:
            batched = self.batched
        return p if batched else ad.take(p, 0)


def forward_kinematics(model: RobotModel, angles, differentiable: bool = False) -> FrameTransforms:
    """Compose joint transforms down the tree: T_i = T_parent * Origin(offset, rpy) * Rot(axis, angle_i).

    Args:
        model: robot model
        angles: (n_dof,) or batched (B, n_dof) radians, numpy or a tape Value
        differentiable: when True and angles are plain numbers, record them as a
            variable on a fresh tape so every output is a tape node

    Returns:
        FrameTransforms: rotations (B,3,3) and translations (B,3) per joint
    """
    if differentiable and not isinstance(angles, Value):
        angles = Tape().variable(angles)
    data = ad.payload(angles)
    if data.ndim not in (1, 2) or data.shape[-1] != model.n_dof:
        raise UsageError(f"expected {model.n_dof} joint angles, got shape {data.shape}")
    batched = data.ndim == 2
    if not batched:
        angles = ad.reshape(angles, (1, model.n_dof))
    batch = ad.payload(angles).shape[0]
    static = model._static

    # per-joint rotations for the whole batch at once
    theta = ad.matmul(angles, static["selector"])
    theta = ad.reshape(theta, (batch, model.n_joints, 1, 1))
    joint_rot = ad.add(np.eye(3), ad.mul(ad.sin(theta), static["k"]))
    joint_rot = ad.add(joint_rot, ad.mul(ad.sub(1.0, ad.cos(theta)), static["k2"]))
    local = ad.matmul(static["fixed_rotations"], joint_rot)

    rotations, translations = [], []
    for i, parent in enumerate(model.parent_index):
        local_i = ad.take(local, (slice(None), i))
        if parent < 0:
            rotations.append(local_i)
            translations.append(np.broadcast_to(static["offsets"][i].reshape(3), (batch, 3)).copy())
            continue
        r_parent = rotations[parent]
        step = ad.reshape(ad.matmul(r_parent, static["offsets"][i]), (batch, 3))
        rotations.append(ad.matmul(r_parent, local_i))
        translations.append(ad.add(translations[parent], step))
    return FrameTransforms(model, rotations, translations, batched, angles)


def marker_positions(model: RobotModel, transforms: FrameTransforms,
                     names: Optional[Sequence[str]] = None) -> Dict[str, Union[np.ndarray, Value]]:
    """Base-frame positions of named marker sites (all markers by default)."""
    if names is None:
        names = [m.name for m in model.markers]
    out = {}
    for name in names:
        if name not in model.marker_index:
            raise UsageError(f"unknown marker '{name}' on model '{model.name}'")
        out[name] = transforms.site_position(name)
    return out


def closest_segment_params(p0, p1, q0, q1, eps: float = 1e-12):
    """Clamped closest-point parameters (s, t) between segments p0-p1 and q0-q1.

    Works on (..., 3) arrays. Parallel segments take the midpoint of their overlap.
    """
    p0, p1, q0, q1 = (np.asarray(x, dtype=float) for x in (p0, p1, q0, q1))
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = np.sum(d1 * d1, axis=-1)
    e = np.sum(d2 * d2, axis=-1)
    b = np.sum(d1 * d2, axis=-1)
    c = np.sum(d1 * r, axis=-1)
    f = np.sum(d2 * r, axis=-1)
    deg_a = a <= eps
    deg_e = e <= eps
    safe_a = np.where(deg_a, 1.0, a)
    safe_e = np.where(deg_e, 1.0, e)
    denom = a * e - b * b
    parallel = denom <= eps * np.maximum(a * e, eps)
    safe_denom = np.where(parallel, 1.0, denom)

    s_general = np.clip((b * f - c * e) / safe_denom, 0.0, 1.0)
    proj0 = -c / safe_a
    proj1 = (b - c) / safe_a
    low = np.clip(np.minimum(proj0, proj1), 0.0, 1.0)
    high = np.clip(np.maximum(proj0, proj1), 0.0, 1.0)
    s = np.where(parallel, 0.5 * (low + high), s_general)
    t = (b * s + f) / safe_e
    t_clamped = np.clip(t, 0.0, 1.0)
    s = np.where(t != t_clamped, np.clip((b * t_clamped - c) / safe_a, 0.0, 1.0), s)
    t = t_clamped

    # degenerate segments (points)
    s = np.where(deg_a, 0.0, np.where(deg_e, np.clip(-c / safe_a, 0.0, 1.0), s))
    t = np.where(deg_e, 0.0, np.where(deg_a, np.clip(f / safe_e, 0.0, 1.0), t))
    return s, t


def capsule_distance(a, b):
    """Surface distance between capsules a=(p0, p1, radius) and b=(q0, q1, radius).

    Endpoints may be (3,) or batched (B,3), numpy or tape Values; the result is
    negative when the capsules overlap. Closest-point parameters are held fixed
    during differentiation, which gives the exact gradient of the segment
    distance wherever it is differentiable.
    """
    p0, p1, ra = a
    q0, q1, rb = b
    s, t = closest_segment_params(ad.payload(p0), ad.payload(p1), ad.payload(q0), ad.payload(q1))
    s = np.asarray(s)[..., None]
    t = np.asarray(t)[..., None]
    on_a = ad.add(p0, ad.mul(s, ad.sub(p1, p0)))
    on_b = ad.add(q0, ad.mul(t, ad.sub(q1, q0)))
    gap = ad.reduce_sum(ad.square(ad.sub(on_a, on_b)), axis=-1)
    return ad.sub(ad.sqrt(ad.add(gap, 1e-18)), float(ra) + float(rb))


def capsule_endpoints(model: RobotModel, transforms: FrameTransforms, capsule: Capsule):
    return (transforms.site_position(capsule.site_a, batched=True),
            transforms.site_position(capsule.site_b, batched=True),
            capsule.radius)


def pair_distances(model: RobotModel, transforms: FrameTransforms) -> List[Union[np.ndarray, Value]]:
    """Batched (B,) surface distance of every collision pair, in model.collision_pairs order."""
    ends = {}
    out = []
    for i, j in model.collision_pairs:
        for k in (i, j):
            if k not in ends:
                ends[k] = capsule_endpoints(model, transforms, model.capsules[k])
        out.append(capsule_distance(ends[i], ends[j]))
    return out
