"""
Canonical two-arm, two-hand human skeleton.

Human frame: origin between the shoulders, Z up, X forward, Y to the left.
The zero pose has both arms hanging straight down with the palms facing the body.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Tuple

import numpy as np

from errors import ConfigurationError
from kinematics import Chain, Finger, JointSpec, Marker, RobotModel

logger = logging.getLogger(__name__)

CHAINS = ("left", "right")
FINGERS = ("thumb", "index", "middle", "ring", "pinky")

# metacarpal site relative to the wrist frame, before mirroring (left hand)
_METACARPALS = {
    "thumb": (0.04, -0.01, -0.03),
    "index": (0.025, -0.005, -0.08),
    "middle": (0.008, -0.005, -0.085),
    "ring": (-0.01, -0.005, -0.08),
    "pinky": (-0.026, -0.005, -0.072),
}


def node_names() -> List[str]:
    """The 26 human graph nodes, in demo-file order."""
    names = []
    for side in CHAINS:
        names += [f"shoulder_{side}", f"elbow_{side}", f"wrist_{side}"]
        for finger in FINGERS:
            names += [f"{side}_{finger}_meta", f"{side}_{finger}_tip"]
    return names


HUMAN_NODES: Tuple[str, ...] = tuple(node_names())
NODE_INDEX: Dict[str, int] = {n: i for i, n in enumerate(HUMAN_NODES)}


def node_type(name: str) -> str:
    return "hand" if name.endswith(("_meta", "_tip")) else "arm"


def human_links() -> List[Tuple[str, str]]:
    """Structural links (parent, child) of the human skeleton graph."""
    links = [("shoulder_left", "shoulder_right")]
    for side in CHAINS:
        links += [(f"shoulder_{side}", f"elbow_{side}"), (f"elbow_{side}", f"wrist_{side}")]
        for finger in FINGERS:
            links += [(f"wrist_{side}", f"{side}_{finger}_meta"),
                      (f"{side}_{finger}_meta", f"{side}_{finger}_tip")]
    return links


@dataclass(frozen=True)
class HumanSkeleton:
    """Anthropometric link lengths in meters."""

    shoulder_half_width: float = 0.18
    upper_arm: float = 0.30
    forearm: float = 0.25
    finger_lengths: Tuple[float, ...] = (0.08, 0.09, 0.10, 0.095, 0.08)

    def scaled(self, factor: float) -> "HumanSkeleton":
        return HumanSkeleton(
            shoulder_half_width=self.shoulder_half_width * factor,
            upper_arm=self.upper_arm * factor,
            forearm=self.forearm * factor,
            finger_lengths=tuple(l * factor for l in self.finger_lengths),
        )

    def to_dict(self) -> dict:
        return {
            "shoulder_half_width": self.shoulder_half_width,
            "upper_arm": self.upper_arm,
            "forearm": self.forearm,
            "finger_lengths": list(self.finger_lengths),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HumanSkeleton":
        return cls(
            shoulder_half_width=float(data["shoulder_half_width"]),
            upper_arm=float(data["upper_arm"]),
            forearm=float(data["forearm"]),
            finger_lengths=tuple(float(v) for v in data["finger_lengths"]),
        )


def _side_joints(skeleton: HumanSkeleton, side: str) -> Tuple[List[JointSpec], List[Marker], Chain]:
    sign = 1.0 if side == "left" else -1.0
    wide = 3.0
    j = lambda name, parent, offset, axis, node="arm": JointSpec(  # noqa: E731
        name=f"{side}_{name}", parent=parent, origin_offset=offset, axis=axis,
        lower=-wide, upper=wide, node_type=node)
    joints = [
        j("shoulder_flex", "torso", (0.0, sign * skeleton.shoulder_half_width, 0.0), (0.0, 1.0, 0.0)),
        j("shoulder_abduct", f"{side}_shoulder_flex", (0.0, 0.0, 0.0), (1.0, 0.0, 0.0)),
        j("shoulder_rotate", f"{side}_shoulder_abduct", (0.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
        j("elbow_flex", f"{side}_shoulder_rotate", (0.0, 0.0, -skeleton.upper_arm), (0.0, 1.0, 0.0)),
        j("forearm_pronate", f"{side}_elbow_flex", (0.0, 0.0, 0.0), (0.0, 0.0, 1.0)),
        j("wrist_flex", f"{side}_forearm_pronate", (0.0, 0.0, -skeleton.forearm), (0.0, 1.0, 0.0)),
        j("wrist_deviate", f"{side}_wrist_flex", (0.0, 0.0, 0.0), (1.0, 0.0, 0.0)),
    ]
    markers = [
        Marker(f"shoulder_{side}", f"{side}_shoulder_flex"),
        Marker(f"elbow_{side}", f"{side}_elbow_flex"),
        Marker(f"wrist_{side}", f"{side}_wrist_flex"),
    ]
    fingers = []
    for finger, length in zip(FINGERS, skeleton.finger_lengths):
        x, y, z = _METACARPALS[finger]
        meta = (x, sign * y, z)
        if finger == "thumb":
            joints.append(j("thumb_rotate", f"{side}_wrist_deviate", meta, (0.0, 0.0, 1.0), "hand"))
            joints.append(j("thumb_flex", f"{side}_thumb_rotate", (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), "hand"))
            base = f"{side}_thumb_rotate"
        else:
            joints.append(j(f"{finger}_flex", f"{side}_wrist_deviate", meta, (0.0, 1.0, 0.0), "hand"))
            base = f"{side}_{finger}_flex"
        markers.append(Marker(f"{side}_{finger}_meta", base))
        markers.append(Marker(f"{side}_{finger}_tip", joints[-1].name, (0.0, 0.0, -length)))
        fingers.append(Finger(finger, f"{side}_{finger}_meta", f"{side}_{finger}_tip"))
    chain = Chain(
        name=side,
        shoulder=f"shoulder_{side}",
        elbow=f"elbow_{side}",
        wrist=f"wrist_{side}",
        end_effector=f"wrist_{side}",
        wrist_frame=f"{side}_wrist_deviate",
        fingers=tuple(fingers),
    )
    return joints, markers, chain


@lru_cache(maxsize=8)
def human_model(skeleton: HumanSkeleton = HumanSkeleton()) -> RobotModel:
    """Kinematic model of the human skeleton; its markers are the human graph nodes."""
    joints = [JointSpec("torso", None, (0.0, 0.0, 0.0), kind="fixed")]
    markers, chains = [], []
    for side in CHAINS:
        side_joints, side_markers, chain = _side_joints(skeleton, side)
        joints += side_joints
        markers += side_markers
        chains.append(chain)
    model = RobotModel("human", tuple(joints), tuple(markers), (), tuple(chains))
    logger.debug(f"built human model with {model.n_dof} degrees of freedom")
    return model


def rest_pose(model: RobotModel, style: str = "sign") -> np.ndarray:
    """Neutral angles around which synthetic motions oscillate.

    `sign` keeps the hands in the signing space in front of the chest; `crossing`
    brings the forearms across the body midline so left and right links meet.
    """
    angles = np.zeros(model.n_dof)
    if style == "sign":
        values = {"shoulder_flex": -0.4, "shoulder_abduct": 0.3, "elbow_flex": -1.4,
                  "index_flex": -0.3, "middle_flex": -0.3, "ring_flex": -0.3, "pinky_flex": -0.3}
    elif style == "crossing":
        values = {"shoulder_flex": -0.9, "shoulder_abduct": -0.35, "shoulder_rotate": 0.4,
                  "elbow_flex": -1.2}
    else:
        raise ConfigurationError(f"unknown motion style '{style}'")
    for k, name in enumerate(model.dof_names):
        side, joint = name.split("_", 1)
        value = values.get(joint, 0.0)
        # abduction and axial rotation mirror across the sagittal plane
        if side == "right" and joint in ("shoulder_abduct", "shoulder_rotate"):
            value = -value
        angles[k] = value
    return angles
