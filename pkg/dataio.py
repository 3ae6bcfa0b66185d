"""
Robot description (.robot) and demonstration (.demo) files, plus the synthetic
demonstration generator.

.robot is a JSON document; .demo is JSON Lines with a header line followed by
one record per frame. Both carry a format name and a version.
"""
import glob
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ParseError, ValidationError
from kinematics import (Capsule, Chain, Finger, JointSpec, Marker, RobotModel, forward_kinematics,
                        marker_positions, matrix_to_rpy, rpy_to_matrix)
from objective import DemoFrame
from skeleton import CHAINS, FINGERS, HUMAN_NODES, HumanSkeleton, human_model, rest_pose

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HUMAN_FRAME = "origin between the shoulders, Z up, X forward, Y left; meters"
MAX_STEP = 0.5
MAX_JOINT_SPEED = 0.9
DEFAULT_DT = 1.0 / 30.0


@dataclass
class DemoSequence:
    frames: List[DemoFrame]
    dt: float = DEFAULT_DT
    skeleton: HumanSkeleton = field(default_factory=HumanSkeleton)
    label: str = ""

    def __len__(self):
        return len(self.frames)

    def positions(self) -> np.ndarray:
        return np.stack([f.positions for f in self.frames]) if self.frames else np.zeros((0, len(HUMAN_NODES), 3))

    def validate(self) -> None:
        if not self.dt > 0:
            raise ValidationError(f"demo '{self.label}': dt must be positive")
        for k, frame in enumerate(self.frames):
            try:
                frame.validate()
            except ValidationError as e:
                raise ValidationError(f"demo '{self.label}' frame {k}: {e}")
        if len(self.frames) > 1:
            steps = np.linalg.norm(np.diff(self.positions(), axis=0), axis=-1)
            if np.max(steps) >= MAX_STEP:
                k = int(np.argmax(np.max(steps, axis=1)))
                raise ValidationError(
                    f"demo '{self.label}': a joint moves {np.max(steps):.3f} m between frames {k} and {k + 1}")


def _require(data: Dict[str, Any], key: str, path: str, where: str, line: Optional[int] = None):
    if not isinstance(data, dict) or key not in data:
        raise ParseError(path, f"{where}: missing field '{key}'", line=line, field=f"{where}.{key}")
    return data[key]


def _vector(value, path: str, where: str, size: int = 3, line: Optional[int] = None) -> Tuple[float, ...]:
    try:
        out = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ParseError(path, f"{where}: expected {size} numbers", line=line, field=where)
    if len(out) != size:
        raise ParseError(path, f"{where}: expected {size} numbers, got {len(out)}", line=line, field=where)
    return out


def _number(value, path: str, where: str, line: Optional[int] = None) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ParseError(path, f"{where}: expected a number, got {value!r}", line=line, field=where)


def _array(value, path: str, where: str, line: Optional[int] = None) -> np.ndarray:
    try:
        return np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ParseError(path, f"{where}: expected an array of numbers", line=line, field=where)


def _check_header(data: Dict[str, Any], kind: str, path: str, line: Optional[int] = None) -> None:
    if not isinstance(data, dict) or data.get("format") != kind:
        raise ParseError(path, f"not a {kind} file (format field must be '{kind}')", line=line, field="format")
    if data.get("version") != FORMAT_VERSION:
        raise ParseError(path, f"unsupported {kind} file version {data.get('version')!r}", line=line,
                         field="version")


def _read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(path, f"invalid JSON: {e.msg} (column {e.colno})", line=e.lineno)


def robot_from_dict(data: Dict[str, Any], path: str = "<robot>") -> RobotModel:
    _check_header(data, "robot", path)
    joints = []
    for k, item in enumerate(_require(data, "joints", path, "robot")):
        name = _require(item, "name", path, f"joints[{k}]")
        where = f"joint '{name}'"
        kind = item.get("kind", "revolute")
        if kind == "revolute":
            limits = _vector(_require(item, "limits", path, where), path, f"{where}.limits", size=2)
        else:
            limits = (0.0, 0.0)
        joints.append(JointSpec(
            name=name,
            parent=item.get("parent"),
            origin_offset=_vector(_require(item, "offset", path, where), path, f"{where}.offset"),
            origin_rpy=_vector(item.get("rpy", (0.0, 0.0, 0.0)), path, f"{where}.rpy"),
            axis=_vector(item.get("axis", (0.0, 0.0, 1.0)), path, f"{where}.axis"),
            lower=limits[0],
            upper=limits[1],
            node_type=item.get("node_type", "arm"),
            kind=kind,
        ))
    markers = []
    for k, item in enumerate(data.get("markers", [])):
        name = _require(item, "name", path, f"markers[{k}]")
        where = f"marker '{name}'"
        markers.append(Marker(name, _require(item, "joint", path, where),
                              _vector(item.get("offset", (0.0, 0.0, 0.0)), path, f"{where}.offset")))
    capsules = []
    for k, item in enumerate(data.get("capsules", [])):
        name = _require(item, "name", path, f"capsules[{k}]")
        where = f"capsule '{name}'"
        radius = _number(_require(item, "radius", path, where), path, f"{where}.radius")
        capsules.append(Capsule(name, _require(item, "site_a", path, where), _require(item, "site_b", path, where),
                                radius, item.get("group", name)))
    chains = []
    for k, item in enumerate(data.get("chains", [])):
        name = _require(item, "name", path, f"chains[{k}]")
        where = f"chain '{name}'"
        fingers = tuple(
            Finger(_require(f, "name", path, f"{where}.fingers[{i}]"),
                   _require(f, "metacarpal", path, f"{where}.fingers[{i}]"),
                   _require(f, "tip", path, f"{where}.fingers[{i}]"))
            for i, f in enumerate(item.get("fingers", [])))
        chains.append(Chain(name, *(_require(item, key, path, where) for key in
                                    ("shoulder", "elbow", "wrist", "end_effector", "wrist_frame")), fingers))
    return RobotModel(str(_require(data, "name", path, "robot")), tuple(joints), tuple(markers), tuple(capsules),
                      tuple(chains), _number(data.get("d_min", 0.02), path, "robot.d_min"))


def robot_to_dict(model: RobotModel) -> Dict[str, Any]:
    joints = []
    for j in model.joints:
        item = {"name": j.name, "parent": j.parent, "kind": j.kind, "offset": list(j.origin_offset),
                "rpy": list(j.origin_rpy), "axis": list(j.axis), "node_type": j.node_type}
        if j.actuated:
            item["limits"] = [j.lower, j.upper]
        joints.append(item)
    return {
        "format": "robot",
        "version": FORMAT_VERSION,
        "name": model.name,
        "d_min": model.d_min,
        "joints": joints,
        "markers": [{"name": m.name, "joint": m.joint, "offset": list(m.offset)} for m in model.markers],
        "capsules": [{"name": c.name, "site_a": c.site_a, "site_b": c.site_b, "radius": c.radius,
                      "group": c.group} for c in model.capsules],
        "chains": [{"name": c.name, "shoulder": c.shoulder, "elbow": c.elbow, "wrist": c.wrist,
                    "end_effector": c.end_effector, "wrist_frame": c.wrist_frame,
                    "fingers": [{"name": f.name, "metacarpal": f.metacarpal, "tip": f.tip} for f in c.fingers]}
                   for c in model.chains],
    }


def load_robot(path: str) -> RobotModel:
    model = robot_from_dict(_read_json(path), path)
    logger.info(f"Loaded robot '{model.name}' from {path}: {model.n_dof} DoF, "
                f"{len(model.collision_pairs)} collision pairs")
    return model


def save_robot(model: RobotModel, path: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(robot_to_dict(model), f, indent=2)
    return path


def _frame_lengths(skeleton: HumanSkeleton) -> Dict[str, np.ndarray]:
    lengths = human_model(skeleton).norm_lengths
    return {
        "arm_lengths": np.array([lengths[c].arm for c in CHAINS]),
        "forearm_lengths": np.array([lengths[c].forearm for c in CHAINS]),
        "finger_lengths": np.array([lengths[c].fingers for c in CHAINS]),
    }


def save_demo(sequence: DemoSequence, path: str, euler: bool = False) -> str:
    """Write a demonstration as JSON Lines: header, then one frame per line.

    With `euler` the wrist orientations are written as roll-pitch-yaw triples
    instead of rotation matrices.
    """
    header = {
        "format": "demo",
        "version": FORMAT_VERSION,
        "label": sequence.label,
        "dt": sequence.dt,
        "frame": HUMAN_FRAME,
        "nodes": list(HUMAN_NODES),
        "skeleton": sequence.skeleton.to_dict(),
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for k, frame in enumerate(sequence.frames):
            record = {
                "t": k,
                "positions": frame.positions.tolist(),
                "arm_lengths": frame.arm_lengths.tolist(),
                "forearm_lengths": frame.forearm_lengths.tolist(),
                "finger_lengths": frame.finger_lengths.tolist(),
            }
            if euler:
                record["wrist_euler"] = [matrix_to_rpy(r).tolist() for r in frame.wrist_rotations]
            else:
                record["wrist_rotations"] = frame.wrist_rotations.tolist()
            f.write(json.dumps(record) + "\n")
    return path


def _parse_frame(record: Dict[str, Any], defaults: Dict[str, np.ndarray], path: str, line: int) -> DemoFrame:
    where = f"frame {record.get('t', line - 2) if isinstance(record, dict) else line - 2}"
    positions = _array(_require(record, "positions", path, where, line), path, f"{where}.positions", line)
    if positions.shape != (len(HUMAN_NODES), 3):
        raise ParseError(path, f"{where}: positions must be {len(HUMAN_NODES)}x3", line=line, field="positions")
    if "wrist_rotations" in record:
        rotations = _array(record["wrist_rotations"], path, f"{where}.wrist_rotations", line)
    elif "wrist_euler" in record:
        euler = _array(record["wrist_euler"], path, f"{where}.wrist_euler", line)
        if euler.shape != (len(CHAINS), 3):
            raise ParseError(path, f"{where}: wrist_euler must be {len(CHAINS)}x3", line=line, field="wrist_euler")
        rotations = np.stack([rpy_to_matrix(e) for e in euler])
    else:
        raise ParseError(path, f"{where}: missing field 'wrist_rotations'", line=line, field="wrist_rotations")
    if rotations.shape != (len(CHAINS), 3, 3):
        raise ParseError(path, f"{where}: wrist_rotations must be {len(CHAINS)}x3x3", line=line,
                         field="wrist_rotations")
    lengths = {key: _array(record.get(key, value), path, f"{where}.{key}", line)
               for key, value in defaults.items()}
    frame = DemoFrame(positions, rotations, **lengths)
    try:
        frame.validate(tolerance=1e-3)
    except ValidationError as e:
        raise ValidationError(f"{path}:{line}: {e}")
    return frame


def load_demo(path: str) -> DemoSequence:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    records = []
    for number, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            records.append((number, json.loads(text)))
        except json.JSONDecodeError as e:
            raise ParseError(path, f"invalid JSON: {e.msg} (column {e.colno})", line=number)
    if not records:
        raise ParseError(path, "empty demonstration file", line=1)
    header_line, header = records[0]
    _check_header(header, "demo", path, header_line)
    nodes = header.get("nodes", list(HUMAN_NODES))
    if list(nodes) != list(HUMAN_NODES):
        raise ParseError(path, "node list does not match the canonical human skeleton", line=header_line,
                         field="nodes")
    skeleton = HumanSkeleton()
    if "skeleton" in header:
        try:
            skeleton = HumanSkeleton.from_dict(header["skeleton"])
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(path, f"header.skeleton: {e!r}", line=header_line, field="header.skeleton")
    dt = _number(_require(header, "dt", path, "header", header_line), path, "header.dt", header_line)
    defaults = _frame_lengths(skeleton)
    frames = [_parse_frame(record, defaults, path, number) for number, record in records[1:]]
    sequence = DemoSequence(frames, dt, skeleton, str(header.get("label", os.path.splitext(os.path.basename(path))[0])))
    sequence.validate()
    logger.debug(f"Loaded demo '{sequence.label}' ({len(frames)} frames) from {path}")
    return sequence


def load_demo_dir(path: str) -> List[DemoSequence]:
    files = sorted(glob.glob(os.path.join(path, "*.demo")))
    if not files:
        logger.warning(f"No .demo files found in {path}")
    return [load_demo(f) for f in files]


def synth_demo(seed: int, n_frames: int, dt: float = DEFAULT_DT, skeleton: HumanSkeleton = HumanSkeleton(),
               difficulty: float = 1.0, style: str = "sign", label: Optional[str] = None) -> DemoSequence:
    """Smooth synthetic demonstration from sums of random-phase sinusoids on the human joints.

    Each joint angle is rest + sum_k A_k sin(2 pi t / T_k + phi_k) with 3 to 6 terms,
    periods T_k in [1, 4] s and amplitudes split so the joint speed never exceeds
    difficulty * MAX_JOINT_SPEED rad/s.
    """
    if n_frames < 1:
        raise ValidationError(f"synthetic demo needs at least one frame, got {n_frames}")
    model = human_model(skeleton)
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) * dt
    angles = np.tile(rest_pose(model, style), (n_frames, 1))
    for j in range(model.n_dof):
        terms = int(rng.integers(3, 7))
        periods = rng.uniform(1.0, 4.0, size=terms)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=terms)
        shares = rng.dirichlet(np.ones(terms))
        amplitudes = difficulty * MAX_JOINT_SPEED * shares * periods / (2.0 * np.pi)
        angles[:, j] += np.sum(amplitudes * np.sin(2.0 * np.pi * t[:, None] / periods + phases), axis=1)

    transforms = forward_kinematics(model, angles)
    sites = marker_positions(model, transforms, HUMAN_NODES)
    positions = np.stack([sites[name] for name in HUMAN_NODES], axis=1)
    rotations = np.stack([transforms.rotation(chain.wrist_frame) for chain in model.chains], axis=1)
    lengths = _frame_lengths(skeleton)
    frames = [DemoFrame(positions[k], rotations[k], **{key: v.copy() for key, v in lengths.items()})
              for k in range(n_frames)]
    return DemoSequence(frames, dt, skeleton, label or f"synth-{style}-{seed:05d}")


def make_dataset(n_train: int = 61, n_test: int = 25, seed: int = 0, frame_range: Tuple[int, int] = (100, 250),
                 dt: float = DEFAULT_DT, difficulty: float = 1.0, style: str = "sign",
                 test_offset: int = 10000) -> Tuple[List[DemoSequence], List[DemoSequence]]:
    """Train and test sequences drawn from disjoint seed ranges."""
    if n_train > test_offset:
        raise ValidationError("train seeds would overlap the test seed range")

    def build(first: int, count: int) -> List[DemoSequence]:
        out = []
        for s in range(first, first + count):
            frames = int(np.random.default_rng([s, 1]).integers(frame_range[0], frame_range[1] + 1))
            out.append(synth_demo(s, frames, dt, difficulty=difficulty, style=style))
        return out

    train, test = build(seed, n_train), build(seed + test_offset, n_test)
    logger.info(f"Synthesised {len(train)} train / {len(test)} test sequences "
                f"({sum(map(len, train))} / {sum(map(len, test))} frames)")
    return train, test


def save_dataset(sequences: Sequence[DemoSequence], directory: str) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    return [save_demo(seq, os.path.join(directory, f"{seq.label}.demo")) for seq in sequences]
