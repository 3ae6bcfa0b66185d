"""
Skeleton graphs, the residual graph convolution and the encoder/decoder networks.

Parameters live in one flat dict of numpy arrays keyed by dotted names
(``encoder.conv1.arm.W``). Every forward function accepts either that dict or
a dict of tape Values with the same keys, so the same code runs plain
inference and differentiable training.
"""
import hashlib
import json
import logging
import os
import zipfile
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tape
from errors import CheckpointError, ConfigurationError, UsageError
from kinematics import NODE_TYPES, RobotModel
from skeleton import HUMAN_NODES, HumanSkeleton, human_links, human_model, node_type

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ARCHITECTURES = ("graph", "dense")
BOUNDS = ("tanh", "sigmoid")
D_Z = 64
ENCODER_CHANNELS = (16, 32, 64)
DECODER_CHANNELS = (32, 16, 1)
DENSE_HIDDEN = (256, 256)


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    """Typed directed graph over the joints of a human or a robot."""

    kind: str
    node_names: Tuple[str, ...]
    node_types: Tuple[str, ...]
    src: np.ndarray
    dst: np.ndarray
    edge_features: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("human", "robot"):
            raise UsageError(f"graph kind must be human or robot, got '{self.kind}'")
        if len(self.node_names) != len(self.node_types):
            raise UsageError("every node needs a type")
        if np.any(self.src == self.dst):
            raise UsageError("skeleton graphs have no self-loops")
        if not (len(self.src) == len(self.dst) == len(self.edge_features)):
            raise UsageError("edge arrays disagree in length")

    @property
    def n_nodes(self) -> int:
        return len(self.node_names)

    @property
    def edge_ch(self) -> int:
        return int(self.edge_features.shape[1]) if self.edge_features.ndim == 2 else 0

    def with_features(self, features) -> "SkeletonGraph":
        return replace(self, features=np.asarray(features, dtype=float))

    def incoming(self, kind: str) -> np.ndarray:
        """Indices of the edges whose receiving node has the given type."""
        types = np.array(self.node_types)
        return np.flatnonzero(types[self.dst] == kind) if len(self.dst) else np.zeros(0, dtype=int)

    def nodes_of(self, kind: str) -> np.ndarray:
        return np.flatnonzero(np.array(self.node_types) == kind)

    def relabel(self, order: Sequence[int]) -> "SkeletonGraph":
        """Same graph with node `order[k]` moved to position k."""
        order = np.asarray(order, dtype=int)
        position = np.empty_like(order)
        position[order] = np.arange(len(order))
        features = None if self.features is None else self.features[..., order, :]
        return SkeletonGraph(
            kind=self.kind,
            node_names=tuple(self.node_names[i] for i in order),
            node_types=tuple(self.node_types[i] for i in order),
            src=position[self.src],
            dst=position[self.dst],
            edge_features=self.edge_features.copy(),
            features=features,
        )


def _link_edges(links: List[Tuple[int, int, np.ndarray]], n_offset: int, bidirectional: bool):
    src, dst, feats = [], [], []
    for parent, child, feature in links:
        src.append(parent)
        dst.append(child)
        feats.append(feature)
        if bidirectional:
            back = feature.copy()
            back[:n_offset] = -back[:n_offset]
            src.append(child)
            dst.append(parent)
            feats.append(back)
    width = len(links[0][2]) if links else n_offset
    return (np.array(src, dtype=int), np.array(dst, dtype=int),
            np.array(feats, dtype=float).reshape(-1, width))


def human_graph(skeleton: HumanSkeleton = HumanSkeleton(), bidirectional: bool = True,
                positions: Optional[np.ndarray] = None) -> SkeletonGraph:
    """Graph of the 26 human nodes; edge features are the zero-pose link offsets."""
    rest = human_model(skeleton).zero_pose_sites
    index = {n: i for i, n in enumerate(HUMAN_NODES)}
    links = [(index[a], index[b], rest[b] - rest[a]) for a, b in human_links()]
    src, dst, feats = _link_edges(links, 3, bidirectional)
    graph = SkeletonGraph("human", HUMAN_NODES, tuple(node_type(n) for n in HUMAN_NODES), src, dst, feats)
    return graph if positions is None else graph.with_features(positions)


def robot_graph(model: RobotModel, bidirectional: bool = True) -> SkeletonGraph:
    """One node per joint; edge features are origin offset and origin rpy (6 channels)."""
    links = []
    for i, (joint, parent) in enumerate(zip(model.joints, model.parent_index)):
        if parent < 0:
            continue
        feature = np.concatenate([np.asarray(joint.origin_offset, float), np.asarray(joint.origin_rpy, float)])
        links.append((parent, i, feature))
    src, dst, feats = _link_edges(links, 3, bidirectional)
    return SkeletonGraph("robot", tuple(j.name for j in model.joints),
                         tuple(j.node_type for j in model.joints), src, dst, feats)


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class GraphConvLayer:
    """Residual graph convolution with one weight set per node type.

    x'_i = proj(x_i) + sum over incoming edges j->i of g(W [x_i, x_j, e_ji] + b),
    where W, b and proj are chosen by the type of the receiving node i and proj
    is the identity when the widths agree.
    """

    name: str
    in_ch: int
    out_ch: int
    edge_ch: int
    activation: str = "leaky_relu"
    weights: Dict[str, np.ndarray] = field(default_factory=dict)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for kind in NODE_TYPES:
            shapes[f"{kind}.W"] = (self.out_ch, 2 * self.in_ch + self.edge_ch)
            shapes[f"{kind}.b"] = (self.out_ch,)
            if self.in_ch != self.out_ch:
                shapes[f"{kind}.P"] = (self.out_ch, self.in_ch)
        return shapes

    def init(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        fan_in = 2 * self.in_ch + self.edge_ch
        self.weights = {
            key: _uniform(rng, shape, self.in_ch if key.endswith(".P") else fan_in)
            for key, shape in self.shapes().items()
        }
        return self.weights


def graph_conv(layer: GraphConvLayer, graph: SkeletonGraph, x=None, params: Optional[Mapping] = None):
    """Apply one residual graph convolution to node features of shape (N, C) or (B, N, C)."""
    params = layer.weights if params is None else params
    act = ad.activation(layer.activation)
    x = graph.features if x is None else x
    if x is None:
        raise UsageError(f"graph '{graph.kind}' carries no node features")
    data = ad.payload(x)
    if data.shape[-1] != layer.in_ch:
        raise ConfigurationError(f"layer '{layer.name}' expects {layer.in_ch} input channels, got {data.shape[-1]}")
    if graph.edge_ch != layer.edge_ch:
        raise ConfigurationError(f"layer '{layer.name}' expects {layer.edge_ch} edge channels, got {graph.edge_ch}")
    if data.ndim not in (2, 3) or data.shape[-2] != graph.n_nodes:
        raise UsageError(f"node features of shape {data.shape} do not fit a graph of {graph.n_nodes} nodes")
    batched = data.ndim == 3
    if not batched:
        x = ad.reshape(x, (1,) + data.shape)
    batch, n = ad.payload(x).shape[0], graph.n_nodes
    every = slice(None)

    messages = None
    for kind in NODE_TYPES:
        edges = graph.incoming(kind)
        if not edges.size:
            continue
        x_i = ad.take(x, (every, graph.dst[edges]))
        x_j = ad.take(x, (every, graph.src[edges]))
        e_ji = np.broadcast_to(graph.edge_features[edges], (batch, edges.size, layer.edge_ch))
        z = ad.concat([x_i, x_j, e_ji], axis=-1)
        msg = act(ad.add(ad.matmul(z, ad.swap_last(params[f"{kind}.W"])), params[f"{kind}.b"]))
        agg = ad.segment_sum(msg, graph.dst[edges], n, axis=1)
        messages = agg if messages is None else ad.add(messages, agg)

    if layer.in_ch == layer.out_ch:
        residual = x
    else:
        residual = None
        for kind in NODE_TYPES:
            nodes = graph.nodes_of(kind)
            if not nodes.size:
                continue
            proj = ad.matmul(ad.take(x, (every, nodes)), ad.swap_last(params[f"{kind}.P"]))
            proj = ad.segment_sum(proj, nodes, n, axis=1)
            residual = proj if residual is None else ad.add(residual, proj)
    out = residual if messages is None else ad.add(residual, messages)
    return out if batched else ad.take(out, 0)


def _scope(params: Mapping, prefix: str) -> Dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def bound_to_limits(u, lower, upper, bound: str = "tanh"):
    """Map unbounded read-outs into (lower, upper): tanh or sigmoid, then a linear remap."""
    lower = np.asarray(lower, dtype=float)
    span = np.asarray(upper, dtype=float) - lower
    if bound == "tanh":
        unit = ad.mul(ad.add(ad.tanh(u), 1.0), 0.5)
    elif bound == "sigmoid":
        unit = ad.sigmoid(u)
    else:
        raise ConfigurationError(f"bound must be one of {BOUNDS}, got '{bound}'")
    return ad.add(lower, ad.mul(unit, span))


class GraphEncoder:
    """Three graph convolutions (3 -> 16 -> 32 -> 64) and a linear bridge to the latent code."""

    def __init__(self, graph: SkeletonGraph, n_robot: int, d_z: int, activation: str):
        self.graph = graph
        self.n_robot = n_robot
        self.d_z = d_z
        widths = (3,) + ENCODER_CHANNELS
        self.layers = [GraphConvLayer(f"conv{k + 1}", widths[k], widths[k + 1], graph.edge_ch, activation)
                       for k in range(len(ENCODER_CHANNELS))]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            shapes.update({f"{layer.name}.{k}": s for k, s in layer.shapes().items()})
        flat = self.graph.n_nodes * ENCODER_CHANNELS[-1]
        shapes["bridge.W"] = (self.n_robot * self.d_z, flat)
        shapes["bridge.b"] = (self.n_robot * self.d_z,)
        return shapes

    def forward(self, params: Mapping, x):
        h = x
        for layer in self.layers:
            h = graph_conv(layer, self.graph, h, _scope(params, layer.name))
        batch = ad.payload(h).shape[0]
        h = ad.reshape(h, (batch, -1))
        z = ad.add(ad.matmul(h, ad.swap_last(params["bridge.W"])), params["bridge.b"])
        return ad.reshape(z, (batch, self.n_robot, self.d_z))


class GraphDecoder:
    """Three graph convolutions (d_z + 2 -> 32 -> 16 -> 1) over the robot graph."""

    def __init__(self, graph: SkeletonGraph, d_z: int, activation: str):
        self.graph = graph
        self.d_z = d_z
        widths = (d_z + 2,) + DECODER_CHANNELS
        self.layers = [GraphConvLayer(f"conv{k + 1}", widths[k], widths[k + 1], graph.edge_ch, activation)
                       for k in range(len(DECODER_CHANNELS))]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for layer in self.layers:
            shapes.update({f"{layer.name}.{k}": s for k, s in layer.shapes().items()})
        return shapes

    def forward(self, params: Mapping, z, limits: np.ndarray):
        batch = ad.payload(z).shape[0]
        h = ad.concat([z, np.broadcast_to(limits, (batch,) + limits.shape)], axis=-1)
        for layer in self.layers:
            h = graph_conv(layer, self.graph, h, _scope(params, layer.name))
        return ad.reshape(h, (batch, self.graph.n_nodes))


class _Dense:
    """Fully connected stack shared by the dense encoder and decoder."""

    def __init__(self, widths: Sequence[int], activation: str):
        self.widths = tuple(widths)
        self.activation = activation

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for k in range(len(self.widths) - 1):
            shapes[f"fc{k + 1}.W"] = (self.widths[k + 1], self.widths[k])
            shapes[f"fc{k + 1}.b"] = (self.widths[k + 1],)
        return shapes

    def run(self, params: Mapping, h):
        act = ad.activation(self.activation)
        last = len(self.widths) - 1
        for k in range(1, last + 1):
            h = ad.add(ad.matmul(h, ad.swap_last(params[f"fc{k}.W"])), params[f"fc{k}.b"])
            if k < last:
                h = act(h)
        return h


class DenseEncoder(_Dense):
    def __init__(self, n_human: int, n_robot: int, d_z: int, activation: str):
        super().__init__((3 * n_human,) + DENSE_HIDDEN + (n_robot * d_z,), activation)
        self.n_robot = n_robot
        self.d_z = d_z

    def forward(self, params: Mapping, x):
        batch = ad.payload(x).shape[0]
        z = self.run(params, ad.reshape(x, (batch, -1)))
        return ad.reshape(z, (batch, self.n_robot, self.d_z))


class DenseDecoder(_Dense):
    def __init__(self, n_robot: int, d_z: int, activation: str):
        super().__init__((n_robot * (d_z + 2),) + DENSE_HIDDEN + (n_robot,), activation)
        self.n_robot = n_robot

    def forward(self, params: Mapping, z, limits: np.ndarray):
        batch = ad.payload(z).shape[0]
        h = ad.concat([z, np.broadcast_to(limits, (batch,) + limits.shape)], axis=-1)
        return self.run(params, ad.reshape(h, (batch, -1)))


@dataclass
class RetargetNets:
    """Encoder and decoder for one robot, with their flat parameter dict."""

    robot: RobotModel
    skeleton: HumanSkeleton
    architecture: str
    activation: str
    bound: str
    d_z: int
    bidirectional: bool
    encoder: object
    decoder: object
    params: Dict[str, np.ndarray]
    latent_mean: Optional[np.ndarray] = None
    latent_std: Optional[np.ndarray] = None

    @property
    def latent_shape(self) -> Tuple[int, int]:
        return (self.robot.n_joints, self.d_z)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {f"encoder.{k}": s for k, s in self.encoder.shapes().items()}
        shapes.update({f"decoder.{k}": s for k, s in self.decoder.shapes().items()})
        return shapes

    @property
    def topology_hash(self) -> str:
        description = {
            "robot": [[j.name, j.parent, j.kind, j.node_type] for j in self.robot.joints],
            "human": list(HUMAN_NODES),
            "architecture": self.architecture,
            "activation": self.activation,
            "bound": self.bound,
            "d_z": self.d_z,
            "bidirectional": self.bidirectional,
            "params": {k: list(v) for k, v in sorted(self.shapes().items())},
        }
        payload = json.dumps(description, sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def bind(self, tape: Tape, trainable: bool = True) -> Dict[str, ad.Value]:
        """Record every parameter on the tape, as variables or as frozen constants."""
        make = tape.variable if trainable else tape.constant
        return {name: make(value) for name, value in self.params.items()}

    def copy(self) -> "RetargetNets":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


def build_nets(robot: RobotModel, skeleton: HumanSkeleton = HumanSkeleton(), architecture: str = "graph",
               activation: str = "leaky_relu", bound: str = "tanh", d_z: int = D_Z,
               bidirectional: bool = True) -> RetargetNets:
    """Network structure without weights; init_weights or load_checkpoint fill the params."""
    if architecture not in ARCHITECTURES:
        raise ConfigurationError(f"architecture must be one of {ARCHITECTURES}, got '{architecture}'")
    if bound not in BOUNDS:
        raise ConfigurationError(f"bound must be one of {BOUNDS}, got '{bound}'")
    ad.activation(activation)
    if d_z < 1:
        raise ConfigurationError(f"latent width must be positive, got {d_z}")
    human = human_graph(skeleton, bidirectional)
    if architecture == "graph":
        encoder = GraphEncoder(human, robot.n_joints, d_z, activation)
        decoder = GraphDecoder(robot_graph(robot, bidirectional), d_z, activation)
    else:
        encoder = DenseEncoder(human.n_nodes, robot.n_joints, d_z, activation)
        decoder = DenseDecoder(robot.n_joints, d_z, activation)
    return RetargetNets(robot, skeleton, architecture, activation, bound, d_z, bidirectional,
                        encoder, decoder, {})


def init_weights(seed: int, robot: RobotModel, **options) -> RetargetNets:
    """Seeded uniform fan-in initialisation, bound 1/sqrt(fan_in)."""
    nets = build_nets(robot, **options)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in nets.shapes().items():
        if name.endswith(".P"):
            fan_in = shape[1]
        elif name.endswith(".b"):
            fan_in = nets.shapes()[name[:-1] + "W"][1]
        else:
            fan_in = shape[-1]
        params[name] = _uniform(rng, shape, fan_in)
    nets.params = params
    logger.debug(f"initialised {len(params)} parameter arrays for {robot.name} (seed {seed})")
    return nets


def _human_features(nets: RetargetNets, demo):
    if isinstance(demo, SkeletonGraph):
        if demo.kind != "human" or demo.node_names != HUMAN_NODES:
            raise UsageError("encoder input graph does not match the human skeleton topology")
        demo = demo.features
    data = ad.payload(demo)
    if data.ndim not in (2, 3) or data.shape[-2:] != (len(HUMAN_NODES), 3):
        raise UsageError(f"encoder expects ({len(HUMAN_NODES)}, 3) human positions, got {data.shape}")
    return demo


def encode(nets: RetargetNets, demo, params: Optional[Mapping] = None):
    """Initial latent code z0 of shape (N_r, d_z), or (B, N_r, d_z) for a batch of frames."""
    x = _human_features(nets, demo)
    batched = ad.payload(x).ndim == 3
    if not batched:
        x = ad.reshape(x, (1,) + ad.payload(x).shape)
    z = nets.encoder.forward(_scope(params if params is not None else nets.params, "encoder"), x)
    return z if batched else ad.take(z, 0)


def decode(nets: RetargetNets, z, params: Optional[Mapping] = None):
    """Joint angles (n_dof,) or (B, n_dof), always strictly inside the joint limits."""
    data = ad.payload(z)
    if data.shape[-2:] != nets.latent_shape or data.ndim not in (2, 3):
        raise UsageError(f"latent code must have shape {nets.latent_shape}, got {data.shape}")
    batched = data.ndim == 3
    if not batched:
        z = ad.reshape(z, (1,) + data.shape)
    robot = nets.robot
    u = nets.decoder.forward(_scope(params if params is not None else nets.params, "decoder"), z,
                             robot.node_limits)
    u = ad.take(u, (slice(None), np.asarray(robot.actuated, dtype=int)))
    angles = bound_to_limits(u, robot.lower, robot.upper, nets.bound)
    return angles if batched else ad.take(angles, 0)


def save_checkpoint(nets: RetargetNets, path: str, extra: Optional[dict] = None) -> str:
    """Write parameters and a JSON header (format version, topology hash, options) to an .npz file."""
    header = {
        "version": CHECKPOINT_VERSION,
        "topology_hash": nets.topology_hash,
        "robot": nets.robot.name,
        "architecture": nets.architecture,
        "activation": nets.activation,
        "bound": nets.bound,
        "d_z": nets.d_z,
        "bidirectional": nets.bidirectional,
        "skeleton": nets.skeleton.to_dict(),
        "extra": extra or {},
    }
    arrays = {f"param:{k}": v for k, v in nets.params.items()}
    if nets.latent_mean is not None:
        arrays["latent:mean"] = nets.latent_mean
        arrays["latent:std"] = nets.latent_std
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: str, robot: RobotModel) -> RetargetNets:
    """Rebuild nets from a checkpoint; refuse checkpoints trained for another topology."""
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            params = {k[len("param:"):]: data[k].copy() for k in data.files if k.startswith("param:")}
            mean = data["latent:mean"].copy() if "latent:mean" in data.files else None
            std = data["latent:std"].copy() if "latent:std" in data.files else None
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    nets = build_nets(robot, HumanSkeleton.from_dict(header["skeleton"]), header["architecture"],
                      header["activation"], header["bound"], int(header["d_z"]), bool(header["bidirectional"]))
    if nets.topology_hash != header["topology_hash"]:
        raise CheckpointError(
            f"{path}: checkpoint was trained for a different topology (robot '{header.get('robot')}')")
    shapes = nets.shapes()
    for name, shape in shapes.items():
        if name not in params or params[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: parameter '{name}' missing or misshapen")
    nets.params = {name: params[name] for name in shapes}
    nets.latent_mean, nets.latent_std = mean, std
    logger.info(f"Loaded checkpoint {path} ({nets.architecture}, {nets.activation})")
    return nets
