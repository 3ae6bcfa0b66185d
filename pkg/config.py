"""
Run configuration for the command-line tools.

Values are layered: built-in defaults, then the environment (a .env file is
loaded first), then an optional JSON config file, then command-line flags.
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

from dotenv import load_dotenv

from errors import ConfigurationError
from graphnet import ARCHITECTURES, BOUNDS, D_Z
from autodiff import ACTIVATIONS
from objective import ObjectiveWeights
from retarget import INITS, MODES, LatentOptions, TrainOptions

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
STYLES = ("sign", "crossing")
SECTIONS = {"weights": ObjectiveWeights, "optim": LatentOptions, "train": TrainOptions}


@dataclass
class RunConfig:
    """Everything a command needs; see `load_config` for how values are layered."""

    robot: str = "robots/arm7x2_hand.robot"
    demos: Optional[str] = None
    train_demos: Optional[str] = None
    checkpoint: Optional[str] = None
    trajectories: Optional[str] = None
    output_dir: str = "runs"
    seed: int = 0
    jobs: int = 1
    log_level: str = "INFO"

    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    optim: LatentOptions = field(default_factory=LatentOptions)
    train: TrainOptions = field(default_factory=TrainOptions)

    mode: str = "latent_opt"
    init: str = "neural"
    sigma: float = 1.0
    warm_start: bool = False
    chunk: int = 64
    frame_limit: Optional[int] = None

    architecture: str = "graph"
    activation: str = "leaky_relu"
    bound: str = "tanh"
    d_z: int = D_Z
    bidirectional: bool = True

    # synthetic dataset
    n_train: int = 61
    n_test: int = 25
    frame_min: int = 100
    frame_max: int = 250
    difficulty: float = 1.0
    style: str = "sign"
    dt: float = 1.0 / 30.0

    # compare-init
    compare_variances: Tuple[float, ...] = (0.1, 0.2)

    # ablate
    ablate_architectures: Tuple[str, ...] = ("graph", "dense")
    ablate_activations: Tuple[str, ...] = ("sigmoid", "tanh", "relu", "leaky_relu")
    ablate_modes: Tuple[str, ...] = MODES
    ablate_supervised: bool = False

    # gradcheck
    gradcheck_seeds: int = 100
    gradcheck_tolerance: float = 1e-4

    def validate(self) -> None:
        """Raise ConfigurationError naming every invalid field."""
        problems: List[str] = []
        for section in SECTIONS:
            problems += getattr(self, section).validate()
        if self.mode not in MODES:
            problems.append(f"mode: must be one of {MODES}, got '{self.mode}'")
        if self.init not in INITS:
            problems.append(f"init: must be one of {INITS}, got '{self.init}'")
        if self.architecture not in ARCHITECTURES:
            problems.append(f"architecture: must be one of {ARCHITECTURES}, got '{self.architecture}'")
        if self.activation not in ACTIVATIONS:
            problems.append(f"activation: must be one of {tuple(ACTIVATIONS)}, got '{self.activation}'")
        if self.bound not in BOUNDS:
            problems.append(f"bound: must be one of {BOUNDS}, got '{self.bound}'")
        if self.style not in STYLES:
            problems.append(f"style: must be one of {STYLES}, got '{self.style}'")
        if self.log_level.upper() not in LOG_LEVELS:
            problems.append(f"log_level: must be one of {LOG_LEVELS}, got '{self.log_level}'")
        for name in ("jobs", "chunk", "d_z", "gradcheck_seeds", "frame_min"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be positive, got {getattr(self, name)}")
        for name in ("seed", "n_train", "n_test"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        if self.frame_max < self.frame_min:
            problems.append(f"frame_max: must be >= frame_min ({self.frame_min}), got {self.frame_max}")
        if self.frame_limit is not None and self.frame_limit < 1:
            problems.append(f"frame_limit: must be positive, got {self.frame_limit}")
        if self.sigma < 0:
            problems.append(f"sigma: must be >= 0, got {self.sigma}")
        if not self.dt > 0:
            problems.append(f"dt: must be positive, got {self.dt}")
        if not self.difficulty > 0:
            problems.append(f"difficulty: must be positive, got {self.difficulty}")
        if not self.gradcheck_tolerance > 0:
            problems.append(f"gradcheck_tolerance: must be positive, got {self.gradcheck_tolerance}")
        if any(v < 0 for v in self.compare_variances):
            problems.append(f"compare_variances: must be >= 0, got {list(self.compare_variances)}")
        for name, allowed in (("ablate_architectures", ARCHITECTURES), ("ablate_activations", tuple(ACTIVATIONS)),
                              ("ablate_modes", MODES)):
            unknown = [v for v in getattr(self, name) if v not in allowed]
            if unknown or not getattr(self, name):
                problems.append(f"{name}: entries must be non-empty and drawn from {allowed}, got {unknown or '[]'}")
        if problems:
            raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(problems))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Build a config from a (possibly partial) nested dict; unknown keys are rejected."""
        return _merge(cls(), data, "")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, current: Any, value: Any) -> Any:
    if value is None:
        return None
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("1", "true", "yes")
            return bool(value)
        if isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            items = value.split(",") if isinstance(value, str) else list(value)
            kind = type(current[0]) if current else str
            return tuple(kind(v.strip() if isinstance(v, str) else v) for v in items)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name}: cannot interpret {value!r} as {type(current).__name__}")
    return value


def _merge(config: RunConfig, data: Mapping[str, Any], source: str) -> RunConfig:
    changes: Dict[str, Any] = {}
    where = f" in {source}" if source else ""
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigurationError(f"{key}: expected an object{where}")
            section = getattr(config, key)
            known = {f.name: f for f in fields(section)}
            updates = {}
            for sub, sub_value in value.items():
                if sub not in known:
                    raise ConfigurationError(f"{key}.{sub}: unknown setting{where}")
                updates[sub] = _coerce(f"{key}.{sub}", getattr(section, sub), sub_value)
            changes[key] = replace(section, **updates)
        elif key in _FIELDS:
            current = getattr(config, key)
            default = _FIELDS[key].default
            changes[key] = _coerce(key, current if current is not None else default, value)
        else:
            raise ConfigurationError(f"{key}: unknown setting{where}")
    return replace(config, **changes)


def _env_settings() -> Dict[str, Any]:
    load_dotenv()
    return {
        "output_dir": os.getenv('RETARGET_OUTPUT_DIR', 'runs'),
        "robot": os.getenv('RETARGET_ROBOT', 'robots/arm7x2_hand.robot'),
        "seed": os.getenv('RETARGET_SEED', '0'),
        "log_level": os.getenv('RETARGET_LOG_LEVEL', 'INFO'),
        "jobs": os.getenv('RETARGET_JOBS', '1'),
    }


def _nest(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Turn flag overrides with dotted keys ("weights.ee") into nested dicts; None means unset."""
    nested: Dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            section, sub = key.split(".", 1)
            nested.setdefault(section, {})[sub] = value
        else:
            nested[key] = value
    return nested


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                use_env: bool = True) -> RunConfig:
    """Layer defaults, environment, JSON file and flag overrides, then validate.

    Args:
        path: optional JSON config file
        overrides: flag values; dotted keys address the weights/optim/train sections
        use_env: read RETARGET_* variables (and .env)

    Returns:
        RunConfig: validated configuration
    """
    config = RunConfig()
    if use_env:
        config = _merge(config, _env_settings(), "environment")
    if path:
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: a config file must hold a JSON object")
        config = _merge(config, data, path)
        logger.info(f"Loaded config file {path}")
    if overrides:
        config = _merge(config, _nest(overrides), "command-line flags")
    config.validate()
    return config
