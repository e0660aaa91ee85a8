"""
Run configuration: built-in defaults, config files (JSON or YAML) and CLI overrides.

Precedence is CLI flag > config file > default. Unknown keys are rejected with
their dotted path so typos never silently fall back to a default.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from .errors import ConfigError
from .logging_config import get_logger
from .numerics import derive_substream, seeded_rng

COMPONENTS = ("eyebrows", "eyes", "lips", "face")

# Per-component starting times at T = 1000 (K of 180 face, 100 eyes, 80 lips/brows)
DEFAULT_T_C = {"face": 180, "eyes": 100, "lips": 80, "eyebrows": 80}
DEFAULT_ALPHA = {"face": 0.8, "eyes": 0.8, "lips": 0.8, "eyebrows": 0.8}
REFERENCE_STEPS = 1000

# Substreams of the run seed for sections that do not set their own
SEED_INIT = 1
SEED_TRAIN = 2
SEED_TRANSLATE = 3


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class ModelConfig:
    architecture: str = "unet"
    widths: Tuple[int, ...] = (32, 64, 128)
    groups: int = 8
    time_dim: int = 64
    cond_dim: int = 64
    mlp_hidden: int = 256
    init_seed: Optional[int] = None


@dataclass
class TrainingConfig:
    iterations: int = 6000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 1000
    flip: bool = True
    log_every: int = 100
    seed: Optional[int] = None


@dataclass
class TranslationConfig:
    K: int = 180
    gamma: float = 1.0
    encode_variant: str = "posterior"
    cam: str = "default"
    t_c: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_T_C))
    alpha: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_ALPHA))
    constraint_scope: str = "overlap"
    ddim_steps: int = 20
    seed: Optional[int] = None


@dataclass
class PathsConfig:
    """Defaults for the corpus and model file when the command line leaves them out."""

    data: Optional[str] = None
    model: Optional[str] = None


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data["model"]["widths"] = list(self.model.widths)
        return data

    def with_run_seed(self, seed: int) -> "RunConfig":
        """New run seed; section seeds are cleared so they derive from it."""
        if seed < 0:
            raise ConfigError("seed: seeds must be non-negative")
        return dataclasses.replace(
            self,
            seed=seed,
            model=dataclasses.replace(self.model, init_seed=None),
            training=dataclasses.replace(self.training, seed=None),
            translation=dataclasses.replace(self.translation, seed=None),
        )

    def derived_seed(self, section: int) -> int:
        """Seed for one randomized subroutine, split off the run seed."""
        return derive_substream(seeded_rng(self.seed), section).stream

    def init_seed(self) -> int:
        if self.model.init_seed is not None:
            return self.model.init_seed
        return self.derived_seed(SEED_INIT)

    def training_seed(self) -> int:
        if self.training.seed is not None:
            return self.training.seed
        return self.derived_seed(SEED_TRAIN)

    def translation_seed(self) -> int:
        if self.translation.seed is not None:
            return self.translation.seed
        return self.derived_seed(SEED_TRANSLATE)

    def scaled_translation_steps(self) -> Tuple[int, Dict[str, int]]:
        """K and t_c rescaled to the configured step count (T/1000)."""
        return scale_steps(self.translation.K, self.translation.t_c, self.schedule.T)


_ENUMS = {
    "model.architecture": ("unet", "mlp"),
    "translation.encode_variant": ("posterior", "marginal"),
    "translation.cam": ("default", "off", "literal"),
    "translation.constraint_scope": ("overlap", "union", "global"),
}

# Optional fields; an unset seed derives from the run seed
_OPTIONAL = {
    "model.init_seed": int,
    "training.seed": int,
    "translation.seed": int,
    "paths.data": str,
    "paths.model": str,
}


def scale_steps(K: int, t_c: Mapping[str, int], T: int) -> Tuple[int, Dict[str, int]]:
    """Scale step counts defined at T = 1000 to another schedule length."""
    if T == REFERENCE_STEPS:
        return int(K), {name: int(v) for name, v in t_c.items()}

    def rescale(value: int) -> int:
        return max(1, min(T, int(round(value * T / REFERENCE_STEPS))))

    return rescale(K), {name: rescale(v) for name, v in t_c.items()}


def _coerce(path: str, default: Any, value: Any) -> Any:
    if path in _OPTIONAL:
        if value is None:
            return None
        kind = _OPTIONAL[path]
        if isinstance(value, bool) or not isinstance(value, kind):
            raise ConfigError(f"{path}: expected {kind.__name__}, got {value!r}")
        if kind is int and value < 0:
            raise ConfigError(f"{path}: seeds must be non-negative")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        if path == "seed" and value < 0:
            raise ConfigError("seed: seeds must be non-negative")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        allowed = _ENUMS.get(path)
        if allowed and value not in allowed:
            raise ConfigError(f"{path}: expected one of {', '.join(allowed)}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{path}: expected a list of integers")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{path}: expected a mapping")
        merged = dict(default)
        for key, item in value.items():
            if default and key not in default:
                raise ConfigError(f"unknown configuration key '{path}.{key}'")
            sample = default.get(key, item)
            merged[key] = _coerce(f"{path}.{key}", sample, item) if default else item
        return merged
    return value


def _merge_dataclass(instance: Any, data: Mapping[str, Any], prefix: str = "") -> Any:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(instance)}
    updates = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"unknown configuration key '{path}'")
        current = getattr(instance, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _merge_dataclass(current, value, path)
        else:
            updates[key] = _coerce(path, current, value)
    return dataclasses.replace(instance, **updates)


def config_from_dict(
    data: Mapping[str, Any], base: Optional[RunConfig] = None
) -> RunConfig:
    """Overlay a nested mapping onto ``base`` (or the defaults)."""
    return _merge_dataclass(base or RunConfig(), data or {})


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read a JSON or YAML config file; YAML is a superset so one loader serves both."""
    logger = get_logger(__name__)
    config_path = Path(path)
    try:
        text = config_path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {config_path}")
    except OSError as e:
        raise ConfigError(f"cannot read config file {config_path}: {e}")

    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid config file {config_path}: {e}")

    logger.debug(f"Loaded configuration from {config_path}")
    return config_from_dict(data or {})


def merge_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Apply dotted-key overrides (``"translation.K": 120``); ``None`` means unset."""
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return config_from_dict(nested, base=config)
