"""
Conditional noise predictor, its training loop and the model file.

The predictor estimates the noise in ``x_t`` given the timestep and a condition
row of the embedding table (non-makeup domain, makeup domain or one text tag).
Conditioning enters every block through feature-wise affine modulation driven
by ``SiLU(Linear(sinusoid(t) ++ embedding[row]))``.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import (
    Any,
    Dict,
    List,
    Mapping,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from .config import ModelConfig, RunConfig, TrainingConfig
from .errors import (
    FormatError,
    ManifestError,
    RangeError,
    RuntimeFailure,
    ShapeError,
    UnknownConditionError,
    ValidationError,
)
from .layers import (
    Conv2d,
    GroupNorm,
    Linear,
    Params,
    ResBlock,
    avg_pool2,
    avg_pool2_backward,
    film,
    film_backward,
    silu,
    silu_backward,
    sinusoidal_embedding,
    upsample2,
    upsample2_backward,
    zeros_like_params,
)
from .logging_config import get_logger
from .numerics import (
    DTYPE,
    RngState,
    Tensor,
    derive_substream,
    ensure_finite,
    sample_gaussian,
    sample_integers,
    sample_uniform,
    seeded_rng,
)
from .scheduler import Schedule, forward_sample
from .trackers import TrainingTracker

logger = get_logger(__name__)

COND_KEY = "cond_embedding"
EMBEDDING_INIT_STD = 0.02
MLP_MAX_PIXELS = 16 * 16

MODEL_MAGIC = b"MADIFF1\n"
_LENGTH = struct.Struct("<I")

# Substream numbers under the training seed
_STREAM_TRAIN = 1
_STREAM_INIT = 2


class ConditionKind(Enum):
    NON_MAKEUP = "non_makeup"
    MAKEUP = "makeup"
    TEXT_TAG = "text_tag"


DOMAIN_ALIASES = {
    "nomakeup": ConditionKind.NON_MAKEUP,
    "non_makeup": ConditionKind.NON_MAKEUP,
    "non-makeup": ConditionKind.NON_MAKEUP,
    "makeup": ConditionKind.MAKEUP,
}


@dataclass(frozen=True)
class ConditionId:
    kind: ConditionKind
    tag_index: Optional[int] = None

    def __post_init__(self):
        if self.kind is ConditionKind.TEXT_TAG:
            if self.tag_index is None or self.tag_index < 0:
                raise ValidationError("text_tag conditions need a tag_index >= 0")
        elif self.tag_index is not None:
            raise ValidationError(f"{self.kind.value} conditions take no tag_index")

    @classmethod
    def non_makeup(cls) -> "ConditionId":
        return cls(ConditionKind.NON_MAKEUP)

    @classmethod
    def makeup(cls) -> "ConditionId":
        return cls(ConditionKind.MAKEUP)

    @classmethod
    def tag(cls, index: int) -> "ConditionId":
        return cls(ConditionKind.TEXT_TAG, int(index))

    @classmethod
    def parse(cls, text: str, vocabulary: Sequence[str]) -> "ConditionId":
        """Parse ``nomakeup``, ``makeup`` or ``tag:<name>``."""
        name = text.strip()
        if name in DOMAIN_ALIASES:
            return cls(DOMAIN_ALIASES[name])
        if name.startswith("tag:"):
            tag = name[4:]
            if tag in vocabulary:
                return cls.tag(list(vocabulary).index(tag))
            raise UnknownConditionError(tag, vocabulary)
        raise UnknownConditionError(name, vocabulary)

    def describe(self, vocabulary: Sequence[str] = ()) -> str:
        if self.kind is ConditionKind.TEXT_TAG:
            if self.tag_index is not None and self.tag_index < len(vocabulary):
                return f"tag:{vocabulary[self.tag_index]}"
            return f"tag#{self.tag_index}"
        return "nomakeup" if self.kind is ConditionKind.NON_MAKEUP else "makeup"


@dataclass(frozen=True)
class EmbeddingTable:
    """Read-only view of the learnable condition rows (2 domains + vocabulary)."""

    dim: int
    vocabulary: Tuple[str, ...]
    rows: np.ndarray

    def row_index(self, cond: ConditionId) -> int:
        return condition_row(cond, self.vocabulary)

    def vector(self, cond: ConditionId) -> np.ndarray:
        return self.rows[self.row_index(cond)]


def condition_row(cond: ConditionId, vocabulary: Sequence[str]) -> int:
    if cond.kind is ConditionKind.NON_MAKEUP:
        return 0
    if cond.kind is ConditionKind.MAKEUP:
        return 1
    if cond.tag_index is None or cond.tag_index >= len(vocabulary):
        raise UnknownConditionError(f"tag#{cond.tag_index}", vocabulary)
    return 2 + cond.tag_index


class EpsPredictor(Protocol):
    """Anything the translation pipelines can sample with."""

    image_shape: Tuple[int, int, int]
    vocabulary: Tuple[str, ...]
    schedule: Schedule

    def row_for(self, cond: ConditionId) -> int: ...

    def predict_batch(
        self, x_t: np.ndarray, t: np.ndarray, rows: np.ndarray
    ) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    kind: str = "unet"
    widths: Tuple[int, ...] = (32, 64, 128)
    groups: int = 8
    time_dim: int = 64
    cond_dim: int = 64
    mlp_hidden: int = 256

    @property
    def emb_dim(self) -> int:
        return self.time_dim + self.cond_dim

    @classmethod
    def from_config(cls, config: ModelConfig) -> "Architecture":
        return cls(
            kind=config.architecture,
            widths=tuple(config.widths),
            groups=config.groups,
            time_dim=config.time_dim,
            cond_dim=config.cond_dim,
            mlp_hidden=config.mlp_hidden,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "widths": list(self.widths),
            "groups": self.groups,
            "time_dim": self.time_dim,
            "cond_dim": self.cond_dim,
            "mlp_hidden": self.mlp_hidden,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Architecture":
        return cls(
            kind=str(data["kind"]),
            widths=tuple(int(w) for w in data["widths"]),
            groups=int(data["groups"]),
            time_dim=int(data["time_dim"]),
            cond_dim=int(data["cond_dim"]),
            mlp_hidden=int(data["mlp_hidden"]),
        )


class MLPNetwork:
    """Two FiLM-modulated hidden layers over the flattened image."""

    def __init__(self, image_shape: Tuple[int, int, int], hidden: int, emb_dim: int):
        dim = int(np.prod(image_shape))
        self.inp = Linear("mlp.in", dim, hidden)
        self.film1 = Linear("mlp.film1", emb_dim, 2 * hidden)
        self.mid = Linear("mlp.mid", hidden, hidden)
        self.film2 = Linear("mlp.film2", emb_dim, 2 * hidden)
        self.out = Linear("mlp.out", hidden, dim)

    def init(self, params: Params, gen: np.random.Generator) -> None:
        self.inp.init(params, gen)
        self.film1.init(params, gen, gain=0.1)
        self.mid.init(params, gen)
        self.film2.init(params, gen, gain=0.1)
        self.out.init(params, gen, gain=0.5)

    def forward(self, params: Params, x: np.ndarray, emb: np.ndarray):
        flat = x.reshape(x.shape[0], -1)
        h, c_in = self.inp.forward(params, flat)
        mod1, c_f1 = self.film1.forward(params, emb)
        h, c_m1 = film(h, mod1)
        h, c_a1 = silu(h)
        h, c_mid = self.mid.forward(params, h)
        mod2, c_f2 = self.film2.forward(params, emb)
        h, c_m2 = film(h, mod2)
        h, c_a2 = silu(h)
        out, c_out = self.out.forward(params, h)
        cache = (x.shape, c_in, c_f1, c_m1, c_a1, c_mid, c_f2, c_m2, c_a2, c_out)
        return out.reshape(x.shape), cache

    def backward(self, params: Params, cache, dout: np.ndarray, grads: Params):
        shape, c_in, c_f1, c_m1, c_a1, c_mid, c_f2, c_m2, c_a2, c_out = cache
        dh = self.out.backward(params, c_out, dout.reshape(shape[0], -1), grads)
        dh = silu_backward(dh, c_a2)
        dh, dmod2 = film_backward(dh, c_m2)
        demb = self.film2.backward(params, c_f2, dmod2, grads)
        dh = self.mid.backward(params, c_mid, dh, grads)
        dh = silu_backward(dh, c_a1)
        dh, dmod1 = film_backward(dh, c_m1)
        demb = demb + self.film1.backward(params, c_f1, dmod1, grads)
        self.inp.backward(params, c_in, dh, grads)
        return demb


class UNetNetwork:
    """
    U-shaped convolutional network: one residual block per level on the way
    down (average-pool between levels), nearest upsampling with concatenated
    skips on the way up, GroupNorm/SiLU/conv head.
    """

    def __init__(
        self,
        image_shape: Tuple[int, int, int],
        widths: Sequence[int],
        groups: int,
        emb_dim: int,
    ):
        height, width, channels = image_shape
        levels = len(widths)
        factor = 2 ** (levels - 1)
        if height % factor or width % factor:
            raise ShapeError(
                f"unet with {levels} levels needs sides divisible by {factor}, "
                f"got {height}x{width}"
            )
        self.widths = tuple(widths)
        self.conv_in = Conv2d("unet.conv_in", channels, widths[0])
        self.down = [
            ResBlock(f"unet.down{l}", widths[max(l - 1, 0)], widths[l], emb_dim, groups)
            for l in range(levels)
        ]
        self.up = [
            ResBlock(
                f"unet.up{l}", widths[l + 1] + widths[l], widths[l], emb_dim, groups
            )
            for l in range(levels - 1)
        ]
        self.norm_out = GroupNorm("unet.norm_out", widths[0], groups)
        self.conv_out = Conv2d("unet.conv_out", widths[0], channels)

    def init(self, params: Params, gen: np.random.Generator) -> None:
        self.conv_in.init(params, gen)
        for block in self.down + self.up:
            block.init(params, gen)
        self.norm_out.init(params, gen)
        self.conv_out.init(params, gen, gain=0.5)

    def forward(self, params: Params, x: np.ndarray, emb: np.ndarray):
        h, c_in = self.conv_in.forward(params, x.transpose(0, 3, 1, 2))
        skips = []
        down_caches = []
        for level, block in enumerate(self.down):
            if level:
                h = avg_pool2(h)
            h, cache = block.forward(params, h, emb)
            down_caches.append(cache)
            skips.append(h)

        up_caches: List[Any] = [None] * len(self.up)
        for level in reversed(range(len(self.up))):
            h = np.concatenate([upsample2(h), skips[level]], axis=1)
            h, up_caches[level] = self.up[level].forward(params, h, emb)

        h, c_norm = self.norm_out.forward(params, h)
        h, c_act = silu(h)
        out, c_out = self.conv_out.forward(params, h)
        cache = (c_in, down_caches, up_caches, c_norm, c_act, c_out)
        return out.transpose(0, 2, 3, 1), cache

    def backward(self, params: Params, cache, dout: np.ndarray, grads: Params):
        c_in, down_caches, up_caches, c_norm, c_act, c_out = cache
        d = self.conv_out.backward(params, c_out, dout.transpose(0, 3, 1, 2), grads)
        d = silu_backward(d, c_act)
        d = self.norm_out.backward(params, c_norm, d, grads)

        demb = 0.0
        skip_grads: List[Any] = [0.0] * len(self.down)
        for level in range(len(self.up)):
            d, de = self.up[level].backward(params, up_caches[level], d, grads)
            demb = demb + de
            upper = self.widths[level + 1]
            skip_grads[level] = d[:, upper:]
            d = upsample2_backward(d[:, :upper])

        for level in reversed(range(len(self.down))):
            d = d + skip_grads[level]
            d, de = self.down[level].backward(params, down_caches[level], d, grads)
            demb = demb + de
            if level:
                d = avg_pool2_backward(d)

        self.conv_in.backward(params, c_in, d, grads)
        return demb


def _build_network(arch: Architecture, image_shape: Tuple[int, int, int]):
    if arch.kind == "mlp":
        if image_shape[0] * image_shape[1] > MLP_MAX_PIXELS:
            raise ValidationError(
                f"mlp architecture supports inputs up to 16x16, got "
                f"{image_shape[0]}x{image_shape[1]}"
            )
        return MLPNetwork(image_shape, arch.mlp_hidden, arch.emb_dim)
    if arch.kind == "unet":
        if not arch.widths:
            raise ValidationError("unet needs at least one width")
        return UNetNetwork(image_shape, arch.widths, arch.groups, arch.emb_dim)
    raise ValidationError(f"unknown architecture '{arch.kind}'")


class DenoiserModel:
    """The conditional noise predictor f(x_t, t, l)."""

    def __init__(
        self,
        architecture: Architecture,
        image_shape: Sequence[int],
        schedule: Schedule,
        vocabulary: Sequence[str] = (),
        params: Optional[Mapping[str, np.ndarray]] = None,
        init_seed: int = 0,
    ):
        shape = tuple(int(v) for v in image_shape)
        if len(shape) != 3 or min(shape) <= 0:
            raise ShapeError(f"image shape must be (H, W, C) with positive extents, got {shape}")
        self.architecture = architecture
        self.image_shape: Tuple[int, int, int] = shape  # type: ignore[assignment]
        self.schedule = schedule
        self.vocabulary: Tuple[str, ...] = tuple(vocabulary)
        self.network = _build_network(architecture, self.image_shape)
        self.embed = Linear("embed", architecture.emb_dim, architecture.emb_dim)

        initial = self._initial_params(init_seed)
        if params is None:
            self.params: Dict[str, np.ndarray] = initial
        else:
            self._check_params(params, initial)
            self.params = {name: np.array(params[name], dtype=DTYPE) for name in initial}

    @property
    def n_conditions(self) -> int:
        return 2 + len(self.vocabulary)

    @property
    def embedding(self) -> EmbeddingTable:
        return EmbeddingTable(
            self.architecture.cond_dim, self.vocabulary, self.params[COND_KEY]
        )

    def parameter_count(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def parameter_names(self) -> List[str]:
        return sorted(self.params)

    def _initial_params(self, seed: int) -> Dict[str, np.ndarray]:
        gen = seeded_rng(seed, _STREAM_INIT).generator()
        params: Dict[str, np.ndarray] = {}
        params[COND_KEY] = gen.normal(
            0.0, EMBEDDING_INIT_STD, size=(self.n_conditions, self.architecture.cond_dim)
        )
        self.embed.init(params, gen)
        self.network.init(params, gen)
        return params

    @staticmethod
    def _check_params(params: Mapping[str, np.ndarray], expected: Mapping[str, np.ndarray]):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        if missing or extra:
            raise ShapeError(
                f"parameter names do not match the architecture "
                f"(missing: {missing[:5]}, unexpected: {extra[:5]})"
            )
        for name, value in expected.items():
            if np.shape(params[name]) != value.shape:
                raise ShapeError(
                    f"parameter {name}: shape {np.shape(params[name])} != {value.shape}"
                )

    def row_for(self, cond: ConditionId) -> int:
        return condition_row(cond, self.vocabulary)

    def forward(self, params: Params, x_t: np.ndarray, t: np.ndarray, rows: np.ndarray):
        time_dim = self.architecture.time_dim
        feats = np.concatenate(
            [sinusoidal_embedding(t, time_dim), params[COND_KEY][rows]], axis=1
        )
        e, c_embed = self.embed.forward(params, feats)
        emb, c_act = silu(e)
        out, c_net = self.network.forward(params, x_t, emb)
        return out, (rows, c_embed, c_act, c_net)

    def backward(self, params: Params, cache, dout: np.ndarray) -> Dict[str, np.ndarray]:
        rows, c_embed, c_act, c_net = cache
        grads = zeros_like_params(params)
        demb = self.network.backward(params, c_net, dout, grads)
        de = silu_backward(demb, c_act)
        dfeats = self.embed.backward(params, c_embed, de, grads)
        np.add.at(grads[COND_KEY], rows, dfeats[:, self.architecture.time_dim :])
        return grads

    def predict_batch(self, x_t: np.ndarray, t: np.ndarray, rows: np.ndarray) -> np.ndarray:
        out, _ = self.forward(
            self.params,
            np.asarray(x_t, dtype=DTYPE),
            np.asarray(t),
            np.asarray(rows, dtype=np.int64),
        )
        return out

    def manifest(self) -> Dict[str, Any]:
        return {
            "format": "MADIFF1",
            "architecture": self.architecture.to_dict(),
            "image_shape": list(self.image_shape),
            "schedule": self.schedule.to_dict(),
            "vocabulary": list(self.vocabulary),
            "parameters": [
                {"name": name, "shape": list(self.params[name].shape)}
                for name in self.parameter_names()
            ],
        }


def build_model(
    config: RunConfig,
    image_shape: Sequence[int],
    schedule: Schedule,
    vocabulary: Sequence[str] = (),
) -> DenoiserModel:
    return DenoiserModel(
        Architecture.from_config(config.model),
        image_shape,
        schedule,
        vocabulary,
        init_seed=config.init_seed(),
    )


def predict_eps(model: EpsPredictor, x_t: Tensor, t: int, cond: ConditionId) -> Tensor:
    """Noise estimate for a single image."""
    x = np.asarray(x_t, dtype=DTYPE)
    if x.shape != tuple(model.image_shape):
        raise ShapeError(f"predict_eps: image shape {x.shape} != model {model.image_shape}")
    T = model.schedule.T
    if not 1 <= t <= T:
        raise RangeError(f"timestep {t} outside [1, {T}]")
    row = model.row_for(cond)
    out = model.predict_batch(x[None], np.array([t]), np.array([row]))
    return ensure_finite(out[0], "predict_eps")


# ---------------------------------------------------------------------------
# Training objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    x0: np.ndarray  # (N, H, W, C)
    conds: Tuple[ConditionId, ...]

    def __post_init__(self):
        if len(self.conds) == 0 or self.x0.shape[0] == 0:
            raise ValidationError("batch must not be empty")
        if self.x0.ndim != 4 or self.x0.shape[0] != len(self.conds):
            raise ShapeError(
                f"batch images {self.x0.shape} do not match {len(self.conds)} conditions"
            )

    def __len__(self) -> int:
        return len(self.conds)


def draw_noise(batch: Batch, s: Schedule, rng: RngState) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample (t, eps) from independent substreams; replayed by loss and grad."""
    ts = np.empty(len(batch), dtype=np.int64)
    eps = np.empty(batch.x0.shape, dtype=DTYPE)
    for i in range(len(batch)):
        sub = derive_substream(rng, i)
        t_i, sub = sample_integers(sub, 1, s.T, 1)
        ts[i] = t_i[0]
        eps[i], _ = sample_gaussian(sub, batch.x0.shape[1:])
    return ts, eps


def _noised(batch: Batch, s: Schedule, rng: RngState):
    ts, eps = draw_noise(batch, s, rng)
    x_t = np.stack([forward_sample(batch.x0[i], int(ts[i]), eps[i], s) for i in range(len(batch))])
    return x_t, ts, eps


def loss(model: EpsPredictor, batch: Batch, s: Schedule, rng: RngState) -> float:
    """Batch mean of the squared L2 error between predicted and true noise."""
    x_t, ts, eps = _noised(batch, s, rng)
    rows = np.array([model.row_for(c) for c in batch.conds], dtype=np.int64)
    pred = model.predict_batch(x_t, ts, rows)
    residual = pred - eps
    per_sample = np.sum(residual.reshape(len(batch), -1) ** 2, axis=1)
    return float(ensure_finite(np.mean(per_sample), "loss"))


def loss_and_grad(
    model: DenoiserModel,
    batch: Batch,
    s: Schedule,
    rng: RngState,
    params: Optional[Params] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    params = model.params if params is None else params
    x_t, ts, eps = _noised(batch, s, rng)
    rows = np.array([model.row_for(c) for c in batch.conds], dtype=np.int64)
    pred, cache = model.forward(params, x_t, ts, rows)
    residual = pred - eps
    value = float(np.mean(np.sum(residual.reshape(len(batch), -1) ** 2, axis=1)))
    ensure_finite(np.asarray(value), "loss")
    grads = model.backward(params, cache, (2.0 / len(batch)) * residual)
    return value, grads


def grad(
    model: DenoiserModel, batch: Batch, s: Schedule, rng: RngState
) -> Dict[str, np.ndarray]:
    """Exact gradient of ``loss`` at the same replayed (t, eps) draws."""
    return loss_and_grad(model, batch, s, rng)[1]


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW moments; ``step`` counts completed updates."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 1000

    @classmethod
    def create(
        cls, params: Mapping[str, np.ndarray], config: Optional[TrainingConfig] = None
    ) -> "OptimizerState":
        config = config or TrainingConfig()
        return cls(
            m={name: np.zeros_like(value, dtype=DTYPE) for name, value in params.items()},
            v={name: np.zeros_like(value, dtype=DTYPE) for name, value in params.items()},
            lr=config.lr,
            weight_decay=config.weight_decay,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            warmup_steps=config.warmup_steps,
        )

    def lr_at(self, step: int) -> float:
        """Linear warm-up over ``warmup_steps`` updates, constant afterwards."""
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
) -> Dict[str, np.ndarray]:
    """One AdamW update with decoupled weight decay; advances ``state`` in place."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("optimizer_step: parameter, gradient and state names differ")
    for name, value in params.items():
        if np.shape(grads[name]) != np.shape(value) or state.m[name].shape != np.shape(value):
            raise ShapeError(
                f"optimizer_step: shape mismatch for {name}: "
                f"{np.shape(value)} vs {np.shape(grads[name])}"
            )

    step = state.step + 1
    lr_t = state.lr_at(step)
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**step
    correction2 = 1.0 - b2**step

    updated = {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=DTYPE)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        updated[name] = (
            np.asarray(value, dtype=DTYPE) * (1.0 - lr_t * state.weight_decay)
            - lr_t * m_hat / (np.sqrt(v_hat) + state.eps)
        )
    state.step = step
    return updated


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSet:
    """Images in model range with their domain and tag labels."""

    images: np.ndarray  # (N, H, W, C)
    domains: Tuple[ConditionKind, ...]
    tags: Tuple[Tuple[int, ...], ...]
    vocabulary: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        n = self.images.shape[0]
        if len(self.domains) != n or len(self.tags) != n:
            raise ShapeError("training set labels do not match the image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    def validate(self) -> None:
        problems = []
        present = set(self.domains)
        for kind in (ConditionKind.NON_MAKEUP, ConditionKind.MAKEUP):
            if kind not in present:
                problems.append(f"no images in the {kind.value} domain")
        for i, tag_rows in enumerate(self.tags):
            for tag in tag_rows:
                if not 0 <= tag < len(self.vocabulary):
                    problems.append(f"image {i}: tag index {tag} outside vocabulary")
        if problems:
            raise ManifestError("training set is incomplete", problems)


def sample_training_batch(
    data: TrainingSet, batch_size: int, flip: bool, rng: RngState
) -> Batch:
    """Pick images, then per image its domain or (with probability 0.5) one of its tags."""
    indices, rng = sample_integers(rng, 0, len(data) - 1, batch_size)
    choose_tag, rng = sample_uniform(rng, (batch_size,))
    tag_pick, rng = sample_uniform(rng, (batch_size,))
    flips, rng = sample_uniform(rng, (batch_size,))

    images = data.images[indices].copy()
    conds = []
    for j, index in enumerate(indices):
        tag_rows = data.tags[index]
        if tag_rows and choose_tag[j] < 0.5:
            pick = tag_rows[min(int(tag_pick[j] * len(tag_rows)), len(tag_rows) - 1)]
            conds.append(ConditionId.tag(pick))
        else:
            conds.append(ConditionId(data.domains[index]))
        if flip and flips[j] < 0.5:
            images[j] = images[j, :, ::-1, :].copy()
    return Batch(images, tuple(conds))


def train(
    data: TrainingSet,
    config: RunConfig,
    schedule: Schedule,
    tracker: Optional[TrainingTracker] = None,
    model: Optional[DenoiserModel] = None,
) -> DenoiserModel:
    """Optimise the noise-prediction objective with AdamW; deterministic under a fixed seed."""
    data.validate()
    settings = config.training
    if settings.iterations < 0 or settings.batch_size < 1:
        raise ValidationError("training needs iterations >= 0 and batch_size >= 1")

    if model is None:
        model = build_model(config, data.images.shape[1:], schedule, data.vocabulary)
    elif model.vocabulary != tuple(data.vocabulary):
        raise ValidationError("model vocabulary differs from the training set vocabulary")

    state = OptimizerState.create(model.params, settings)
    base = seeded_rng(config.training_seed(), _STREAM_TRAIN)
    tracker = tracker or TrainingTracker(
        total=settings.iterations, log_every=settings.log_every, quiet=True
    )

    logger.info(
        f"Training {model.architecture.kind} denoiser: {model.parameter_count()} parameters, "
        f"{len(data)} images, {settings.iterations} iterations, batch {settings.batch_size}"
    )

    for iteration in range(1, settings.iterations + 1):
        it_rng = derive_substream(base, iteration)
        batch = sample_training_batch(
            data, settings.batch_size, settings.flip, derive_substream(it_rng, 0)
        )
        value, grads = loss_and_grad(model, batch, schedule, derive_substream(it_rng, 1))
        if not math.isfinite(value):
            raise RuntimeFailure(f"training loss diverged at iteration {iteration}")
        lr = state.lr_at(state.step + 1)
        model.params = optimizer_step(model.params, grads, state)
        tracker.update(iteration, value, lr)
        if settings.log_every and iteration % settings.log_every == 0:
            logger.debug(
                f"iter {iteration}: loss {value:.5f} smoothed {tracker.smoothed_loss():.5f} lr {lr:.3e}"
            )

    if settings.iterations:
        logger.info(
            f"Training finished: smoothed loss {tracker.smoothed_loss():.5f} "
            f"after {settings.iterations} iterations"
        )
    return model


# ---------------------------------------------------------------------------
# Analytic oracle
# ---------------------------------------------------------------------------


def analytic_gaussian_denoiser(
    m: Union[Tensor, float], s: float, t: int, x_t: Tensor, sched: Schedule
) -> Tensor:
    """
    Posterior-optimal noise prediction E[eps | x_t] for data x0 ~ N(m, s^2 I).
    """
    if s < 0:
        raise RangeError(f"standard deviation must be >= 0, got {s}")
    t = sched.check_t(t, low=1)
    ab = sched.alpha_bar[t]
    x = np.asarray(x_t, dtype=DTYPE)
    return math.sqrt(1.0 - ab) * (x - math.sqrt(ab) * np.asarray(m, dtype=DTYPE)) / (
        ab * s * s + 1.0 - ab
    )


class GaussianDenoiser:
    """
    Exact predictor for per-condition Gaussian data, usable wherever a trained
    model is; each condition row maps to its own (mean, std).
    """

    def __init__(
        self,
        schedule: Schedule,
        image_shape: Sequence[int],
        components: Mapping[ConditionId, Tuple[Union[Tensor, float], float]],
        vocabulary: Sequence[str] = (),
    ):
        self.schedule = schedule
        self.image_shape = tuple(int(v) for v in image_shape)
        self.vocabulary = tuple(vocabulary)
        self._by_row = {
            condition_row(cond, self.vocabulary): (np.asarray(mean, dtype=DTYPE), float(std))
            for cond, (mean, std) in components.items()
        }

    def row_for(self, cond: ConditionId) -> int:
        row = condition_row(cond, self.vocabulary)
        if row not in self._by_row:
            raise UnknownConditionError(cond.describe(self.vocabulary), self.vocabulary)
        return row

    def predict_batch(self, x_t: np.ndarray, t: np.ndarray, rows: np.ndarray) -> np.ndarray:
        out = np.empty(np.shape(x_t), dtype=DTYPE)
        for i, (step, row) in enumerate(zip(np.asarray(t), np.asarray(rows))):
            mean, std = self._by_row[int(row)]
            out[i] = analytic_gaussian_denoiser(mean, std, int(step), x_t[i], self.schedule)
        return out


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------


def save_model(model: DenoiserModel, path: Union[str, Path]) -> Path:
    """Write magic, manifest length, JSON manifest, then float32 LE parameters."""
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    manifest = json.dumps(model.manifest(), sort_keys=True).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(model.params[name], dtype="<f4").tobytes()
        for name in model.parameter_names()
    )
    with open(output, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(_LENGTH.pack(len(manifest)))
        f.write(manifest)
        f.write(blob)
    logger.info(f"Saved model ({model.parameter_count()} parameters) to {output}")
    return output


def load_model(path: Union[str, Path]) -> DenoiserModel:
    source = Path(path)
    try:
        data = source.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read model file: {e}", path=source)

    if not data.startswith(MODEL_MAGIC):
        raise FormatError("bad magic, not a MADIFF1 model file", offset=0, path=source)
    header_end = len(MODEL_MAGIC) + _LENGTH.size
    if len(data) < header_end:
        raise FormatError("truncated header", offset=len(data), path=source)
    (length,) = _LENGTH.unpack_from(data, len(MODEL_MAGIC))
    manifest_end = header_end + length
    if len(data) < manifest_end:
        raise FormatError("truncated manifest", offset=len(data), path=source)
    try:
        manifest = json.loads(data[header_end:manifest_end].decode("utf-8"))
        architecture = Architecture.from_dict(manifest["architecture"])
        schedule = Schedule.from_dict(manifest["schedule"])
        entries = [(e["name"], tuple(int(v) for v in e["shape"])) for e in manifest["parameters"]]
        image_shape = tuple(int(v) for v in manifest["image_shape"])
        vocabulary = tuple(str(v) for v in manifest["vocabulary"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"invalid model manifest: {e}", offset=header_end, path=source)

    params: Dict[str, np.ndarray] = {}
    offset = manifest_end
    for name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise FormatError(f"truncated parameter blob at {name}", offset=offset, path=source)
        params[name] = (
            np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            .astype(DTYPE)
            .reshape(shape)
        )
        offset = end
    if offset != len(data):
        raise FormatError("trailing bytes after parameter blob", offset=offset, path=source)

    try:
        model = DenoiserModel(architecture, image_shape, schedule, vocabulary, params=params)
    except ShapeError as e:
        raise FormatError(f"model file does not match its architecture: {e.message}", path=source)
    logger.debug(f"Loaded model from {source}: {model.parameter_count()} parameters")
    return model
