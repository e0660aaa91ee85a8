"""
Core numerics: counter-based random streams and checked elementwise tensor algebra.

Tensors are numpy arrays. Every public operation returns finite values or raises,
and random state is value-semantic: drawing returns the advanced state instead of
mutating anything shared.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .errors import RuntimeFailure, ShapeError, ValidationError

Tensor = np.ndarray
Operand = Union[np.ndarray, float, int]

DTYPE = np.float64
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngState:
    """
    Position in a Philox counter-based stream.

    ``(seed, stream)`` form the 128-bit Philox key; ``counter`` indexes the draw
    call. Each call gets its own 2**128-block counter range, so a state is
    reproducible from these three integers alone.
    """

    seed: int
    stream: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        key = (self.seed & _MASK64) | ((self.stream & _MASK64) << 64)
        counter = np.array(
            [0, 0, self.counter & _MASK64, (self.counter >> 64) & _MASK64],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def advance(self) -> "RngState":
        return RngState(self.seed, self.stream, self.counter + 1)


def seeded_rng(seed: int, stream: int = 0) -> RngState:
    if seed < 0 or stream < 0:
        raise ValidationError("seed and stream must be unsigned 64-bit integers")
    return RngState(seed & _MASK64, stream & _MASK64, 0)


def derive_substream(rng: RngState, k: int) -> RngState:
    """Independent stream number ``k`` under the same seed."""
    mixed = np.random.SeedSequence([rng.seed, rng.stream, rng.counter, int(k)])
    stream = int(mixed.generate_state(1, dtype=np.uint64)[0])
    return RngState(rng.seed, stream, 0)


def raw_u64(rng: RngState, n: int) -> Tuple[np.ndarray, RngState]:
    """Raw 64-bit words; the cross-platform golden sequence is recorded from these."""
    words = rng.generator().integers(0, 2**64, size=n, dtype=np.uint64, endpoint=False)
    return words, rng.advance()


def _check_shape(shape: Sequence[int]) -> Tuple[int, ...]:
    dims = tuple(int(extent) for extent in shape)
    if not dims or any(extent <= 0 for extent in dims):
        raise ShapeError(f"shape extents must be positive, got {list(dims)}")
    return dims


def sample_gaussian(rng: RngState, shape: Sequence[int]) -> Tuple[Tensor, RngState]:
    """I.i.d. standard normal tensor and the advanced state."""
    dims = _check_shape(shape)
    values = rng.generator().standard_normal(dims, dtype=DTYPE)
    return values, rng.advance()


def sample_uniform(rng: RngState, shape: Sequence[int]) -> Tuple[Tensor, RngState]:
    dims = _check_shape(shape)
    return rng.generator().random(dims, dtype=DTYPE), rng.advance()


def sample_integers(
    rng: RngState, low: int, high: int, size: int
) -> Tuple[np.ndarray, RngState]:
    """Integers uniform in ``[low, high]`` inclusive."""
    if high < low:
        raise ValidationError(f"empty integer range [{low}, {high}]")
    values = rng.generator().integers(low, high, size=size, endpoint=True)
    return values.astype(np.int64), rng.advance()


def ensure_finite(value: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(value)):
        raise RuntimeFailure(f"non-finite values in {what}")
    return value


def as_tensor(value, what: str = "tensor") -> Tensor:
    array = np.asarray(value, dtype=DTYPE)
    return ensure_finite(array, what)


def _operands(a: Operand, b: Operand, op: str) -> Tuple[np.ndarray, np.ndarray]:
    left = np.asarray(a, dtype=DTYPE)
    right = np.asarray(b, dtype=DTYPE)
    if left.ndim and right.ndim and left.shape != right.shape:
        raise ShapeError(f"{op}: shape mismatch {left.shape} vs {right.shape}")
    return left, right


def add(a: Operand, b: Operand) -> Tensor:
    left, right = _operands(a, b, "add")
    return ensure_finite(left + right, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    left, right = _operands(a, b, "sub")
    return ensure_finite(left - right, "sub")


def scale(a: Operand, factor: float) -> Tensor:
    if np.ndim(factor):
        raise ShapeError("scale: factor must be a scalar")
    return ensure_finite(np.asarray(a, dtype=DTYPE) * float(factor), "scale")


def hadamard(a: Operand, b: Operand) -> Tensor:
    left, right = _operands(a, b, "hadamard")
    return ensure_finite(left * right, "hadamard")


def lerp(a: Operand, b: Operand, w: Operand) -> Tensor:
    """``(1 - w)·a + w·b``; exact endpoints for w in {0, 1}."""
    left, right = _operands(a, b, "lerp")
    weight = np.asarray(w, dtype=DTYPE)
    reference = left if left.ndim else right
    if weight.ndim and reference.ndim and weight.shape != reference.shape:
        raise ShapeError(f"lerp: weight shape {weight.shape} vs {reference.shape}")
    return ensure_finite((1.0 - weight) * left + weight * right, "lerp")


def ones_like(x: Tensor) -> Tensor:
    """The all-ones matrix J for ``x``."""
    return np.ones_like(np.asarray(x, dtype=DTYPE))
