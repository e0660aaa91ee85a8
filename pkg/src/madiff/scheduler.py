"""
Noise schedule and closed-form diffusion transitions.

``alpha_bar[t]`` is the cumulative product of ``1 - beta`` (index 0 holds 1.0),
so the forward marginal is ``q(x_t | x_0) = N(sqrt(alpha_bar[t]) x_0, (1 - alpha_bar[t]) I)``.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

from .errors import RangeError, RuntimeFailure, ShapeError, ValidationError
from .numerics import DTYPE, RngState, Tensor, ensure_finite, sample_gaussian

# Rounding slack when checking 1 - alpha_bar[t-1] - sigma_t**2 >= 0
_VARIANCE_SLACK = 1e-12


@dataclass(frozen=True)
class Schedule:
    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray  # index 1..T; beta[0] is unused and 0
    alpha_bar: np.ndarray  # index 0..T; alpha_bar[0] == 1

    def check_t(self, t: int, low: int = 0) -> int:
        if not low <= t <= self.T:
            raise RangeError(f"timestep {t} outside [{low}, {self.T}]")
        return int(t)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "kind": "linear",
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Schedule":
        return make_schedule(int(data["T"]), data["beta_start"], data["beta_end"])


def make_schedule(T: int, beta_start: float, beta_end: float) -> Schedule:
    if T < 1:
        raise ValidationError(f"schedule needs T >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValidationError(
            f"schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    beta = np.zeros(T + 1, dtype=DTYPE)
    beta[1:] = np.linspace(beta_start, beta_end, T, dtype=DTYPE)
    alpha_bar = np.ones(T + 1, dtype=DTYPE)
    alpha_bar[1:] = np.cumprod(1.0 - beta[1:])

    beta.flags.writeable = False
    alpha_bar.flags.writeable = False
    return Schedule(T, float(beta_start), float(beta_end), beta, alpha_bar)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def forward_sample(x0: Tensor, t: int, eps: Tensor, s: Schedule) -> Tensor:
    """Reparameterised draw from q(x_t | x_0)."""
    t = s.check_t(t)
    _same_shape(x0, eps, "forward_sample")
    ab = s.alpha_bar[t]
    return ensure_finite(
        math.sqrt(ab) * np.asarray(x0, dtype=DTYPE)
        + math.sqrt(1.0 - ab) * np.asarray(eps, dtype=DTYPE),
        "forward_sample",
    )


def posterior_variance(t: int, s: Schedule) -> float:
    """beta_tilde_t = beta_t (1 - alpha_bar[t-1]) / (1 - alpha_bar[t])."""
    t = s.check_t(t, low=1)
    return float(s.beta[t] * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]))


def posterior_mean(x0: Tensor, x_t: Tensor, t: int, s: Schedule) -> Tensor:
    t = s.check_t(t, low=1)
    _same_shape(x0, x_t, "posterior_mean")
    if t == 1:
        return np.array(x0, dtype=DTYPE, copy=True)
    ab, ab_prev, b = s.alpha_bar[t], s.alpha_bar[t - 1], s.beta[t]
    c0 = math.sqrt(ab_prev) * b / (1.0 - ab)
    ct = math.sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * np.asarray(x0, dtype=DTYPE) + ct * np.asarray(x_t, dtype=DTYPE)


def posterior_sample(
    x0: Tensor, x_t: Tensor, t: int, s: Schedule, rng: RngState
) -> Tuple[Tensor, RngState]:
    """Draw from q(x_{t-1} | x_t, x_0); at t = 1 the variance is 0 and x_0 is returned."""
    mean = posterior_mean(x0, x_t, t, s)
    if t == 1:
        return mean, rng
    noise, rng = sample_gaussian(rng, np.shape(x0))
    sample = mean + math.sqrt(posterior_variance(t, s)) * noise
    return ensure_finite(sample, "posterior_sample"), rng


def sigma(t: int, gamma: float, s: Schedule) -> float:
    t = s.check_t(t, low=1)
    if not 0.0 <= gamma <= 1.0:
        raise RangeError(f"gamma must lie in [0, 1], got {gamma}")
    ab, ab_prev = s.alpha_bar[t], s.alpha_bar[t - 1]
    return float(
        gamma * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)
    )


def predict_x0(x_t: Tensor, eps_hat: Tensor, t: int, s: Schedule) -> Tensor:
    t = s.check_t(t)
    ab = s.alpha_bar[t]
    return (np.asarray(x_t, dtype=DTYPE) - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def _direction_coefficient(t: int, sig: float, s: Schedule) -> float:
    remaining = 1.0 - s.alpha_bar[t - 1] - sig * sig
    if remaining < 0.0:
        if remaining < -_VARIANCE_SLACK:
            raise RuntimeFailure(
                f"negative direction variance {remaining:.3e} at t={t}"
            )
        remaining = 0.0
    return math.sqrt(remaining)


def mu_f(x_t: Tensor, eps_hat: Tensor, t: int, gamma: float, s: Schedule) -> Tensor:
    """The deterministic part of the reverse step: the mean estimate for t - 1."""
    t = s.check_t(t, low=1)
    _same_shape(x_t, eps_hat, "mu_f")
    sig = sigma(t, gamma, s)
    x0_hat = predict_x0(x_t, eps_hat, t, s)
    direction = _direction_coefficient(t, sig, s)
    return ensure_finite(
        math.sqrt(s.alpha_bar[t - 1]) * x0_hat + direction * np.asarray(eps_hat, DTYPE),
        "mu_f",
    )


def reverse_step(
    x_t: Tensor, eps_hat: Tensor, t: int, gamma: float, noise: Tensor, s: Schedule
) -> Tensor:
    """x_{t-1} = mu_f(x_t) + sigma_t * noise."""
    _same_shape(x_t, noise, "reverse_step")
    mean = mu_f(x_t, eps_hat, t, gamma, s)
    sig = sigma(t, gamma, s)
    if sig == 0.0:
        return mean
    return ensure_finite(mean + sig * np.asarray(noise, dtype=DTYPE), "reverse_step")


def ddim_timesteps(n_steps: int, K: int) -> List[int]:
    """Evenly spaced descending timesteps from K down to (but excluding) 0."""
    if n_steps < 1 or K < 1:
        raise ValidationError("ddim_timesteps needs n_steps >= 1 and K >= 1")
    n = min(n_steps, K)
    points = np.linspace(K, 0, n + 1)[:-1]
    steps = sorted({max(1, int(round(p))) for p in points}, reverse=True)
    return steps


def skip_step(
    x_t: Tensor, eps_hat: Tensor, t: int, t_prev: int, s: Schedule
) -> Tensor:
    """Deterministic DDIM transition from t to any earlier t_prev (>= 0)."""
    t = s.check_t(t, low=1)
    t_prev = s.check_t(t_prev)
    if t_prev >= t:
        raise RangeError(f"skip_step needs t_prev < t, got {t_prev} >= {t}")
    x0_hat = predict_x0(x_t, eps_hat, t, s)
    ab_prev = s.alpha_bar[t_prev]
    return ensure_finite(
        math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat, "skip_step"
    )


def inversion_step(
    x_t: Tensor, eps_hat: Tensor, t: int, t_next: int, s: Schedule
) -> Tensor:
    """
    Deterministic DDIM inversion from t to a later t_next.

    ``eps_hat`` is the caller's noise estimate for the current state; the
    translator evaluates it at t_next, the step being inverted to.
    """
    t = s.check_t(t)
    t_next = s.check_t(t_next, low=1)
    if t_next <= t:
        raise RangeError(f"inversion_step needs t_next > t, got {t_next} <= {t}")
    x0_hat = predict_x0(x_t, eps_hat, t, s)
    ab_next = s.alpha_bar[t_next]
    return ensure_finite(
        math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps_hat,
        "inversion_step",
    )
