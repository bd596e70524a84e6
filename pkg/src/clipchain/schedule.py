"""Variance-preserving noise schedules and the forward noising process.

A schedule assigns every timestep ``t`` in ``{0, ..., T - 1}`` a per-step
signal rate ``alpha[t]`` in ``(0, 1]``.  The cumulative signal rate is the
running product ``alpha_bar[t] = alpha[0] * ... * alpha[t]``.  Under the
variance-preserving convention the per-step noise rate is
``sigma[t] = sqrt(1 - alpha[t]**2)``, so one forward step

    x_t = alpha[t] * x_{t-1} + sigma[t] * eps,    eps ~ N(0, I)

keeps unit-variance inputs at unit variance.  Composing steps ``0..t``
collapses to the closed-form marginal

    x_t = alpha_bar[t] * x_0 + sigma_bar[t] * eps

with ``sigma_bar[t] = sqrt(1 - alpha_bar[t]**2)``.  The signal-to-noise
ratio ``alpha_bar**2 / sigma_bar**2`` must decrease strictly in ``t``;
construction rejects schedules that violate this.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError

PROFILES = ("linear", "cosine")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable schedule: per-step and cumulative signal rates.

    Arrays are float64 so that products over a thousand steps do not lose
    precision; values are cast to python floats at the point where they
    scale float32 latents.
    """

    profile: str
    alpha: np.ndarray
    alpha_bar: np.ndarray
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        alpha = np.asarray(self.alpha, dtype=np.float64)
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if alpha.ndim != 1 or alpha.size == 0:
            raise ConfigError("schedule alpha must be a non-empty 1-d array")
        if alpha.shape != alpha_bar.shape:
            raise ConfigError("alpha and alpha_bar must have the same length")
        if not np.all((alpha > 0.0) & (alpha <= 1.0)):
            raise ConfigError("per-step signal rates must lie in (0, 1]")
        if not np.allclose(alpha_bar, np.cumprod(alpha), rtol=0.0, atol=1e-12):
            raise ConfigError("alpha_bar must be the cumulative product of alpha")
        if not np.all(alpha_bar > 0.0):
            raise ConfigError("cumulative signal rate must stay positive")
        snr = self.log_snr
        if not np.all(np.diff(snr) < 0.0):
            raise ConfigError("signal-to-noise ratio must decrease strictly in t")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @property
    def num_steps(self) -> int:
        return int(self.alpha.shape[0])

    @property
    def sigma(self) -> np.ndarray:
        """Per-step noise rate, ``sqrt(1 - alpha**2)``."""
        return np.sqrt(1.0 - self.alpha**2)

    @property
    def sigma_bar(self) -> np.ndarray:
        """Marginal noise rate, ``sqrt(1 - alpha_bar**2)``."""
        return np.sqrt(1.0 - self.alpha_bar**2)

    @property
    def log_snr(self) -> np.ndarray:
        """``log(alpha_bar**2 / (1 - alpha_bar**2))`` per timestep.

        ``alpha_bar == 1`` (a noiseless first step) gives +inf, which still
        orders correctly against every finite value.
        """
        ab2 = self.alpha_bar**2
        with np.errstate(divide="ignore"):
            return np.log(ab2) - np.log1p(-ab2)

    def describe(self) -> dict[str, Any]:
        """JSON-ready summary used by checkpoints and run manifests."""
        return {
            "profile": self.profile,
            "num_steps": self.num_steps,
            "params": dict(self.params),
        }


def _linear_alpha(num_steps: int, beta_start: float, beta_end: float) -> np.ndarray:
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return np.sqrt(1.0 - betas)


def _cosine_alpha(num_steps: int, offset: float, max_beta: float) -> np.ndarray:
    # Squared cumulative signal rate follows a shifted cosine ramp; per-step
    # rates are recovered from consecutive ratios and clipped away from zero.
    def ramp(u: np.ndarray | float) -> np.ndarray | float:
        return np.cos((u + offset) / (1.0 + offset) * np.pi / 2.0) ** 2

    i = np.arange(num_steps, dtype=np.float64)
    abar2 = ramp((i + 1.0) / num_steps) / ramp(0.0)
    a2 = np.empty(num_steps, dtype=np.float64)
    a2[0] = abar2[0]
    a2[1:] = abar2[1:] / abar2[:-1]
    a2 = np.clip(a2, 1.0 - max_beta, 1.0)
    return np.sqrt(a2)


def build_schedule(
    profile: str = "linear",
    num_steps: int = 1000,
    params: dict[str, Any] | None = None,
) -> NoiseSchedule:
    """Construct a named schedule profile.

    ``linear`` ramps the per-step variance ``beta = 1 - alpha**2`` linearly
    from ``beta_start`` (1e-4) to ``beta_end`` (2e-2).  ``cosine`` shapes the
    squared cumulative signal rate as a shifted cosine with a small
    ``offset`` (8e-3) and caps per-step variance at ``max_beta`` (0.999).
    Unknown profiles or parameters raise :class:`ConfigError`.
    """
    if num_steps < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {num_steps}")
    params = dict(params or {})
    if profile == "linear":
        beta_start = float(params.pop("beta_start", 1e-4))
        beta_end = float(params.pop("beta_end", 2e-2))
        if params:
            raise ConfigError(f"unknown linear-profile params: {sorted(params)}")
        if not (0.0 < beta_start <= beta_end < 1.0):
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        alpha = _linear_alpha(num_steps, beta_start, beta_end)
        used = {"beta_start": beta_start, "beta_end": beta_end}
    elif profile == "cosine":
        offset = float(params.pop("offset", 8e-3))
        max_beta = float(params.pop("max_beta", 0.999))
        if params:
            raise ConfigError(f"unknown cosine-profile params: {sorted(params)}")
        if offset <= 0.0 or not (0.0 < max_beta < 1.0):
            raise ConfigError("cosine profile needs offset > 0 and max_beta in (0, 1)")
        alpha = _cosine_alpha(num_steps, offset, max_beta)
        used = {"offset": offset, "max_beta": max_beta}
    else:
        raise ConfigError(f"unknown schedule profile {profile!r}; choose from {PROFILES}")
    return NoiseSchedule(
        profile=profile,
        alpha=alpha,
        alpha_bar=np.cumprod(alpha),
        params=used,
    )


def _check_timestep(schedule: NoiseSchedule, t: int) -> int:
    t = int(t)
    if not 0 <= t < schedule.num_steps:
        raise ConfigError(f"timestep {t} outside [0, {schedule.num_steps})")
    return t


def _check_noise_like(x: np.ndarray, noise: np.ndarray) -> None:
    if x.shape != noise.shape:
        raise ConfigError(f"noise shape {noise.shape} does not match data shape {x.shape}")


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
    """Jump straight from clean data to the timestep-``t`` marginal.

    Returns ``alpha_bar[t] * x0 + sigma_bar[t] * noise`` in the dtype of
    ``x0``.  Scalars are applied as python floats so float32 inputs stay
    float32.
    """
    t = _check_timestep(schedule, t)
    _check_noise_like(x0, noise)
    ab = float(schedule.alpha_bar[t])
    sb = float(np.sqrt(1.0 - ab * ab))
    return (ab * x0 + sb * noise).astype(x0.dtype, copy=False)


def q_step(schedule: NoiseSchedule, x_prev: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
    """Apply the single forward step from ``t - 1`` to ``t``.

    Returns ``alpha[t] * x_prev + sigma[t] * noise``.  Composing this over
    ``t = 0..t*`` reproduces the :func:`q_sample` marginal at ``t*``.
    """
    t = _check_timestep(schedule, t)
    _check_noise_like(x_prev, noise)
    a = float(schedule.alpha[t])
    s = float(np.sqrt(1.0 - a * a))
    return (a * x_prev + s * noise).astype(x_prev.dtype, copy=False)
