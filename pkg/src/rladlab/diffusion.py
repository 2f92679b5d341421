"""Forward-process math: linear noise schedule, noising, single reverse step.

Timesteps are 1-based in every public signature; the underlying tables are
stored 0-based (``beta[t - 1]`` is the step-t coefficient).  All schedule
math runs in double precision; array operations preserve the input dtype so
single-precision model tensors stay single precision.

The reverse step uses the fixed-large variance sigma_t^2 = beta_t, with
sigma_1 = 0 so the final step is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Timestep-indexed beta / alpha / alpha_bar tables (float64)."""

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t: int) -> int:
        if not float(t).is_integer() or not 1 <= int(t) <= self.T:
            raise DomainError(f"timestep {t} outside [1, {self.T}]")
        return int(t)

    def to_config(self) -> dict:
        """Serializable form; derived tables are never stored."""
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @staticmethod
    def from_config(cfg: dict) -> "NoiseSchedule":
        return make_linear_schedule(cfg["T"], cfg["beta_start"], cfg["beta_end"])


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Inclusive linearly spaced betas; alpha_bar by exact running product."""
    if not float(T).is_integer() or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(float(beta_start), float(beta_end), int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sched = NoiseSchedule(
        T=int(T),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
    )
    sched.beta.setflags(write=False)
    sched.alpha.setflags(write=False)
    sched.alpha_bar.setflags(write=False)
    return sched


def _check_same_shape(a: np.ndarray, b: np.ndarray, names: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{names} shapes differ: {a.shape} vs {b.shape}")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noised latent sqrt(a_bar_t) * x0 + sqrt(1 - a_bar_t) * eps."""
    t = sched.check_t(t)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _check_same_shape(x0, eps, "x0/eps")
    ab = sched.alpha_bar[t - 1]
    out = np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps.astype(np.float64)
    return out.astype(x0.dtype, copy=False)


def reverse_step(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    noise: np.ndarray | None = None,
) -> np.ndarray:
    """One ancestral step: mu_t + sigma_t * noise with

    mu_t = (z_t - beta_t / sqrt(1 - a_bar_t) * eps_hat) / sqrt(alpha_t)
    sigma_t = sqrt(beta_t) for t > 1, sigma_1 = 0.
    """
    t = sched.check_t(t)
    z_t = np.asarray(z_t)
    eps_hat = np.asarray(eps_hat)
    _check_same_shape(z_t, eps_hat, "z_t/eps_hat")
    beta = sched.beta[t - 1]
    alpha = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    mu = (z_t.astype(np.float64) - (beta / np.sqrt(1.0 - ab)) * eps_hat.astype(np.float64)) / np.sqrt(alpha)
    if t > 1:
        if noise is None:
            raise DomainError("noise is required for t > 1 (sigma_t > 0)")
        noise = np.asarray(noise)
        _check_same_shape(z_t, noise, "z_t/noise")
        mu = mu + np.sqrt(beta) * noise.astype(np.float64)
    return mu.astype(z_t.dtype, copy=False)
