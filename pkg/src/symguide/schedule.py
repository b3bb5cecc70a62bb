"""Discrete noise schedules for deterministic diffusion sampling.

A schedule is the sequence of cumulative signal coefficients alpha[t] for
t = 0..T, with alpha[0] = 1 and alpha strictly decreasing.  The forward
corruption is x_t = sqrt(alpha_t) x_0 + sqrt(1 - alpha_t) eps.

Everything downstream works in the reparameterized coordinates

    sigma_t = sqrt(1 - alpha_t) / sqrt(alpha_t),
    x_bar   = x_t / sqrt(alpha_t),

in which the deterministic sampler becomes an ODE d x_bar = eps_bar d sigma.
sigma is strictly increasing in t and sigma(0) = 0.  All arithmetic is
float64; schedules are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "build_linear_schedule"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients alpha[0..T] and derived sigma values."""

    alpha: np.ndarray
    sigma_values: np.ndarray = field(repr=False, compare=False)
    log_alpha: np.ndarray = field(repr=False, compare=False)

    def __init__(self, alpha: np.ndarray) -> None:
        alpha = np.asarray(alpha, dtype=np.float64)
        _validate_alpha(alpha)
        alpha = alpha.copy()
        alpha.setflags(write=False)
        sigma_values = np.sqrt((1.0 - alpha) / alpha)
        sigma_values.setflags(write=False)
        log_alpha = np.log(alpha)
        log_alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma_values", sigma_values)
        object.__setattr__(self, "log_alpha", log_alpha)

    @property
    def num_steps(self) -> int:
        return len(self.alpha) - 1

    def _check_step(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"step index {t} outside [0, {self.num_steps}]")
        return t

    def sigma(self, t: int) -> float:
        """sqrt(1 - alpha_t) / sqrt(alpha_t); exactly 0 at t = 0."""
        return float(self.sigma_values[self._check_step(t)])

    def to_scaled(self, x: np.ndarray, t: int) -> np.ndarray:
        """x_bar = x / sqrt(alpha_t).  Identity at t = 0."""
        t = self._check_step(t)
        return np.asarray(x, dtype=np.float64) / np.sqrt(self.alpha[t])

    def from_scaled(self, x_bar: np.ndarray, t: int) -> np.ndarray:
        """Inverse of to_scaled: multiply by sqrt(alpha_t)."""
        t = self._check_step(t)
        return np.asarray(x_bar, dtype=np.float64) * np.sqrt(self.alpha[t])

    def to_json_dict(self) -> dict:
        return {"T": self.num_steps, "alpha": [float(a) for a in self.alpha]}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "NoiseSchedule":
        try:
            T = int(obj["T"])
            alpha = np.asarray(obj["alpha"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed schedule object: {exc}") from exc
        if len(alpha) != T + 1:
            raise ValueError(f"alpha has {len(alpha)} entries, expected T+1 = {T + 1}")
        return cls(alpha)


def _validate_alpha(alpha: np.ndarray) -> None:
    if alpha.ndim != 1 or len(alpha) < 3:
        raise ValueError("alpha must be a 1-d array with T >= 2 (length >= 3)")
    if not np.all(np.isfinite(alpha)):
        raise ValueError("alpha contains non-finite values")
    if alpha[0] != 1.0:
        raise ValueError(f"alpha[0] must be exactly 1, got {alpha[0]!r}")
    if np.any(alpha <= 0.0):
        raise ValueError("alpha underflowed to <= 0; schedule too aggressive")
    if np.any(alpha > 1.0):
        raise ValueError("alpha values must lie in (0, 1]")
    if np.any(np.diff(alpha) >= 0.0):
        raise ValueError("alpha must be strictly decreasing")


def build_linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Cumulative-product schedule with per-step rates linear in the step index.

    beta_s runs linearly from beta_min (s=1) to beta_max (s=T) and
    alpha[t] = prod_{s<=t} (1 - beta_s), alpha[0] = 1.
    """
    T = int(T)
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    beta_min = float(beta_min)
    beta_max = float(beta_max)
    for name, b in (("beta_min", beta_min), ("beta_max", beta_max)):
        if not 0.0 < b < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {b}")
    if beta_min > beta_max:
        raise ValueError(f"beta_min > beta_max ({beta_min} > {beta_max})")
    betas = np.linspace(beta_min, beta_max, T)
    alpha = np.empty(T + 1, dtype=np.float64)
    alpha[0] = 1.0
    alpha[1:] = np.cumprod(1.0 - betas)
    if alpha[-1] <= 0.0:
        raise ValueError("schedule underflows alpha to 0 in float64")
    return NoiseSchedule(alpha)
