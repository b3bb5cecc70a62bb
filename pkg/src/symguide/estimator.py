"""n-step estimation of the clean output from a noisy state.

Starting from x_t, the clean output is predicted by integrating the
sampling ODE d x_bar = eps_bar d sigma down to sigma = 0 with n explicit
Euler sub-steps:

    x_bar[tau-1] = x_bar[tau] + (sigma[tau-1] - sigma[tau]) * eps(x_bar[tau], sigma[tau])

for tau = n..1, with x_bar[n] = x_t / sqrt(alpha_t).  Sub-steps are placed
uniformly in continuous step-index space and alpha is interpolated in log
space, so endpoints are exact and integer knots reproduce the parent
schedule.  The full scaled trajectory is recorded: those n+1 checkpoints
are exactly what the symplectic adjoint solvers consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import ScoreModel
from .schedule import NoiseSchedule

__all__ = [
    "DivergenceError",
    "SubSchedule",
    "CheckpointTrajectory",
    "MCurvePoint",
    "make_sub_schedule",
    "estimate_clean",
    "one_step_estimate",
    "estimation_error_curve",
    "m_curve_csv_text",
]


class DivergenceError(RuntimeError):
    """A state or gradient left the finite range during integration."""


@dataclass(frozen=True)
class SubSchedule:
    """alpha/sigma values at the n+1 sub-steps of one clean-output estimate.

    Index tau runs 0..n with tau = n the parent step t and tau = 0 the clean
    end: sub_alpha[n] = alpha[t], sub_alpha[0] = 1, and sub_sigma strictly
    increasing in tau (so strictly decreasing along the integration).
    h[tau] = sub_sigma[tau+1] - sub_sigma[tau] > 0.
    """

    n: int
    sub_alpha: np.ndarray
    sub_sigma: np.ndarray
    h: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        for arr in (self.sub_alpha, self.sub_sigma, self.h):
            arr.setflags(write=False)


@dataclass(frozen=True)
class CheckpointTrajectory:
    """Stored forward states of one n-step estimate, in scaled coordinates.

    states[tau] is x_bar at sub-step tau (states[n] = to_scaled(x_t)), and
    clean_output = states[0] * sqrt(alpha_0) = states[0].
    """

    sub: SubSchedule
    states: np.ndarray  # (n+1, d)
    clean_output: np.ndarray

    def __post_init__(self) -> None:
        self.states.setflags(write=False)
        self.clean_output.setflags(write=False)

    @property
    def checkpoint_count(self) -> int:
        return self.states.shape[0]


def make_sub_schedule(schedule: NoiseSchedule, t: int, n: int) -> SubSchedule:
    """Place n sub-steps uniformly in step-index space between t and 0."""
    t = schedule._check_step(t)
    if t < 1:
        raise ValueError("sub-schedules require t >= 1")
    n = int(n)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    grid = np.arange(n + 1) * (t / n)  # fractional step indices, tau = 0..n
    log_alpha = schedule.log_alpha
    sub_alpha = np.exp(np.interp(grid, np.arange(len(log_alpha)), log_alpha))
    # Exact values at integer knots (endpoints included) beat the exp/log trip.
    on_knot = grid == np.round(grid)
    sub_alpha[on_knot] = schedule.alpha[np.round(grid[on_knot]).astype(int)]
    sub_sigma = np.sqrt((1.0 - sub_alpha) / sub_alpha)
    h = np.diff(sub_sigma)
    if np.any(h <= 0.0):
        raise ValueError("sub-schedule sigma values are not strictly increasing")
    return SubSchedule(n=n, sub_alpha=sub_alpha, sub_sigma=sub_sigma, h=h)


def _check_finite(x: np.ndarray, tau: int, what: str = "state") -> None:
    if not np.all(np.isfinite(x)):
        norm = float(np.linalg.norm(x[np.isfinite(x)]))
        raise DivergenceError(
            f"non-finite {what} at sub-step tau={tau} (finite-part norm {norm:.3e})"
        )


def estimate_clean(
    model: ScoreModel, schedule: NoiseSchedule, x_t: np.ndarray, t: int, n: int
) -> CheckpointTrajectory:
    """Integrate the estimate ODE from x_t down to sigma = 0 in n Euler steps."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (model.dim,):
        raise ValueError(f"x_t has shape {x_t.shape}, expected ({model.dim},)")
    sub = make_sub_schedule(schedule, t, n)
    sig = sub.sub_sigma
    states = np.empty((n + 1, model.dim))
    states[n] = schedule.to_scaled(x_t, t)
    _check_finite(states[n], n)
    for tau in range(n, 0, -1):
        e = model.eps(states[tau], float(sig[tau]))
        states[tau - 1] = states[tau] + (sig[tau - 1] - sig[tau]) * e
        _check_finite(states[tau - 1], tau - 1)
    clean = states[0] * math.sqrt(sub.sub_alpha[0])
    return CheckpointTrajectory(sub=sub, states=states, clean_output=clean)


def one_step_estimate(
    model: ScoreModel, schedule: NoiseSchedule, x_t: np.ndarray, t: int
) -> np.ndarray:
    """Closed-form single-step clean estimate.

    Written in scaled coordinates, x_bar - sigma_t * eps, which is the n = 1
    estimate verbatim; unscaled it reads (x_t - sqrt(1-a_t) eps) / sqrt(a_t).
    """
    t = schedule._check_step(t)
    x_bar = schedule.to_scaled(x_t, t)
    sigma_t = schedule.sigma(t)
    return x_bar + (0.0 - sigma_t) * model.eps(x_bar, sigma_t)


@dataclass(frozen=True)
class MCurvePoint:
    n: int
    mean_error: float
    stderr: float
    num_samples: int
    seed: int

    def csv_row(self) -> list[str]:
        return [str(self.n), repr(self.mean_error), repr(self.stderr), str(self.num_samples), str(self.seed)]


def m_curve_csv_text(points: list["MCurvePoint"]) -> str:
    lines = ["n,mean_error,stderr,num_samples,seed"]
    lines += [",".join(p.csv_row()) for p in points]
    return "\n".join(lines) + "\n"


def estimation_error_curve(
    model: ScoreModel,
    schedule: NoiseSchedule,
    t: int,
    n_list: list[int],
    n_ref: int,
    num_samples: int,
    seed: int,
) -> list[MCurvePoint]:
    """Mean distance between n-step and reference clean estimates.

    Draws x_t from the model's noisy marginal at step t (models without a
    data distribution fall back to standard-normal draws), solves the same
    estimate at every n in n_list and at a high-resolution reference n_ref,
    and averages the l2 gap per n.  Deterministic for a fixed seed.
    """
    n_list = [int(n) for n in n_list]
    if min(n_list) < 1:
        raise ValueError("all n must be >= 1")
    if n_ref < 8 * max(n_list):
        raise ValueError(f"n_ref = {n_ref} too coarse; need >= 8 * max(n_list) = {8 * max(n_list)}")
    if num_samples < 50:
        raise ValueError(f"num_samples must be >= 50, got {num_samples}")
    rng = np.random.default_rng(seed)
    if hasattr(model, "sample_marginal"):
        xs = model.sample_marginal(rng, schedule, t, num_samples)
    else:
        xs = rng.standard_normal((num_samples, model.dim))
    errors = {n: np.empty(num_samples) for n in n_list}
    for i in range(num_samples):
        ref = estimate_clean(model, schedule, xs[i], t, n_ref).clean_output
        for n in n_list:
            est = estimate_clean(model, schedule, xs[i], t, n).clean_output
            errors[n][i] = np.linalg.norm(est - ref)
    out = []
    for n in n_list:
        e = errors[n]
        out.append(
            MCurvePoint(
                n=n,
                mean_error=float(e.mean()),
                stderr=float(e.std(ddof=1) / math.sqrt(num_samples)),
                num_samples=num_samples,
                seed=seed,
            )
        )
    return out
