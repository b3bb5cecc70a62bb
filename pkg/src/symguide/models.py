"""Noise predictors (denoisers) with exact vector-Jacobian products.

Every model implements the scaled-coordinate interface

    eps(x_bar, sigma)      -> predicted corruption noise
    vjp(x_bar, sigma, v)   -> v^T (d eps / d x_bar), exact
    jvp(x_bar, sigma, v)   -> (d eps / d x_bar) v, exact

evaluated at arbitrary sigma >= 0 so the n-step estimator can query
interpolated sub-steps.  Models are immutable and their calls are pure,
so shared instances are safe under concurrency.

For stored-activation backpropagation there is a taped variant:
eps_with_tape returns (eps, tape) where tape is the list of arrays a
conventional reverse pass has to keep alive; vjp_from_tape replays it.

Three families ship:

* GmmModel -- Bayes-optimal denoiser of a mixture of unit-covariance
  Gaussians; closed-form eps and (symmetric) Jacobian, so it doubles as
  a ground-truth generator.
* MlpModel -- tanh multilayer perceptron with sigma appended as an input
  feature; nonlinear, nonsymmetric Jacobian, manual reverse/forward mode.
* AffineModel -- eps(x_bar) = A x_bar + offset, sigma-independent; the
  closed-form workhorse for linear-recurrence oracles (A = 0 gives the
  zero model).
"""

from __future__ import annotations

import abc
from typing import Sequence

import numpy as np

from .schedule import NoiseSchedule

__all__ = [
    "ScoreModel",
    "GmmModel",
    "MlpModel",
    "AffineModel",
    "eps_at_step",
    "vjp_at_step",
    "finite_diff_vjp",
]


class ScoreModel(abc.ABC):
    """Interface for noise predictors in scaled (x_bar, sigma) coordinates."""

    dim: int

    @abc.abstractmethod
    def eps(self, x_bar: np.ndarray, sigma: float) -> np.ndarray: ...

    @abc.abstractmethod
    def vjp(self, x_bar: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def jvp(self, x_bar: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray: ...

    @abc.abstractmethod
    def eps_with_tape(self, x_bar: np.ndarray, sigma: float) -> tuple[np.ndarray, list[np.ndarray]]: ...

    @abc.abstractmethod
    def vjp_from_tape(self, tape: list[np.ndarray], v: np.ndarray) -> np.ndarray: ...

    def _check_vec(self, x: np.ndarray, name: str = "x") -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ValueError(f"{name} has shape {x.shape}, expected ({self.dim},)")
        return x


class GmmModel(ScoreModel):
    """Optimal denoiser for data drawn from sum_k w_k N(mu_k, I).

    Under the corruption x_t = sqrt(a) x_0 + sqrt(1-a) eps the noisy
    marginal is sum_k w_k N(x; sqrt(a) mu_k, I), so with a = 1/(1+sigma^2)
    and responsibilities r_k = softmax_k(log w_k - a |x_bar - mu_k|^2 / 2):

        eps(x_bar, sigma) = sigma/(1+sigma^2) * sum_k r_k (x_bar - mu_k)

    which equals -sqrt(1-a) * grad_x log p_t(x).  The Jacobian
    d eps/d x_bar = c (I - a Cov_r(mu)) is symmetric, so jvp == vjp.
    """

    def __init__(self, weights: Sequence[float], means: Sequence[Sequence[float]]) -> None:
        weights = np.array(weights, dtype=np.float64)
        means = np.array(means, dtype=np.float64)
        if means.ndim != 2 or len(weights) != len(means):
            raise ValueError("means must be (K, d) with one row per weight")
        if np.any(weights <= 0.0):
            raise ValueError("mixture weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {weights.sum()!r}, expected 1")
        weights.setflags(write=False)
        means.setflags(write=False)
        self.weights = weights
        self.means = means
        self.dim = means.shape[1]

    def _responsibilities(self, x_bar: np.ndarray, a: float) -> tuple[np.ndarray, np.ndarray]:
        diffs = x_bar[None, :] - self.means  # (K, d)
        logits = np.log(self.weights) - 0.5 * a * np.einsum("kd,kd->k", diffs, diffs)
        logits -= logits.max()
        r = np.exp(logits)
        r /= r.sum()
        return r, diffs

    def eps(self, x_bar: np.ndarray, sigma: float) -> np.ndarray:
        x_bar = self._check_vec(x_bar)
        a = 1.0 / (1.0 + sigma * sigma)
        c = sigma / (1.0 + sigma * sigma)
        r, diffs = self._responsibilities(x_bar, a)
        return c * (r @ diffs)

    def vjp(self, x_bar: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray:
        # Analytic route: J = c (I - a Cov_r(mu)) formed explicitly.
        x_bar = self._check_vec(x_bar)
        v = self._check_vec(v, "v")
        a = 1.0 / (1.0 + sigma * sigma)
        c = sigma / (1.0 + sigma * sigma)
        r, diffs = self._responsibilities(x_bar, a)
        m = r @ self.means
        centered = self.means - m[None, :]
        cov = (centered * r[:, None]).T @ centered
        return c * (v - a * (cov @ v))

    def jvp(self, x_bar: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray:
        # Jacobian is symmetric for this family.
        return self.vjp(x_bar, sigma, v)

    def eps_with_tape(self, x_bar: np.ndarray, sigma: float) -> tuple[np.ndarray, list[np.ndarray]]:
        x_bar = self._check_vec(x_bar)
        a = 1.0 / (1.0 + sigma * sigma)
        c = sigma / (1.0 + sigma * sigma)
        r, diffs = self._responsibilities(x_bar, a)
        tape = [r, diffs, np.array([a, c])]
        return c * (r @ diffs), tape

    def vjp_from_tape(self, tape: list[np.ndarray], v: np.ndarray) -> np.ndarray:
        # Replay route: rank-one contractions over the stored responsibilities.
        v = self._check_vec(v, "v")
        r, diffs, ac = tape
        a, c = float(ac[0]), float(ac[1])
        per_k = diffs @ v
        mean_dot = float(r @ per_k)
        dr_v = a * r * (mean_dot - per_k)  # (d r_k / d x_bar) . v contribution
        return c * (v + dr_v @ diffs)

    def sample_data(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comps = rng.choice(len(self.weights), size=size, p=self.weights)
        return self.means[comps] + rng.standard_normal((size, self.dim))

    def sample_marginal(
        self, rng: np.random.Generator, schedule: NoiseSchedule, t: int, size: int
    ) -> np.ndarray:
        """Forward-corrupt data samples to step t."""
        a = schedule.alpha[schedule._check_step(t)]
        x0 = self.sample_data(rng, size)
        noise = rng.standard_normal((size, self.dim))
        return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * noise

    def to_json_dict(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "means": [[float(v) for v in row] for row in self.means],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "GmmModel":
        return cls(obj["weights"], obj["means"])


class MlpModel(ScoreModel):
    """tanh MLP noise predictor; sigma enters as an extra input feature.

    widths = [d, h1, ..., d]; layer l computes z_l = W_l a_{l-1} + b_l with
    a_l = tanh(z_l) on hidden layers and identity on the output layer.
    The input is concat(x_bar, sigma), so W_1 has d+1 columns.  vjp/jvp are
    manual reverse/forward mode through the recorded layer inputs, exact
    for the same arithmetic eps performs.
    """

    def __init__(
        self,
        widths: Sequence[int],
        layers: Sequence[tuple[np.ndarray, np.ndarray]],
        seed: int | None = None,
    ) -> None:
        widths = [int(w) for w in widths]
        if len(widths) < 2 or widths[0] != widths[-1]:
            raise ValueError("widths must have first == last == data dimension")
        if any(w < 1 for w in widths):
            raise ValueError("layer widths must be positive")
        if len(layers) != len(widths) - 1:
            raise ValueError(f"expected {len(widths) - 1} layers, got {len(layers)}")
        self.widths = widths
        self.dim = widths[0]
        self.seed = seed
        self._Ws: list[np.ndarray] = []
        self._bs: list[np.ndarray] = []
        for l, (W, b) in enumerate(layers):
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            fan_in = widths[l] + 1 if l == 0 else widths[l]
            if W.shape != (widths[l + 1], fan_in) or b.shape != (widths[l + 1],):
                raise ValueError(f"layer {l}: W is {W.shape}, b is {b.shape}; "
                                 f"expected ({widths[l + 1]}, {fan_in}) and ({widths[l + 1]},)")
            W.setflags(write=False)
            b.setflags(write=False)
            self._Ws.append(W)
            self._bs.append(b)

    @classmethod
    def random(cls, widths: Sequence[int], seed: int) -> "MlpModel":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init from a recorded seed."""
        rng = np.random.default_rng(seed)
        widths = [int(w) for w in widths]
        layers = []
        for l in range(len(widths) - 1):
            fan_in = widths[l] + 1 if l == 0 else widths[l]
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(widths[l + 1], fan_in))
            b = rng.uniform(-bound, bound, size=widths[l + 1])
            layers.append((W, b))
        return cls(widths, layers, seed=seed)

    @property
    def num_layers(self) -> int:
        return len(self._Ws)

    def _forward(self, x_bar: np.ndarray, sigma: float) -> list[np.ndarray]:
        """Return the inputs to every linear layer (the backward tape)."""
        acts = [np.concatenate([x_bar, [float(sigma)]])]
        for l in range(self.num_layers):
            z = self._Ws[l] @ acts[l] + self._bs[l]
            acts.append(np.tanh(z) if l < self.num_layers - 1 else z)
        return acts

    def eps(self, x_bar: np.ndarray, sigma: float) -> np.ndarray:
        x_bar = self._check_vec(x_bar)
        return self._forward(x_bar, sigma)[-1]

    def eps_with_tape(self, x_bar: np.ndarray, sigma: float) -> tuple[np.ndarray, list[np.ndarray]]:
        x_bar = self._check_vec(x_bar)
        acts = self._forward(x_bar, sigma)
        return acts[-1], acts[:-1]

    def vjp_from_tape(self, tape: list[np.ndarray], v: np.ndarray) -> np.ndarray:
        v = self._check_vec(v, "v")
        g = v
        for l in range(self.num_layers - 1, -1, -1):
            g = self._Ws[l].T @ g
            if l > 0:
                g = g * (1.0 - tape[l] * tape[l])  # tanh'(z) = 1 - tanh(z)^2
        return g[: self.dim]

    def vjp(self, x_bar: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray:
        _, tape = self.eps_with_tape(x_bar, sigma)
        return self.vjp_from_tape(tape, v)

    def jvp(self, x_bar: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray:
        x_bar = self._check_vec(x_bar)
        v = self._check_vec(v, "v")
        acts = self._forward(x_bar, sigma)
        u = np.concatenate([v, [0.0]])  # sigma is held fixed
        for l in range(self.num_layers):
            u = self._Ws[l] @ u
            if l < self.num_layers - 1:
                u = u * (1.0 - acts[l + 1] * acts[l + 1])
        return u

    def to_json_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "layers": [
                {"W": [[float(v) for v in row] for row in W], "b": [float(v) for v in b]}
                for W, b in zip(self._Ws, self._bs)
            ],
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "MlpModel":
        layers = [(np.asarray(l["W"]), np.asarray(l["b"])) for l in obj["layers"]]
        return cls(obj["widths"], layers, seed=obj.get("seed"))


class AffineModel(ScoreModel):
    """eps(x_bar, sigma) = A x_bar + offset, independent of sigma."""

    def __init__(self, matrix: np.ndarray, offset: np.ndarray | None = None) -> None:
        A = np.asarray(matrix, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        self.dim = A.shape[0]
        b = np.zeros(self.dim) if offset is None else np.asarray(offset, dtype=np.float64)
        if b.shape != (self.dim,):
            raise ValueError("offset dimension mismatch")
        A = A.copy()
        b = b.copy()
        A.setflags(write=False)
        b.setflags(write=False)
        self.matrix = A
        self.offset = b

    @classmethod
    def zero(cls, dim: int) -> "AffineModel":
        return cls(np.zeros((dim, dim)))

    def eps(self, x_bar: np.ndarray, sigma: float) -> np.ndarray:
        x_bar = self._check_vec(x_bar)
        return self.matrix @ x_bar + self.offset

    def vjp(self, x_bar: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray:
        return self.matrix.T @ self._check_vec(v, "v")

    def jvp(self, x_bar: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray:
        return self.matrix @ self._check_vec(v, "v")

    def eps_with_tape(self, x_bar: np.ndarray, sigma: float) -> tuple[np.ndarray, list[np.ndarray]]:
        # Linear map: the backward pass needs no stored activations.
        return self.eps(x_bar, sigma), []

    def vjp_from_tape(self, tape: list[np.ndarray], v: np.ndarray) -> np.ndarray:
        return self.matrix.T @ self._check_vec(v, "v")


def eps_at_step(model: ScoreModel, x: np.ndarray, schedule: NoiseSchedule, t: int) -> np.ndarray:
    """Noise prediction at an unscaled grid state: eps(x / sqrt(a_t), sigma_t)."""
    return model.eps(schedule.to_scaled(x, t), schedule.sigma(t))


def vjp_at_step(
    model: ScoreModel, x: np.ndarray, schedule: NoiseSchedule, t: int, v: np.ndarray
) -> np.ndarray:
    """v^T (d eps / d x) in unscaled coordinates.

    The scaled-coordinate Jacobian picks up a 1/sqrt(alpha_t) factor under
    the chain rule, so this equals model.vjp(...) / sqrt(alpha_t).
    """
    t = schedule._check_step(t)
    x_bar = schedule.to_scaled(x, t)
    return model.vjp(x_bar, schedule.sigma(t), v) / np.sqrt(schedule.alpha[t])


def finite_diff_vjp(
    model: ScoreModel,
    x: np.ndarray,
    schedule: NoiseSchedule,
    t: int,
    v: np.ndarray,
    h: float,
) -> np.ndarray:
    """Central-difference estimate of v^T (d eps / d x), unscaled coordinates.

    Test oracle: differentiates x -> v . eps_at_step(x) one coordinate at a
    time; agreement with vjp_at_step is O(h^2).
    """
    if not h > 0.0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(x)
    for j in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        fp = float(v @ eps_at_step(model, xp, schedule, t))
        fm = float(v @ eps_at_step(model, xm, schedule, t))
        out[j] = (fp - fm) / (2.0 * h)
    return out
