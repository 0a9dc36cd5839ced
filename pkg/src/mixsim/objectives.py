"""Smooth non-convex test objectives with exact gradients and certified
constants.

Every objective declares a smoothness constant L that provably dominates the
gradient's Lipschitz constant (derived from closed-form curvature bounds, not
fitted), an optional lower bound ``f_star``, and an optional uniform bound
``Ginf`` on the max-norm of minibatch gradients. Bounded-gradient kinds are
the ones adaptive-method experiments may use; quadratics are reserved for
plain SGD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError

# Peak of |d/dz s(z)^2| = |2 s^2 (1-s)| over s in (0,1), hit at s = 2/3.
SIGMOID_SQ_SLOPE = 8.0 / 27.0
# Peak curvature of s(z)^2: |2 s^2 (1-s)(2-3s)| maximized where
# 12 s^2 - 15 s + 4 = 0, at s = (15 - sqrt(33)) / 24.
_S_PEAK = (15.0 - math.sqrt(33.0)) / 24.0
SIGMOID_SQ_CURV = 2.0 * _S_PEAK**2 * (1.0 - _S_PEAK) * (2.0 - 3.0 * _S_PEAK)
# Peak slope of u^2 / (1 + u^2), hit at u = 1/sqrt(3).
RATIONAL_REG_SLOPE = 9.0 / (8.0 * math.sqrt(3.0))
# Peak curvature of the same regularizer, hit at u = 0.
RATIONAL_REG_CURV = 2.0


def _check_point(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (d,):
        raise ValueError(f"expected point of shape ({d},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("point has non-finite entries")
    return x


class Quadratic:
    """f(x) = 1/2 (x - c)^T diag(lam) (x - c); L = max(lam), minimum 0 at c.

    Kept diagonal on purpose: the gradient is an elementwise product, so
    runs reproduce bit-for-bit regardless of BLAS threading.
    """

    kind = "quadratic"

    def __init__(self, diag: np.ndarray, center: np.ndarray):
        diag = np.asarray(diag, dtype=np.float64)
        center = np.asarray(center, dtype=np.float64)
        if diag.ndim != 1 or diag.shape != center.shape:
            raise ValueError("diag and center must be 1-d arrays of equal length")
        if np.any(diag < 0):
            raise ValueError("diag must be nonnegative for a PSD quadratic")
        self.diag = diag
        self.center = center
        self.d = diag.shape[0]
        self.L = float(diag.max())
        self.f_star = 0.0
        self.Ginf = None

    def value(self, x: np.ndarray) -> float:
        r = _check_point(x, self.d) - self.center
        return 0.5 * float(r @ (self.diag * r))

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.diag * (_check_point(x, self.d) - self.center)


class SigmoidSum:
    """f(x) = (1/K) sum_k s(a_k.x - b_k)^2 with s the logistic function.

    Non-convex, gradients bounded in max norm by SIGMOID_SQ_SLOPE times the
    largest |a| entry (valid for any minibatch, since minibatch gradients
    are averages of per-term gradients).
    """

    kind = "sigmoid_sum"

    def __init__(self, a: np.ndarray, b: np.ndarray):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.ndim != 2 or b.shape != (a.shape[0],):
            raise ValueError("need a of shape (K, d) and b of shape (K,)")
        self.a = a
        self.b = b
        self.d = a.shape[1]
        self.L = float(SIGMOID_SQ_CURV * np.mean(np.sum(a * a, axis=1)))
        self.f_star = 0.0
        self.Ginf = float(SIGMOID_SQ_SLOPE * np.abs(a).max())

    def _margins(self, x: np.ndarray) -> np.ndarray:
        return self.a @ x - self.b

    def value(self, x: np.ndarray) -> float:
        s = expit(self._margins(_check_point(x, self.d)))
        return float(np.mean(s * s))

    def grad(self, x: np.ndarray) -> np.ndarray:
        s = expit(self._margins(_check_point(x, self.d)))
        w = 2.0 * s * s * (1.0 - s)
        return (w @ self.a) / self.a.shape[0]

    def term_grad(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Average gradient of the terms in ``idx`` (a minibatch)."""
        a = self.a[idx]
        s = expit(a @ x - self.b[idx])
        w = 2.0 * s * s * (1.0 - s)
        return (w @ a) / len(idx)


class RegularizedLogistic:
    """Mean logistic loss plus the bounded non-convex penalty
    sum_i x_i^2 / (1 + x_i^2).

    The loss part is convex with curvature at most mean(|a_k|^2)/4; the
    penalty has curvature at most 2, hence L = L_logit + 2.
    """

    kind = "reg_logistic"

    def __init__(self, a: np.ndarray, y: np.ndarray):
        a = np.asarray(a, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if a.ndim != 2 or y.shape != (a.shape[0],):
            raise ValueError("need a of shape (K, d) and y of shape (K,)")
        if not np.all(np.abs(y) == 1.0):
            raise ValueError("labels must be +-1")
        self.a = a
        self.y = y
        self.d = a.shape[1]
        self.L = float(np.mean(np.sum(a * a, axis=1)) / 4.0 + RATIONAL_REG_CURV)
        self.f_star = 0.0
        self.Ginf = float(np.abs(a).max() + RATIONAL_REG_SLOPE)

    def value(self, x: np.ndarray) -> float:
        z = self.y * (self.a @ _check_point(x, self.d))
        loss = float(np.mean(np.logaddexp(0.0, -z)))
        xx = x * x
        return loss + float(np.sum(xx / (1.0 + xx)))

    def grad(self, x: np.ndarray) -> np.ndarray:
        x = _check_point(x, self.d)
        z = self.y * (self.a @ x)
        w = -self.y * expit(-z)
        loss_g = (w @ self.a) / self.a.shape[0]
        reg_g = 2.0 * x / (1.0 + x * x) ** 2
        return loss_g + reg_g

    def term_grad(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        a = self.a[idx]
        y = self.y[idx]
        w = -y * expit(-y * (a @ x))
        reg_g = 2.0 * x / (1.0 + x * x) ** 2
        return (w @ a) / len(idx) + reg_g


def make_objective(kind: str, d: int, seed: int = 0, terms: int | None = None):
    """Build a test objective of the given kind at dimension ``d``.

    Data-backed kinds draw rows a_k ~ N(0, I/d), so per-term gradients stay
    O(1) as the dimension grows. ``terms`` overrides the default K = 4 d.
    """
    if d < 1:
        raise ConfigError(f"dimension must be positive, got {d}")
    rng = np.random.default_rng(seed)
    k = terms if terms is not None else max(8, 4 * d)
    if kind == "quadratic":
        diag = np.geomspace(0.1, 1.0, d)
        diag[-1] = 1.0  # exact top eigenvalue, so L is not a rounded float
        return Quadratic(diag, rng.standard_normal(d))
    if kind == "sigmoid_sum":
        a = rng.standard_normal((k, d)) / math.sqrt(d)
        return SigmoidSum(a, rng.standard_normal(k))
    if kind == "reg_logistic":
        a = rng.standard_normal((k, d)) / math.sqrt(d)
        y = np.where(rng.standard_normal(k) >= 0, 1.0, -1.0)
        return RegularizedLogistic(a, y)
    raise ConfigError(f"unknown objective kind {kind!r}")


# ---------------------------------------------------------------------------
# stochastic gradient oracle
# ---------------------------------------------------------------------------


@dataclass
class GradientOracle:
    """Noise model wrapped around an objective.

    gaussian: adds isotropic noise with variance sigma^2/d per coordinate,
    symmetrically clipped at ``clip_sigmas`` standard deviations. Symmetric
    clipping keeps the noise exactly unbiased, leaves the variance within
    one part in 1e13 of sigma^2, and makes the stochastic gradient bounded,
    which the adaptive-method analysis needs.

    minibatch: averages ``batch_size`` uniformly resampled terms of a
    data-backed objective; the noise level is whatever the data gives.
    """

    objective: object
    sigma: float = 0.0
    mode: str = "gaussian"
    batch_size: int = 1
    clip_sigmas: float = 8.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        if self.mode not in ("gaussian", "minibatch"):
            raise ConfigError(f"unknown noise mode {self.mode!r}")
        if self.mode == "minibatch":
            if not hasattr(self.objective, "term_grad"):
                raise ConfigError(
                    f"objective kind {self.objective.kind!r} has no dataset "
                    "to draw minibatches from"
                )
            if self.batch_size < 1:
                raise ConfigError("batch_size must be positive")

    @property
    def ginf(self) -> float | None:
        """Uniform bound on the stochastic gradient's max norm, if any."""
        base = self.objective.Ginf
        if base is None:
            return None
        if self.mode == "minibatch" or self.sigma == 0.0:
            return base
        if not self.clip_sigmas or self.clip_sigmas <= 0:
            return None
        return base + self.clip_sigmas * self.sigma / math.sqrt(self.objective.d)


def stoch_grad(oracle: GradientOracle, x: np.ndarray, rng) -> np.ndarray:
    """One stochastic gradient draw; exact gradient when noiseless."""
    obj = oracle.objective
    if oracle.mode == "minibatch":
        idx = rng.integers(0, obj.a.shape[0], size=oracle.batch_size)
        return obj.term_grad(np.asarray(x, dtype=np.float64), idx)
    g = obj.grad(x)
    if oracle.sigma == 0.0:
        return g
    scale = oracle.sigma / math.sqrt(obj.d)
    z = rng.standard_normal(obj.d)
    if oracle.clip_sigmas and oracle.clip_sigmas > 0:
        z = np.clip(z, -oracle.clip_sigmas, oracle.clip_sigmas)
    return g + scale * z


# ---------------------------------------------------------------------------
# dataset round-trip
# ---------------------------------------------------------------------------


def dump_dataset(objective, path: str) -> None:
    """Write an objective's defining arrays as CSV (one row per term)."""
    if objective.kind == "quadratic":
        rows = np.column_stack([objective.diag, objective.center])
    elif objective.kind == "sigmoid_sum":
        rows = np.column_stack([objective.b, objective.a])
    elif objective.kind == "reg_logistic":
        rows = np.column_stack([objective.y, objective.a])
    else:
        raise ConfigError(f"cannot serialize objective kind {objective.kind!r}")
    np.savetxt(path, rows, delimiter=",", header=f"kind={objective.kind}")


def load_dataset(path: str):
    """Rebuild an objective from ``dump_dataset`` output."""
    with open(path) as fh:
        header = fh.readline().strip()
    if not header.startswith("# kind="):
        raise ConfigError(f"{path}: missing dataset header")
    kind = header.split("=", 1)[1]
    rows = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
    if kind == "quadratic":
        return Quadratic(rows[:, 0], rows[:, 1])
    if kind == "sigmoid_sum":
        return SigmoidSum(rows[:, 1:], rows[:, 0])
    if kind == "reg_logistic":
        return RegularizedLogistic(rows[:, 1:], rows[:, 0])
    raise ConfigError(f"{path}: unknown dataset kind {kind!r}")
