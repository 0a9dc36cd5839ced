"""Update rules and step-size schedules.

The adaptive family tracks a first moment m and a max-corrected second
moment v, and steps along m / v^p. Plain SGD is the degenerate p = 0,
beta1 = 0 member. The family's update-history Lipschitz constant has a
closed form in (p, c, L, Ginf); it is what the weak-consistency error
bounds consume.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ScheduleError


@dataclass(frozen=True)
class SamConfig:
    """Hyperparameters of the adaptive-method family.

    ``p`` is the preconditioning exponent (0 recovers momentum/SGD, 1/2 the
    RMSProp/AMSGrad square root), ``c`` the floor put under every coordinate
    of v at t = 0.
    """

    p: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.999
    c: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p <= 0.5:
            raise ConfigError(f"p must lie in [0, 1/2], got {self.p}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.c <= 0.0:
            raise ConfigError(f"c must be positive, got {self.c}")
        if self.p > 0.0 and self.beta1 >= self.beta2 ** (2.0 * self.p):
            raise ConfigError(
                f"need beta1 < beta2^(2p) for p > 0; got beta1={self.beta1}, "
                f"beta2^(2p)={self.beta2 ** (2.0 * self.p):.6g}"
            )


# The four named members used throughout the tests and the CLI.
OPTIMIZER_PRESETS: dict[str, SamConfig] = {
    "sgd": SamConfig(p=0.0, beta1=0.0),
    "momentum": SamConfig(p=0.0, beta1=0.9),
    "rmsprop": SamConfig(p=0.5, beta1=0.0, beta2=0.99),
    "amsgrad": SamConfig(p=0.5, beta1=0.9, beta2=0.999),
}


def optimizer_config(kind: str, **overrides) -> SamConfig:
    """Preset config by name, with field overrides."""
    if kind not in OPTIMIZER_PRESETS:
        raise ConfigError(
            f"unknown optimizer {kind!r}; expected one of "
            f"{sorted(OPTIMIZER_PRESETS)}"
        )
    base = OPTIMIZER_PRESETS[kind]
    merged = {
        "p": base.p,
        "beta1": base.beta1,
        "beta2": base.beta2,
        "c": base.c,
        **overrides,
    }
    return SamConfig(**merged)


@dataclass
class SamState:
    """Per-trajectory moment estimates; one instance per optimizer copy."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def init(cls, d: int, cfg: SamConfig) -> "SamState":
        return cls(m=np.zeros(d), v=np.full(d, cfg.c), t=0)

    def copy(self) -> "SamState":
        return SamState(self.m.copy(), self.v.copy(), self.t)


def sgd_delta(g: np.ndarray) -> np.ndarray:
    """The SGD update is the gradient itself."""
    return np.asarray(g, dtype=np.float64)


def sam_delta(state: SamState, cfg: SamConfig, g: np.ndarray) -> np.ndarray:
    """Advance the moment recursions by one gradient and return m / v^p.

    The second moment takes the elementwise max with its previous value, so
    v never decreases and never drops below its floor c.
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise ValueError("non-finite gradient fed to the optimizer")
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    state.v = np.maximum(cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g, state.v)
    state.t += 1
    if cfg.p == 0.0:
        return state.m.copy()
    return state.m / state.v**cfg.p


def sam_lipschitz(cfg: SamConfig, L: float, Ginf: float | None) -> float:
    """History-Lipschitz constant of the expected adaptive update.

    ((c + 2 p Ginf) L^2 / c^(2p+1)) * max(2, 4 p Ginf / c); collapses to
    2 L^2 at p = 0, where the gradient bound is not needed.
    """
    if cfg.p == 0.0:
        return 2.0 * L * L
    if Ginf is None:
        raise ConfigError("Ginf required by the update-Lipschitz bound for p > 0")
    c, p = cfg.c, cfg.p
    lead = (c + 2.0 * p * Ginf) * L * L / c ** (2.0 * p + 1.0)
    return lead * max(2.0, 4.0 * p * Ginf / c)


# ---------------------------------------------------------------------------
# step-size schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepSchedule:
    """Non-increasing positive step sizes with three kinds.

    constant: fixed alpha. horizon_tuned: the constant step
    sqrt(2 f0_gap) / (sigma sqrt(L T) + t_mix), which balances the noise and
    staleness terms of the convergence bound over a known horizon T.
    table: explicit per-step values, clamped to the last entry past the end.
    """

    kind: str = "constant"
    alpha0: float = 0.1
    f0_gap: float = 1.0
    sigma: float = 0.0
    L: float = 1.0
    tmix: float = 1.0
    T: int = 1
    xi: float = 1.0
    table: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.kind == "constant":
            if self.alpha0 <= 0:
                raise ScheduleError(f"alpha must be positive, got {self.alpha0}")
        elif self.kind == "horizon_tuned":
            if self.f0_gap <= 0 or self.L <= 0 or self.T < 1:
                raise ScheduleError("horizon_tuned needs f0_gap > 0, L > 0, T >= 1")
            if self.sigma < 0 or self.tmix < 0:
                raise ScheduleError("sigma and tmix must be nonnegative")
            denom = self.sigma * math.sqrt(self.L * self.T) + self.tmix
            if denom == 0.0:
                raise ScheduleError(
                    "horizon_tuned step undefined: sigma·sqrt(LT) + tmix = 0"
                )
            if self.sigma > 0:
                threshold = (
                    64.0
                    * self.f0_gap
                    * self.xi**2
                    * (1.0 + self.xi) ** 2
                    * self.tmix**2
                    * self.L
                    / self.sigma**2
                )
                if self.T < threshold:
                    warnings.warn(
                        f"horizon T={self.T} is below the tuned-step validity "
                        f"threshold {threshold:.3g}; the noise term may not "
                        "dominate yet",
                        RuntimeWarning,
                        stacklevel=2,
                    )
        elif self.kind == "table":
            if len(self.table) == 0:
                raise ScheduleError("table schedule needs at least one entry")
            vals = list(self.table)
            if any(a <= 0 for a in vals):
                raise ScheduleError("table entries must be positive")
            if any(b > a for a, b in zip(vals, vals[1:])):
                raise ScheduleError("table entries must be non-increasing")
        else:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")

    def alpha(self, t: int) -> float:
        if t < 0:
            raise ScheduleError(f"step index must be nonnegative, got {t}")
        if self.kind == "constant":
            return self.alpha0
        if self.kind == "horizon_tuned":
            denom = self.sigma * math.sqrt(self.L * self.T) + self.tmix
            return math.sqrt(2.0 * self.f0_gap) / denom
        return self.table[min(t, len(self.table) - 1)]


def schedule_alpha(schedule: StepSchedule, t: int) -> float:
    return schedule.alpha(t)
