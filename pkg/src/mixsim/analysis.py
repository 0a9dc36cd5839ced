"""Numerical checks of the convergence bounds against recorded traces.

Every check integrates trace columns into the two sides of an inequality and
returns a BoundReport. Expectations are approximated by averaging traces over
seeds; the checks therefore need each trace in a group to come from the same
config (identical step grid and schedule).

The trailing cubic sums run one index past the last recorded step. Traces
only carry steps t < T, so the extra term reuses the final recorded step
size. For the schedules this package ships (constant, horizon-tuned, clamped
table) that value is exact; for a still-decreasing table it overstates the
term, erring on the loose side of the bound by one summand.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigError
from .optimizers import SamConfig

REL_TOL = 1e-9


@dataclass
class BoundReport:
    """One checked inequality: lhs <= rhs up to relative slack REL_TOL."""

    name: str
    lhs: float
    rhs: float
    inputs: dict = field(default_factory=dict)
    seeds: tuple[int, ...] = ()
    slack: float = field(init=False)
    holds: bool = field(init=False)

    def __post_init__(self):
        self.slack = self.rhs - self.lhs
        self.holds = bool(self.lhs <= self.rhs * (1.0 + REL_TOL))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack": self.slack,
            "holds": self.holds,
            "inputs": self.inputs,
            "seeds": list(self.seeds),
        }

    def __str__(self) -> str:
        verdict = "holds" if self.holds else "VIOLATED"
        return f"{self.name}: lhs={self.lhs:.6g} rhs={self.rhs:.6g} [{verdict}]"


# ---------------------------------------------------------------------------
# trace aggregation
# ---------------------------------------------------------------------------


def _as_group(traces) -> list:
    group = list(traces)
    if not group:
        raise ConfigError("need at least one trace")
    return group


def _require_full_grid(group) -> None:
    t0 = group[0].t
    if len(t0) == 0:
        raise ConfigError("empty trace")
    if not np.array_equal(t0, np.arange(len(t0))):
        raise ConfigError(
            "bound checks need every step recorded (metric_cadence 1)"
        )
    for tr in group[1:]:
        if not np.array_equal(tr.t, t0):
            raise ConfigError("traces in a group must share the step grid")
        if not np.array_equal(tr.alpha, group[0].alpha):
            raise ConfigError("traces in a group must share the schedule")


def _require_nonincreasing(alpha: np.ndarray, name: str) -> None:
    if np.any(np.diff(alpha) > 0):
        raise ConfigError(f"{name} requires a non-increasing step schedule")


def _require_sgd(group, name: str) -> None:
    for tr in group:
        opt = (tr.summary or {}).get("optimizer")
        if opt is not None and opt != "sgd":
            raise ConfigError(
                f"{name} reads the gradient columns as the update sequence, "
                f"which is only exact for plain SGD traces (got {opt!r})"
            )


def _mean_column(group, name: str) -> np.ndarray:
    return np.mean([tr.column(name) for tr in group], axis=0)


def _mean_terminal_f(group) -> float:
    vals = []
    for tr in group:
        f_xT = (tr.summary or {}).get("f_xT")
        if f_xT is None:
            raise ConfigError(
                "trace has no terminal value f_xT in its summary; load the "
                "run's summary.json alongside the CSV"
            )
        vals.append(float(f_xT))
    return float(np.mean(vals))


def _seeds(group) -> tuple[int, ...]:
    return tuple(sorted({int(tr.seed) for tr in group}))


def _cubic_sum_inclusive(alpha: np.ndarray) -> float:
    # sum over t <= T of alpha_t^3, with alpha_T taken as the last recorded
    # value (see module docstring)
    return float(np.sum(alpha**3) + alpha[-1] ** 3)


def _standard_error(per_seed: list[float]) -> float:
    if len(per_seed) < 2:
        return 0.0
    return float(np.std(per_seed, ddof=1) / math.sqrt(len(per_seed)))


# ---------------------------------------------------------------------------
# the bounds
# ---------------------------------------------------------------------------


def check_lemma2(traces, t_mix: float, xi: float, Lcal: float, sigma2: float) -> BoundReport:
    """Bound on the update gap between consensus and local trajectories.

    lhs: sum_t alpha_t E||delta_x - delta_u||^2.
    rhs: 16 (1+xi)^2 xi^2 t_mix^2 Lcal^2 * sum_t alpha_t^3 E||delta_x||^2
         + 4 (1+xi)^2 xi^2 t_mix sigma^2 Lcal^2 * sum_{t<=T} alpha_t^3.
    """
    group = _as_group(traces)
    _require_full_grid(group)
    _require_sgd(group, "check_lemma2")
    alpha = group[0].alpha
    _require_nonincreasing(alpha, "check_lemma2")

    gap = _mean_column(group, "delta_gap_sq")
    delta_x_sq = _mean_column(group, "grad_sq")
    per_seed = [float(np.sum(alpha * tr.delta_gap_sq)) for tr in group]
    lhs = float(np.sum(alpha * gap))
    mix = (1.0 + xi) ** 2 * xi**2
    rhs = 16.0 * mix * t_mix**2 * Lcal**2 * float(np.sum(alpha**3 * delta_x_sq))
    rhs += 4.0 * mix * t_mix * sigma2 * Lcal**2 * _cubic_sum_inclusive(alpha)
    return BoundReport(
        "lemma2",
        lhs,
        rhs,
        inputs={
            "t_mix": t_mix,
            "xi": xi,
            "Lcal": Lcal,
            "sigma2": sigma2,
            "T": int(len(alpha)),
            "n_traces": len(group),
            "lhs_se": _standard_error(per_seed),
        },
        seeds=_seeds(group),
    )


def check_lemma3(traces, L: float, sigma2: float) -> BoundReport:
    """Descent bound along the consensus trajectory.

    lhs: sum_t alpha_t E||grad f(x_t)||^2.
    rhs: 2 (E f(x_0) - E f(x_T)) + sigma^2 L sum_t alpha_t^2
         + sum_t alpha_t E||grad f(x_t) - grad f(u_t)||^2.
    """
    group = _as_group(traces)
    _require_full_grid(group)
    _require_sgd(group, "check_lemma3")
    alpha = group[0].alpha

    grad_sq = _mean_column(group, "grad_sq")
    gap = _mean_column(group, "delta_gap_sq")
    per_seed = [float(np.sum(alpha * tr.grad_sq)) for tr in group]
    f0 = float(np.mean([tr.f[0] for tr in group]))
    fT = _mean_terminal_f(group)
    lhs = float(np.sum(alpha * grad_sq))
    rhs = (
        2.0 * (f0 - fT)
        + sigma2 * L * float(np.sum(alpha**2))
        + float(np.sum(alpha * gap))
    )
    return BoundReport(
        "lemma3",
        lhs,
        rhs,
        inputs={
            "L": L,
            "sigma2": sigma2,
            "f_x0": f0,
            "f_xT": fT,
            "T": int(len(alpha)),
            "n_traces": len(group),
            "lhs_se": _standard_error(per_seed),
        },
        seeds=_seeds(group),
    )


def check_theorem1(traces, L: float, t_mix: float, xi: float, sigma2: float) -> BoundReport:
    """Convergence bound for distributed SGD, self-contained in trace data.

    lhs: sum_t alpha_t (1 - 16 (1+xi)^2 xi^2 t_mix^2 L^2 alpha_t^2)
         * E||grad f(x_t)||^2.
    rhs: 2 (E f(x_0) - E f(x_T)) + sigma^2 L sum alpha_t^2
         + 4 (1+xi)^2 xi^2 t_mix sigma^2 L^2 sum_{t<=T} alpha_t^3.

    The step-size sanity value 16 (1+xi)^2 xi^2 t_mix^2 L^2 alpha_0^2 is
    echoed in the report; at or above 1 the lhs weights lose positivity and
    the bound stops constraining anything, so that triggers a warning.
    """
    group = _as_group(traces)
    _require_full_grid(group)
    _require_sgd(group, "check_theorem1")
    alpha = group[0].alpha
    _require_nonincreasing(alpha, "check_theorem1")

    grad_sq = _mean_column(group, "grad_sq")
    f0 = float(np.mean([tr.f[0] for tr in group]))
    fT = _mean_terminal_f(group)
    mix = (1.0 + xi) ** 2 * xi**2
    sanity = 16.0 * mix * t_mix**2 * L**2 * float(alpha[0]) ** 2
    if sanity >= 1.0:
        warnings.warn(
            f"step size too large for the bound to bite: sanity value "
            f"{sanity:.3g} >= 1",
            RuntimeWarning,
            stacklevel=2,
        )
    weights = alpha * (1.0 - 16.0 * mix * t_mix**2 * L**2 * alpha**2)
    lhs = float(np.sum(weights * grad_sq))
    per_seed = [float(np.sum(weights * tr.grad_sq)) for tr in group]
    rhs = (
        2.0 * (f0 - fT)
        + sigma2 * L * float(np.sum(alpha**2))
        + 4.0 * mix * t_mix * sigma2 * L**2 * _cubic_sum_inclusive(alpha)
    )
    return BoundReport(
        "theorem1",
        lhs,
        rhs,
        inputs={
            "L": L,
            "t_mix": t_mix,
            "xi": xi,
            "sigma2": sigma2,
            "sanity_alpha0": sanity,
            "f_x0": f0,
            "f_xT": fT,
            "T": int(len(alpha)),
            "n_traces": len(group),
            "lhs_se": _standard_error(per_seed),
        },
        seeds=_seeds(group),
    )


# ---------------------------------------------------------------------------
# adaptive-method constants
# ---------------------------------------------------------------------------


def theorem2_constants(
    cfg: SamConfig, L: float, Ginf: float | None, f0_gap: float, xi: float, d: int
) -> dict:
    """The four constants of the adaptive-method convergence bound.

    ``f0_gap`` is E f(x_0 / (1 - beta1)) - f*; with the default all-zeros
    start that is just f(0) - f*. ``d`` enters the dimension-dependent
    moment-drift term.
    """
    if Ginf is None:
        raise ConfigError(
            "Ginf required: the adaptive-method constants need a uniform "
            "bound on the stochastic gradients"
        )
    if d < 1:
        raise ConfigError("d must be positive")
    if f0_gap < 0:
        raise ConfigError("f0_gap must be nonnegative")
    p, b1, b2, c = cfg.p, cfg.beta1, cfg.beta2, cfg.c
    g2p = Ginf ** (2.0 * p)
    c1 = 2.0 * g2p * f0_gap
    c2 = (
        2.0
        * (3.0 * L + 6.0 * L * b1**2 / (1.0 - b1))
        * Ginf ** (2.0 - 2.0 * p)
        * d
        / ((1.0 - b2) ** (2.0 * p) * (1.0 - b1 / b2 ** (2.0 * p)))
    )
    c3 = 4.0 * L * g2p / (1.0 - b1) ** 2
    momentum_factor = (
        2.0 * (1.0 + b1) * (2.0 - b1) * g2p / (1.0 - b1) ** 2
        + (2.0 - b1) / (1.0 - b1)
    )
    c4 = (
        8.0
        * (1.0 + xi) ** 2
        * xi**2
        * ((c + 2.0 * p * Ginf) ** 2 * L**4 * g2p / c ** (4.0 * p + 2.0))
        * momentum_factor
        * max(4.0, 16.0 * p**2 * Ginf**2 / c**2)
    )
    return {
        "C1": c1,
        "C2": c2,
        "C3": c3,
        "C4": c4,
        "p": p,
        "beta1": b1,
        "beta2": b2,
        "c": c,
        "L": L,
        "Ginf": Ginf,
        "f0_gap": f0_gap,
        "xi": xi,
        "d": d,
    }


def check_theorem2(traces, constants: dict, t_mix: float, sigma2: float) -> BoundReport:
    """Convergence bound for the adaptive family.

    lhs: sum_t alpha_t E||grad f(x_t)||^2.
    rhs: C1 + (C2 + C3 sigma^2) sum alpha_t^2
         + C4 t_mix sigma^2 sum_{t<=T} alpha_t^3.
    """
    group = _as_group(traces)
    _require_full_grid(group)
    alpha = group[0].alpha
    _require_nonincreasing(alpha, "check_theorem2")
    for key in ("C1", "C2", "C3", "C4"):
        if key not in constants:
            raise ConfigError(f"constants dict is missing {key}")

    grad_sq = _mean_column(group, "grad_sq")
    per_seed = [float(np.sum(alpha * tr.grad_sq)) for tr in group]
    lhs = float(np.sum(alpha * grad_sq))
    sq = float(np.sum(alpha**2))
    rhs = (
        constants["C1"]
        + constants["C2"] * sq
        + constants["C3"] * sigma2 * sq
        + constants["C4"] * t_mix * sigma2 * _cubic_sum_inclusive(alpha)
    )
    return BoundReport(
        "theorem2",
        lhs,
        rhs,
        inputs={
            "t_mix": t_mix,
            "sigma2": sigma2,
            "constants": {k: constants[k] for k in ("C1", "C2", "C3", "C4")},
            "T": int(len(alpha)),
            "n_traces": len(group),
            "lhs_se": _standard_error(per_seed),
        },
        seeds=_seeds(group),
    )


# ---------------------------------------------------------------------------
# recursive-sum bound
# ---------------------------------------------------------------------------


def check_lemma5(a, b, rho: float, Tper: int) -> tuple[BoundReport, BoundReport]:
    """Geometric-window sum exchange, linear and squared forms.

    linear:  sum_t a_t sum_{s<=t} rho^floor((t-s)/Tper) b_s
             <= (Tper/(1-rho)) sum_t a_t b_t
    squared: sum_t a_t (sum_{s<=t} rho^floor((t-s)/Tper) b_s)^2
             <= (Tper/(1-rho))^2 sum_t a_t b_t^2
    Requires 0 <= rho < 1, Tper >= 1, a non-increasing and nonnegative,
    b nonnegative. 0^0 counts as 1 (the s = t term always contributes).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ConfigError("a and b must be equal-length nonempty 1-d arrays")
    if not 0.0 <= rho < 1.0:
        raise ConfigError("rho must lie in [0, 1)")
    if Tper < 1:
        raise ConfigError("Tper must be at least 1")
    if np.any(a < 0) or np.any(b < 0):
        raise ConfigError("a and b must be nonnegative")
    if np.any(np.diff(a) > 0):
        raise ConfigError("a must be non-increasing")

    n = a.size
    t_idx = np.arange(n)
    # powers[t, s] = rho^floor((t-s)/Tper) for s <= t, else 0
    lag = t_idx[:, None] - t_idx[None, :]
    with np.errstate(invalid="ignore"):
        powers = np.where(lag >= 0, rho ** np.maximum(lag // Tper, 0), 0.0)
    if rho == 0.0:
        powers = np.where((lag >= 0) & (lag // Tper == 0), 1.0, 0.0)
    inner = powers @ b

    factor = Tper / (1.0 - rho)
    linear = BoundReport(
        "lemma5_linear",
        float(np.sum(a * inner)),
        factor * float(np.sum(a * b)),
        inputs={"rho": rho, "Tper": Tper, "n": int(n)},
    )
    squared = BoundReport(
        "lemma5_squared",
        float(np.sum(a * inner**2)),
        factor**2 * float(np.sum(a * b**2)),
        inputs={"rho": rho, "Tper": Tper, "n": int(n)},
    )
    return linear, squared


# ---------------------------------------------------------------------------
# rate fitting
# ---------------------------------------------------------------------------


@dataclass
class FitReport:
    """Joint least-squares fit of mean grad norms to a/sqrt(T) + b*tmix/T."""

    a: float
    b: float
    residual: float
    clipped: bool
    a_by_tmix: dict
    n_points: int
    T_values: tuple[int, ...]
    tmix_values: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "b": self.b,
            "residual": self.residual,
            "clipped": self.clipped,
            "a_by_tmix": {str(k): v for k, v in self.a_by_tmix.items()},
            "n_points": self.n_points,
            "T_values": list(self.T_values),
            "tmix_values": list(self.tmix_values),
        }


def _fit_point(entry):
    if isinstance(entry, dict):
        return float(entry["T"]), float(entry["tmix"]), float(entry["mean_grad_sq"])
    T, tmix, y = entry
    return float(T), float(tmix), float(y)


def fit_rate(summaries) -> FitReport:
    """Fit the two-term rate model across a (T, tmix) sweep.

    Needs at least 4 points spanning at least two distinct T and two
    distinct tmix values; anything less cannot separate the two terms.
    Negative coefficients are clipped to zero and flagged.
    """
    points = [_fit_point(e) for e in summaries]
    if len(points) < 4:
        raise ConfigError("fit_rate needs at least 4 sweep points")
    Ts = np.array([p[0] for p in points])
    tmixes = np.array([p[1] for p in points])
    ys = np.array([p[2] for p in points])
    if np.any(Ts < 1) or np.any(tmixes < 0):
        raise ConfigError("sweep points must have T >= 1 and tmix >= 0")
    if not np.all(np.isfinite(ys)) or np.any(ys < 0):
        raise ConfigError("mean_grad_sq values must be finite and nonnegative")
    if len(set(Ts.tolist())) < 2 or len(set(tmixes.tolist())) < 2:
        raise ConfigError(
            "degenerate sweep grid: need at least two distinct T and two "
            "distinct tmix values"
        )

    design = np.column_stack([Ts**-0.5, tmixes / Ts])
    coef, _, _, _ = np.linalg.lstsq(design, ys, rcond=None)
    clipped = bool(np.any(coef < 0))
    a, b = (float(max(v, 0.0)) for v in coef)
    residual = float(np.sqrt(np.mean((design @ np.array([a, b]) - ys) ** 2)))

    a_by_tmix = {}
    for value in sorted(set(tmixes.tolist())):
        mask = tmixes == value
        adjusted = ys[mask] - b * value / Ts[mask]
        basis = Ts[mask] ** -0.5
        a_by_tmix[value] = float(np.sum(basis * adjusted) / np.sum(basis**2))

    return FitReport(
        a=a,
        b=b,
        residual=residual,
        clipped=clipped,
        a_by_tmix=a_by_tmix,
        n_points=len(points),
        T_values=tuple(sorted({int(t) for t in Ts.tolist()})),
        tmix_values=tuple(sorted(set(tmixes.tolist()))),
    )


def spearman(x, y) -> float:
    """Rank correlation; the sweep diagnostics use it for monotonicity."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ConfigError("spearman needs two equal-length 1-d arrays, n >= 2")
    result = stats.spearmanr(x, y)
    return float(result.statistic if hasattr(result, "statistic") else result[0])
