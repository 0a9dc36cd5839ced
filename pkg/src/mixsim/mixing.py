"""Empirical mixing-time estimation for communication schedules.

The central quantity is the smallest window length w such that running
communication events alone over any w consecutive slots halves the distance
to consensus, ``|X - Minf X|``. For deterministic schedules this is measured
exactly: starts cover every period residue and, at desk scale, the window
product is checked against the full consensus complement (an operator-norm
condition), not just against sampled probes. Randomized schedules get a
quantile statistic over sampled starts, with the worst observed window
reported alongside.

All shipped communication operators are non-expansive on the consensus
complement, so the distance is non-increasing along a walk and "first window
that halves" is well defined.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import null_space

from .errors import MixingNotObservedError
from .protocols import RANDOMIZED_KINDS, EventSchedule, Topology, halving_count
from .state import DENSE_CAP, LinearOperator

# Above this state size, per-step exact SVDs get replaced by warm-started
# power iteration with an exact confirmation only at candidate halvings.
_EXACT_SVD_CAP = 512


@dataclass
class MixingReport:
    """Outcome of an empirical mixing estimate.

    ``violations`` holds (start, probe id, ratio) triples for samples that
    never halved within the window cap; probe id -1 marks the dense all-
    directions check. A passing report has an empty list. ``worst_window``
    is the largest first-halving window seen across all samples, which for
    randomized schedules can exceed the quantile figure in ``tmix_hat``.
    """

    tmix_hat: int
    xi_hat: float
    quantile: float
    probes: int
    starts: int
    violations: list[tuple[int, int, float]]
    assumption1_ok: bool
    assumption3_ok: bool
    worst_window: int

    def to_dict(self) -> dict:
        out = asdict(self)
        out["violations"] = [list(v) for v in self.violations]
        return out


def spectral_tmix(topology: Topology) -> int:
    """Gossip applications needed to halve the consensus complement.

    Independent oracle for time-invariant gossip schedules: the complement
    contracts by the second-largest eigenvalue modulus per application.
    """
    return halving_count(topology.slem)


# ---------------------------------------------------------------------------
# walk helpers
# ---------------------------------------------------------------------------


def _complement_probes(minf: LinearOperator, k: int, rng) -> np.ndarray:
    """Unit-norm probe columns in the null space of ``minf``."""
    g = rng.standard_normal((minf.size, k))
    y = np.asarray(g - minf.apply(g))
    norms = np.linalg.norm(y, axis=0)
    if np.any(norms <= 1e-12):
        raise ValueError("degenerate probe draw; consensus space too large?")
    return y / norms


def _distance(minf: LinearOperator, x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x - np.asarray(minf.apply(x)), axis=0)


def _probe_windows(
    schedule: EventSchedule,
    minf: LinearOperator,
    start: int,
    probes: np.ndarray,
    max_window: int,
) -> tuple[np.ndarray, np.ndarray]:
    """First-halving window per probe column; -1 when not reached."""
    cur = probes.copy()
    base = _distance(minf, cur)
    wins = np.full(cur.shape[1], -1, dtype=np.int64)
    best = np.ones(cur.shape[1])
    for w in range(1, max_window + 1):
        ops = schedule.ops_for_slot(start + w - 1)
        if not ops:
            continue
        for op in ops:
            cur = np.asarray(op.apply(cur))
        ratio = _distance(minf, cur) / base
        best = np.minimum(best, ratio)
        newly = (wins < 0) & (ratio <= 0.5 * (1 + 1e-12))
        wins[newly] = w
        if np.all(wins >= 0):
            break
    return wins, best


def _power_sigma(mat: np.ndarray, v: np.ndarray | None, iters: int = 6):
    """Warm-startable top-singular-value estimate of a tall matrix."""
    r = mat.shape[1]
    if v is None:
        v = np.full(r, 1.0 / np.sqrt(r))
    lam = 0.0
    for _ in range(iters):
        w = mat.T @ (mat @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0, v
        v = w / lam
    return float(np.sqrt(lam)), v


def _dense_window(
    schedule: EventSchedule,
    start: int,
    basis: np.ndarray,
    max_window: int,
) -> tuple[int, float]:
    """First window whose product contracts the WHOLE consensus complement.

    ``basis`` is an orthonormal basis of null(Minf); the halving condition
    for every state is exactly sigma_max(product @ basis) <= 1/2. Returns
    (window, best sigma seen), window -1 when never reached.
    """
    cur = basis.copy()
    best = float(np.linalg.norm(cur, 2)) if cur.shape[0] <= _EXACT_SVD_CAP else 1.0
    small = cur.shape[0] <= _EXACT_SVD_CAP
    v = None
    for w in range(1, max_window + 1):
        ops = schedule.ops_for_slot(start + w - 1)
        if not ops:
            continue
        for op in ops:
            cur = np.asarray(op.apply(cur))
        if small:
            sigma = float(np.linalg.norm(cur, 2))
        else:
            sigma, v = _power_sigma(cur, v)
            if sigma <= 0.5 * (1 + 1e-6):
                sigma = float(np.linalg.norm(cur, 2))
        best = min(best, sigma)
        if sigma <= 0.5 * (1 + 1e-12):
            return w, best
    return -1, best


# ---------------------------------------------------------------------------
# public verification entry points
# ---------------------------------------------------------------------------


def estimate_tmix(
    schedule: EventSchedule,
    minf: LinearOperator,
    probes: int = 64,
    starts: int = 32,
    max_window: int | None = None,
    quantile: float | None = None,
    *,
    seed: int = 0,
) -> MixingReport:
    """Measure the halving window of a schedule's communication events.

    Deterministic schedules are summarized at quantile 1.0 over every period
    residue; randomized ones at ``quantile`` (default 0.95) over ``starts``
    consecutive start slots, each a fresh stretch of the event stream.
    Raises ``MixingNotObservedError`` when the required fraction of samples
    never halves within ``max_window`` slots.
    """
    if probes < 1 or starts < 1:
        raise ValueError("probes and starts must be positive")
    randomized = schedule.spec.kind in RANDOMIZED_KINDS
    if quantile is None:
        quantile = 0.95 if randomized else 1.0
    if not randomized:
        quantile = 1.0  # exact worst case is available; anything less lies
    if not 0.0 < quantile <= 1.0:
        raise ValueError(f"quantile must lie in (0, 1], got {quantile}")

    period = schedule.period or 1
    if max_window is None:
        hint = schedule.theoretical_tmix()
        max_window = 4 * hint if hint else max(256, 16 * period)
    if max_window < 1:
        raise ValueError("max_window must be at least 1")

    if randomized:
        start_list = list(range(starts))
    elif period <= starts:
        start_list = list(range(period))
    else:
        start_list = sorted(set(np.linspace(0, period - 1, starts).astype(int).tolist()))

    rng = np.random.default_rng(seed)
    probe_mat = _complement_probes(minf, probes, rng)

    basis = None
    if minf.size <= DENSE_CAP:
        basis = null_space(np.asarray(minf.to_dense()))
        if basis.shape[1] == 0:
            basis = None

    windows: list[int] = []
    failures: list[tuple[int, int, float]] = []
    best_ratio = np.inf
    worst = 0
    for s in start_list:
        wins, ratios = _probe_windows(schedule, minf, s, probe_mat, max_window)
        best_ratio = min(best_ratio, float(ratios.min()))
        for pid, w in enumerate(wins.tolist()):
            if w < 0:
                failures.append((s, pid, float(ratios[pid])))
            else:
                windows.append(w)
                worst = max(worst, w)
        if basis is not None:
            w, sigma = _dense_window(schedule, s, basis, max_window)
            best_ratio = min(best_ratio, sigma)
            if w < 0:
                failures.append((s, -1, sigma))
            else:
                windows.append(w)
                worst = max(worst, w)

    padded = np.asarray(windows + [max_window + 1] * len(failures))
    tmix = int(np.quantile(padded, quantile, method="higher"))
    if tmix > max_window:
        raise MixingNotObservedError(
            f"mixing not observed within {max_window} slots at quantile "
            f"{quantile} (best ratio {best_ratio:.6g})",
            best_ratio=float(best_ratio),
        )

    horizon = max(2 * period, 64)
    xi_hat = verify_scale_bound(schedule, horizon, probes, seed=seed + 1)
    a1_ok = verify_assumption1(schedule, minf, max(2 * period, 16), 1e-9, seed=seed + 2)
    declared = schedule.spec.declared_xi
    a3_ok = bool(xi_hat <= declared * (1 + 1e-6) + 1e-6)
    return MixingReport(
        tmix_hat=max(1, tmix),
        xi_hat=xi_hat,
        quantile=float(quantile),
        probes=probe_mat.shape[1],
        starts=len(start_list),
        violations=failures,
        assumption1_ok=a1_ok,
        assumption3_ok=a3_ok,
        worst_window=int(worst),
    )


def verify_assumption1(
    schedule,
    minf: LinearOperator,
    horizon: int = 64,
    tol: float = 1e-9,
    *,
    probes: int = 8,
    seed: int = 0,
) -> bool:
    """Check that consensus commutes with every emitted operator.

    Requires ``Minf M_t X = M_t Minf X = Minf X`` (and idempotence of Minf)
    on random probes for all slots up to ``horizon``, relative to |X|.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((minf.size, probes))
    xn = np.linalg.norm(x, axis=0)
    mx = np.asarray(minf.apply(x))
    dev = float(np.max(np.linalg.norm(np.asarray(minf.apply(mx)) - mx, axis=0) / xn))
    for t in range(horizon):
        for op in schedule.ops_for_slot(t):
            left = np.asarray(minf.apply(op.apply(x)))
            right = np.asarray(op.apply(mx))
            dev = max(dev, float(np.max(np.linalg.norm(left - mx, axis=0) / xn)))
            dev = max(dev, float(np.max(np.linalg.norm(right - mx, axis=0) / xn)))
    return dev <= tol


def verify_scale_bound(
    schedule,
    horizon: int = 64,
    probes: int = 32,
    *,
    seed: int = 0,
) -> float:
    """Largest window-product gain ``|prod M_k X| / |X|`` over [0, horizon].

    At desk scale the gain is taken over all directions (operator norm of
    the running product); larger states fall back to probe columns plus
    per-block indicator states, which catch the copy-operator worst case.
    The empty window makes the result at least 1.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    n = schedule.size
    step = max(1, horizon // 8)
    starts = range(0, horizon, step)
    xi = 1.0
    if n <= DENSE_CAP:
        eye = np.eye(n)
        for s in starts:
            cur = eye.copy()
            v = None
            best_here = 1.0
            argmax = None
            for t in range(s, horizon):
                ops = schedule.ops_for_slot(t)
                if not ops:
                    continue
                for op in ops:
                    cur = np.asarray(op.apply(cur))
                if n <= 64:
                    sigma = float(np.linalg.norm(cur, 2))
                else:
                    sigma, v = _power_sigma(cur, v, iters=8)
                if sigma > best_here:
                    best_here = sigma
                    argmax = cur.copy() if n > 64 else None
            if argmax is not None:
                best_here = max(1.0, float(np.linalg.norm(argmax, 2)))
            xi = max(xi, best_here)
        return xi

    rng = np.random.default_rng(seed)
    cols = rng.standard_normal((n, probes))
    blocks = np.zeros((n, schedule.n_blocks))
    d = schedule.block_dim
    for b in range(schedule.n_blocks):
        blocks[b * d : (b + 1) * d, b] = 1.0
    x0 = np.concatenate([cols, blocks], axis=1)
    x0 /= np.linalg.norm(x0, axis=0)
    for s in starts:
        cur = x0.copy()
        for t in range(s, horizon):
            ops = schedule.ops_for_slot(t)
            if not ops:
                continue
            for op in ops:
                cur = np.asarray(op.apply(cur))
            xi = max(xi, float(np.max(np.linalg.norm(cur, axis=0))))
    return xi


def verify_lemma1(
    schedule,
    minf: LinearOperator,
    tmix_hat: int,
    xi_hat: float,
    probes: int = 64,
    windows: int = 32,
    *,
    horizon: int | None = None,
    seed: int = 0,
) -> list[tuple[int, int, float]]:
    """Direct check of the consensus-contraction bound on sampled windows.

    For each sampled window [s, s+L) and unit probe X, tests
    ``|prod M_k X - Minf X| <= 2^{-floor(L / tmix_hat)} (1 + xi) xi |X|``.
    Returns (start, probe id, LHS/RHS) for every violation; empty on pass.
    Randomized schedules draw lengths below 2 * tmix_hat, where the quenched
    per-start halving certificate from ``estimate_tmix`` applies; anything
    longer would quantify over unboundedly unlikely event sequences.
    """
    if tmix_hat < 1:
        raise ValueError("tmix_hat must be at least 1")
    randomized = schedule.spec.kind in RANDOMIZED_KINDS
    if horizon is None:
        horizon = max(2 * (schedule.period or 1), 8)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((minf.size, probes))
    x /= np.linalg.norm(x, axis=0)
    mx = np.asarray(minf.apply(x))
    const = (1.0 + xi_hat) * xi_hat
    max_len = (2 * tmix_hat - 1) if randomized else 3 * tmix_hat
    lens = rng.integers(0, max_len + 1, size=windows)
    lens[0] = 0  # always include the empty window
    if windows > 1:
        lens[1] = max_len
    starts_arr = rng.integers(0, horizon, size=windows)
    out: list[tuple[int, int, float]] = []
    for s, length in zip(starts_arr.tolist(), lens.tolist()):
        cur = x.copy()
        for t in range(s, s + length):
            for op in schedule.ops_for_slot(t):
                cur = np.asarray(op.apply(cur))
        lhs = np.linalg.norm(cur - mx, axis=0)
        rhs = 2.0 ** (-(length // tmix_hat)) * const
        for pid in np.nonzero(lhs > rhs * (1 + 1e-9))[0]:
            out.append((int(s), int(pid), float(lhs[pid] / rhs)))
    return out
