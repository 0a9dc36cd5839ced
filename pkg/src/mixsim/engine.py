"""Event-loop simulator: computation steps interleaved with communication.

One run is a single-threaded walk over integer slots. At slot t the acting
worker reads its local view, one stochastic update is accumulated into the
write block, and the slot's communication operator (if any) fires. Three
moment recursions advance side by side: the applied one fed with noisy
gradients at local views, and two shadow recursions fed with exact gradients
at the consensus state and at the local view. The shadow pair is what the
bound checks integrate; simulating it costs two extra gradient evaluations
per step and is the only unbiased way to get at those sequences.

The inner kernels (moment update, communication op on the flat state) live in
a backend module: `_engine_py` always, `_core` when the compiled extension is
built. Select with MIXSIM_BACKEND=python|compiled, default auto.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _engine_py
from .errors import ConfigError
from .objectives import GradientOracle, make_objective, stoch_grad
from .optimizers import SamConfig, StepSchedule, optimizer_config
from .protocols import EventSchedule, ProtocolSpec, make_protocol

TRACE_COLUMNS = (
    "t",
    "alpha",
    "f",
    "grad_sq",
    "stat_dist",
    "view_gap_sq",
    "delta_gap_sq",
    "worker",
)


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _core  # noqa: F401

        names.append("compiled")
    except ImportError:
        pass
    return names


def get_backend(name: str | None = None):
    """Resolve a kernel module by name, honoring MIXSIM_BACKEND when unset."""
    if name is None:
        name = os.environ.get("MIXSIM_BACKEND", "auto")
    if name in ("", "auto"):
        try:
            from . import _core

            return _core
        except ImportError:
            return _engine_py
    if name == "python":
        return _engine_py
    if name == "compiled":
        try:
            from . import _core

            return _core
        except ImportError:
            raise ConfigError(
                "MIXSIM_BACKEND=compiled but the extension is not built; "
                "reinstall the package or set MIXSIM_BACKEND=python"
            )
    raise ConfigError(f"unknown backend {name!r}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything a run needs. The run seed drives noise, the random-x0 draw,
    and (added to the protocol's own seed) any protocol randomness; every
    other field is part of the config hash, so traces that differ only by
    seed can be averaged together.
    """

    protocol: ProtocolSpec
    schedule: StepSchedule
    T: int
    objective: str = "quadratic"
    objective_seed: int = 0
    terms: int | None = None
    optimizer: str = "sgd"
    optimizer_params: dict = field(default_factory=dict)
    sigma: float = 0.0
    noise_mode: str = "gaussian"
    batch_size: int = 1
    clip_sigmas: float = 8.0
    seed: int = 0
    x0_policy: str = "zeros"
    x0: np.ndarray | None = None
    metric_cadence: int = 1

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError("T must be at least 1")
        if self.metric_cadence < 1:
            raise ConfigError("metric_cadence must be at least 1")
        if self.x0_policy not in ("zeros", "random"):
            raise ConfigError(f"unknown x0 policy {self.x0_policy!r}")
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=np.float64)
            if not np.all(np.isfinite(self.x0)):
                raise ConfigError("explicit x0 must be finite")

    def sam_config(self) -> SamConfig:
        return optimizer_config(self.optimizer, **self.optimizer_params)

    def build_objective(self):
        return make_objective(
            self.objective, self.protocol.d, seed=self.objective_seed, terms=self.terms
        )

    def build_oracle(self, objective=None) -> GradientOracle:
        return GradientOracle(
            objective if objective is not None else self.build_objective(),
            sigma=self.sigma,
            mode=self.noise_mode,
            batch_size=self.batch_size,
            clip_sigmas=self.clip_sigmas,
        )


def config_hash(config: RunConfig) -> str:
    """sha256 over the canonical config dict, excluding the run seed."""
    payload = {
        "protocol": config.protocol.describe(),
        "schedule": _schedule_dict(config.schedule),
        "T": config.T,
        "objective": config.objective,
        "objective_seed": config.objective_seed,
        "terms": config.terms,
        "optimizer": config.optimizer,
        "optimizer_params": dict(sorted(config.optimizer_params.items())),
        "sigma": config.sigma,
        "noise_mode": config.noise_mode,
        "batch_size": config.batch_size,
        "clip_sigmas": config.clip_sigmas,
        "x0_policy": config.x0_policy,
        "x0": None if config.x0 is None else config.x0.tolist(),
        "metric_cadence": config.metric_cadence,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _schedule_dict(schedule: StepSchedule) -> dict:
    out = asdict(schedule)
    out["table"] = list(out["table"])
    return out


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------


@dataclass
class Trace:
    """Recorded metrics, one row per sampled step, plus a terminal summary."""

    t: np.ndarray
    alpha: np.ndarray
    f: np.ndarray
    grad_sq: np.ndarray
    stat_dist: np.ndarray
    view_gap_sq: np.ndarray
    delta_gap_sq: np.ndarray
    worker: np.ndarray
    summary: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""
    backend: str = "python"

    def __len__(self) -> int:
        return len(self.t)

    def column(self, name: str) -> np.ndarray:
        if name not in TRACE_COLUMNS:
            raise KeyError(name)
        return getattr(self, name)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for i in range(len(self.t)):
                writer.writerow(
                    [
                        int(self.t[i]),
                        repr(float(self.alpha[i])),
                        repr(float(self.f[i])),
                        repr(float(self.grad_sq[i])),
                        repr(float(self.stat_dist[i])),
                        repr(float(self.view_gap_sq[i])),
                        repr(float(self.delta_gap_sq[i])),
                        int(self.worker[i]),
                    ]
                )

    @classmethod
    def from_csv(cls, path: str) -> "Trace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != TRACE_COLUMNS:
                raise ConfigError(f"{path}: bad trace header {header!r}")
            cols: list[list[float]] = [[] for _ in TRACE_COLUMNS]
            for row in reader:
                if len(row) != len(TRACE_COLUMNS):
                    raise ConfigError(f"{path}: ragged row {row!r}")
                for c, cell in enumerate(row):
                    cols[c].append(float(cell))
        arrays = [np.asarray(c, dtype=np.float64) for c in cols]
        return cls(
            t=arrays[0].astype(np.int64),
            alpha=arrays[1],
            f=arrays[2],
            grad_sq=arrays[3],
            stat_dist=arrays[4],
            view_gap_sq=arrays[5],
            delta_gap_sq=arrays[6],
            worker=arrays[7].astype(np.int64),
        )


# ---------------------------------------------------------------------------
# state geometry helpers
# ---------------------------------------------------------------------------


def consensus_state(x: np.ndarray, minf, pi_star=None) -> np.ndarray:
    """Representative block (block 0, or pi_star's block) of the projected
    state: the iterate the sequential view of the algorithm moves."""
    y = minf.apply(np.asarray(x, dtype=np.float64))
    d = minf.block_dim
    if pi_star is None:
        return y[:d]
    return pi_star.read(y)


def stationary_distance(x: np.ndarray, minf) -> float:
    """Mean squared distance of worker blocks to their own mean. The server
    block, when the layout has one, does not count as a worker."""
    from .state import ServerBroadcastOperator

    d = minf.block_dim
    blocks = np.asarray(x, dtype=np.float64).reshape(minf.n_blocks, d)
    if isinstance(minf, ServerBroadcastOperator):
        blocks = blocks[:-1]
    center = blocks.mean(axis=0)
    return float(np.mean(np.sum((blocks - center) ** 2, axis=1)))


def _worker_spread(blocks: np.ndarray, n_workers: int) -> float:
    workers = blocks[:n_workers]
    center = workers.mean(axis=0)
    return float(np.mean(np.sum((workers - center) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# the run loop
# ---------------------------------------------------------------------------


def _initial_state(config: RunConfig, sched: EventSchedule, rng) -> np.ndarray:
    nb, d = sched.n_blocks, sched.block_dim
    if config.x0 is not None:
        if config.x0.shape == (d,):
            return np.tile(config.x0, nb)
        if config.x0.shape == (nb * d,):
            return config.x0.copy()
        raise ConfigError(
            f"x0 must have shape ({d},) or ({nb * d},), got {config.x0.shape}"
        )
    if config.x0_policy == "random":
        return np.tile(rng.standard_normal(d), nb)
    return np.zeros(nb * d)


def run(config: RunConfig, *, backend: str | None = None, on_step=None) -> Trace:
    """Simulate one run and return its trace.

    ``on_step``, when given, is called once per step with a dict of the
    step's internals (vectors are copies); tests use it to check the update
    decomposition without bloating the trace itself.
    """
    kernels = get_backend(backend)
    sched = make_protocol(config.protocol)
    if sched.randomized and config.seed != 0:
        sched = sched.with_seed(config.protocol.seed + config.seed)
    objective = config.build_objective()
    oracle = config.build_oracle(objective)
    sam = config.sam_config()
    p, b1, b2 = sam.p, sam.beta1, sam.beta2

    nb, d = sched.n_blocks, sched.block_dim
    n_workers = sched.n_workers
    has_server = config.protocol.has_server
    gain = sched.write_gain
    gamma = sched.gamma
    weights = sched.weights
    partitions = sched.partitions

    rng = np.random.default_rng(config.seed)
    X = _initial_state(config, sched, rng)
    blocks = X.reshape(nb, d)

    m_a = np.zeros(d)
    v_a = np.full(d, sam.c)
    m_x = np.zeros(d)
    v_x = np.full(d, sam.c)
    m_u = np.zeros(d)
    v_u = np.full(d, sam.c)

    T = config.T
    cadence = config.metric_cadence
    alphas = np.array([config.schedule.alpha(t) for t in range(T)])
    acting = np.array([sched.acting_worker(t) for t in range(T)], dtype=np.int64)
    codes = np.array([sched.slot_code(t) for t in range(T)], dtype=np.int64)
    write_block = (
        np.full(T, nb - 1, dtype=np.int64) if has_server else acting
    )

    n_rows = len(range(0, T, cadence))
    col_t = np.zeros(n_rows, dtype=np.int64)
    col_alpha = np.zeros(n_rows)
    col_f = np.zeros(n_rows)
    col_gsq = np.zeros(n_rows)
    col_sd = np.zeros(n_rows)
    col_vg = np.zeros(n_rows)
    col_dg = np.zeros(n_rows)
    col_w = np.zeros(n_rows, dtype=np.int64)

    row = 0
    diverged_at: int | None = None
    f_x0: float | None = None

    for t in range(T):
        act = int(acting[t])
        u = blocks[act]
        if has_server:
            xbar = blocks[nb - 1]
        else:
            xbar = blocks.mean(axis=0)

        f_t = objective.value(xbar)
        grad_x = objective.grad(xbar)
        grad_u = objective.grad(u)
        delta_x = kernels.sam_update(m_x, v_x, grad_x, p, b1, b2)
        delta_u = kernels.sam_update(m_u, v_u, grad_u, p, b1, b2)
        g = stoch_grad(oracle, u, rng)
        delta_a = kernels.sam_update(m_a, v_a, g, p, b1, b2)
        alpha = float(alphas[t])

        gsq = float(grad_x @ grad_x)
        if not (
            math.isfinite(f_t)
            and math.isfinite(gsq)
            and np.all(np.isfinite(delta_a))
        ):
            diverged_at = t
            break
        if t == 0:
            f_x0 = f_t

        if t % cadence == 0:
            sd = _worker_spread(blocks, n_workers)
            gap = xbar - u
            vg = float(gap @ gap)
            dgap = delta_x - delta_u
            dg = float(dgap @ dgap)
            if not (math.isfinite(sd) and math.isfinite(vg) and math.isfinite(dg)):
                diverged_at = t
                break
            col_t[row] = t
            col_alpha[row] = alpha
            col_f[row] = f_t
            col_gsq[row] = gsq
            col_sd[row] = sd
            col_vg[row] = vg
            col_dg[row] = dg
            row += 1

        if on_step is not None:
            on_step(
                {
                    "t": t,
                    "alpha": alpha,
                    "worker": act,
                    "u": u.copy(),
                    "xbar": xbar.copy(),
                    "g": g.copy(),
                    "delta_applied": delta_a.copy(),
                    "delta_x": delta_x.copy(),
                    "delta_u": delta_u.copy(),
                }
            )

        blocks[int(write_block[t])] += (-alpha * gain) * delta_a
        kernels.apply_slot(
            X, nb, d, int(codes[t, 0]), int(codes[t, 1]), int(codes[t, 2]), gamma, weights, partitions
        )
        if not np.all(np.isfinite(blocks[int(write_block[t])])):
            diverged_at = t
            break

    col_t = col_t[:row]
    col_alpha = col_alpha[:row]
    col_f = col_f[:row]
    col_gsq = col_gsq[:row]
    col_sd = col_sd[:row]
    col_vg = col_vg[:row]
    col_dg = col_dg[:row]
    col_w = acting[col_t] if row else col_w[:0]

    if has_server:
        xbar_T = blocks[nb - 1]
    else:
        xbar_T = blocks.mean(axis=0)
    f_xT = objective.value(xbar_T) if diverged_at is None else float("nan")

    summary = {
        "f_x0": f_x0,
        "f_xT": None if diverged_at is not None else float(f_xT),
        "grad_sq_min": float(col_gsq.min()) if row else None,
        "grad_sq_mean": float(col_gsq.mean()) if row else None,
        "grad_sq_final": float(col_gsq[-1]) if row else None,
        # time average over the last quarter of recorded rows; the single
        # final row can alias with periodic protocols, this does not
        "grad_sq_tail": float(col_gsq[-max(1, row // 4):].mean()) if row else None,
        "steps_completed": int(diverged_at if diverged_at is not None else T),
        "T": T,
        "diverged": diverged_at is not None,
        "diverged_at": diverged_at,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "backend": kernels.BACKEND_NAME,
        "protocol": config.protocol.describe(),
        "optimizer": config.optimizer,
        "objective": config.objective,
        "sigma": config.sigma,
    }
    if diverged_at is not None:
        summary["divergence_note"] = (
            f"non-finite value at step {diverged_at}; check the step size "
            "against the smoothness constant"
        )

    return Trace(
        t=col_t,
        alpha=col_alpha,
        f=col_f,
        grad_sq=col_gsq,
        stat_dist=col_sd,
        view_gap_sq=col_vg,
        delta_gap_sq=col_dg,
        worker=col_w,
        summary=summary,
        seed=config.seed,
        config_hash=summary["config_hash"],
        backend=kernels.BACKEND_NAME,
    )


def sequential_run(config: RunConfig, *, backend: str | None = None) -> Trace:
    """Reference implementation: one worker, no blocks, no communication.

    Consumes randomness in the same order as :func:`run`, so a Perfect-
    protocol parallel run and this loop see identical noise draws.
    """
    kernels = get_backend(backend)
    objective = config.build_objective()
    oracle = config.build_oracle(objective)
    sam = config.sam_config()
    p, b1, b2 = sam.p, sam.beta1, sam.beta2
    d = config.protocol.d

    rng = np.random.default_rng(config.seed)
    if config.x0 is not None:
        if config.x0.shape != (d,):
            raise ConfigError("sequential reference needs x0 of shape (d,)")
        x = config.x0.copy()
    elif config.x0_policy == "random":
        x = rng.standard_normal(d)
    else:
        x = np.zeros(d)

    m_a = np.zeros(d)
    v_a = np.full(d, sam.c)

    T = config.T
    cadence = config.metric_cadence
    n_rows = len(range(0, T, cadence))
    col_t = np.zeros(n_rows, dtype=np.int64)
    col_alpha = np.zeros(n_rows)
    col_f = np.zeros(n_rows)
    col_gsq = np.zeros(n_rows)
    zeros = np.zeros(n_rows)

    row = 0
    diverged_at: int | None = None
    f_x0: float | None = None
    for t in range(T):
        alpha = config.schedule.alpha(t)
        f_t = objective.value(x)
        grad_x = objective.grad(x)
        g = stoch_grad(oracle, x, rng)
        delta_a = kernels.sam_update(m_a, v_a, g, p, b1, b2)
        if not (math.isfinite(f_t) and np.all(np.isfinite(delta_a))):
            diverged_at = t
            break
        if t == 0:
            f_x0 = f_t
        if t % cadence == 0:
            col_t[row] = t
            col_alpha[row] = alpha
            col_f[row] = f_t
            col_gsq[row] = float(grad_x @ grad_x)
            row += 1
        x -= alpha * delta_a

    f_xT = objective.value(x) if diverged_at is None else float("nan")
    summary = {
        "f_x0": f_x0,
        "f_xT": None if diverged_at is not None else float(f_xT),
        "grad_sq_min": float(col_gsq[:row].min()) if row else None,
        "grad_sq_mean": float(col_gsq[:row].mean()) if row else None,
        "grad_sq_final": float(col_gsq[row - 1]) if row else None,
        "grad_sq_tail": float(col_gsq[max(0, row - max(1, row // 4)):row].mean()) if row else None,
        "steps_completed": int(diverged_at if diverged_at is not None else T),
        "T": T,
        "diverged": diverged_at is not None,
        "diverged_at": diverged_at,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "backend": kernels.BACKEND_NAME,
        "optimizer": config.optimizer,
        "objective": config.objective,
        "sigma": config.sigma,
        "sequential": True,
    }
    return Trace(
        t=col_t[:row],
        alpha=col_alpha[:row],
        f=col_f[:row],
        grad_sq=col_gsq[:row],
        stat_dist=zeros[:row],
        view_gap_sq=zeros[:row],
        delta_gap_sq=zeros[:row],
        worker=np.zeros(row, dtype=np.int64),
        summary=summary,
        seed=config.seed,
        config_hash=summary["config_hash"],
        backend=kernels.BACKEND_NAME,
    )
