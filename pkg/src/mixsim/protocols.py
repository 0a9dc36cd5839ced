"""Communication protocols as deterministic event schedules.

A protocol turns discrete time into a stream of communication operators: at
integer slot t a worker computes and writes, then the slot's operator (if any)
reshuffles the external state. Everything here is replayable: randomized
protocols derive their draws from counter-based RNG chunks, so slot t always
sees the same draw for a given (spec, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ProtocolError
from .state import (
    AverageOperator,
    BlockProjection,
    CopyBlockOperator,
    EdgeAverageOperator,
    GossipOperator,
    LinearOperator,
    PartitionAverageOperator,
    ServerBroadcastOperator,
)

KINDS = (
    "perfect",
    "allreduce",
    "local_step",
    "sync_gossip",
    "async_gossip",
    "async_ps",
    "slack_average",
    "sparsified",
    "no_comm",
)

RANDOMIZED_KINDS = ("async_gossip", "async_ps")

# slot opcodes, shared with the engine backends
OP_NONE = 0
OP_AVG = 1
OP_SLACK = 2
OP_GOSSIP = 3
OP_EDGE = 4
OP_COPY = 5
OP_PART = 6

_CHUNK = 4096


def halving_count(rho: float) -> int:
    """Applications of a linear map with contraction factor rho needed to
    halve a norm: smallest k >= 1 with rho^k <= 1/2.

    The 1e-9 shaves float noise at exact-integer boundaries (rho = 0.5 must
    give 1). rho = 0 collapses in one application by convention.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"contraction factor must lie in [0, 1), got {rho}")
    if rho == 0.0:
        return 1
    return max(1, math.ceil(math.log(2.0) / math.log(1.0 / rho) - 1e-9))


# ---------------------------------------------------------------------------
# topologies
# ---------------------------------------------------------------------------


class Topology:
    """Undirected gossip graph with a symmetric doubly stochastic matrix."""

    def __init__(self, name: str, weights: np.ndarray):
        weights = np.asarray(weights, dtype=np.float64)
        n = weights.shape[0]
        if weights.shape != (n, n):
            raise ValueError("weights must be square")
        if np.any(weights < -1e-12):
            raise ValueError("weights must be nonnegative")
        if not np.allclose(weights, weights.T, atol=1e-12):
            raise ValueError("weights must be symmetric")
        if not np.allclose(weights.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("rows must sum to 1")
        self.name = name
        self.weights = weights
        self._slem: float | None = None

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def adjacency(self) -> np.ndarray:
        off = self.weights - np.diag(np.diag(self.weights))
        return (off > 1e-12).astype(np.int8)

    @property
    def slem(self) -> float:
        """Second-largest eigenvalue modulus (one Perron eigenvalue removed)."""
        if self._slem is None:
            eig = np.linalg.eigvalsh(self.weights)
            top = int(np.argmax(eig))
            rest = np.delete(eig, top)
            self._slem = float(np.max(np.abs(rest))) if rest.size else 0.0
            # squash negative-zero noise from eigvalsh
            if self._slem < 1e-12:
                self._slem = 0.0
        return self._slem

    @property
    def spectral_gap(self) -> float:
        return 1.0 - self.slem

    def edges(self) -> list[tuple[int, int]]:
        adj = self.adjacency
        return [(i, j) for i in range(self.n) for j in range(i + 1, self.n) if adj[i, j]]


def ring_topology(n: int) -> Topology:
    """Ring with self-weight 1/2 and 1/4 per neighbor (n=2 degenerates to the
    complete graph)."""
    if n < 2:
        raise ValueError("ring needs n >= 2")
    c = np.roll(np.eye(n), 1, axis=1)
    return Topology("ring", np.eye(n) / 2 + (c + c.T) / 4)


def complete_topology(n: int) -> Topology:
    if n < 2:
        raise ValueError("complete graph needs n >= 2")
    return Topology("complete", np.full((n, n), 1.0 / n))


def metropolis_topology(adjacency: np.ndarray) -> Topology:
    """Metropolis-Hastings weights for an arbitrary undirected graph."""
    adj = np.asarray(adjacency)
    n = adj.shape[0]
    if adj.shape != (n, n) or not np.array_equal(adj, adj.T):
        raise ValueError("adjacency must be square and symmetric")
    deg = adj.sum(axis=1)
    w = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j and adj[i, j]:
                w[i, j] = 1.0 / (1.0 + max(deg[i], deg[j]))
        w[i, i] = 1.0 - w[i].sum()
    return Topology("metropolis", w)


def topology_by_name(name: str, n: int) -> Topology:
    if name == "ring":
        return ring_topology(n)
    if name == "complete":
        return complete_topology(n)
    raise ProtocolError(f"unknown topology {name!r} (ring, complete)")


# ---------------------------------------------------------------------------
# protocol description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolSpec:
    """Declarative description of one communication protocol.

    Fields beyond (kind, n, d, seed) only apply to the kinds that read them:
    m for local_step, gamma for slack_average, eta/inner for sparsified,
    topology/comm_period for the gossip kinds, delay for async_ps pulls.
    """

    kind: str
    n: int
    d: int
    seed: int = 0
    m: int = 1
    gamma: float = 1.0
    eta: float = 1.0
    inner: "ProtocolSpec | None" = None
    topology: str = "ring"
    comm_period: int = 1
    delay: int = 0

    @property
    def has_server(self) -> bool:
        return self.kind == "async_ps"

    @property
    def n_blocks(self) -> int:
        return self.n + 1 if self.has_server else self.n

    @property
    def declared_xi(self) -> float:
        """Norm bound on operator products: 1 for doubly stochastic families,
        sqrt(n+1) for server copies (a copy chain can stack every worker's
        mass onto the server's value)."""
        if self.kind == "async_ps":
            return math.sqrt(self.n + 1.0)
        return 1.0

    def describe(self) -> dict:
        out = {"kind": self.kind, "n": self.n, "d": self.d, "seed": self.seed}
        if self.kind == "local_step":
            out["m"] = self.m
        if self.kind == "slack_average":
            out["gamma"] = self.gamma
        if self.kind == "sparsified":
            out["eta"] = self.eta
            out["inner"] = self.inner.describe() if self.inner else None
        if self.kind in ("sync_gossip", "async_gossip"):
            out["topology"] = self.topology
        if self.kind == "sync_gossip":
            out["comm_period"] = self.comm_period
        if self.kind == "async_ps":
            out["delay"] = self.delay
        return out


def _validated(spec: ProtocolSpec) -> ProtocolSpec:
    if spec.kind not in KINDS:
        raise ProtocolError(f"unknown protocol kind {spec.kind!r}")
    if spec.n < 2:
        raise ProtocolError(f"need n >= 2 workers, got {spec.n}")
    if spec.d < 1:
        raise ProtocolError(f"need d >= 1, got {spec.d}")
    if spec.seed < 0:
        raise ProtocolError("seed must be nonnegative")
    if spec.kind == "local_step" and spec.m < 1:
        raise ProtocolError(f"local_step multiplier must be >= 1, got {spec.m}")
    if spec.kind == "slack_average" and not 0.0 < spec.gamma <= 1.0:
        raise ProtocolError(f"gamma must lie in (0, 1], got {spec.gamma}")
    if spec.kind == "sync_gossip" and spec.comm_period < 1:
        raise ProtocolError("comm_period must be >= 1")
    if spec.kind == "async_ps" and spec.delay < 0:
        raise ProtocolError("pull delay must be >= 0")
    if spec.kind == "sparsified":
        if not 0.0 < spec.eta <= 1.0:
            raise ProtocolError(f"eta must lie in (0, 1], got {spec.eta}")
        inner = spec.inner
        if isinstance(inner, str):
            inner = ProtocolSpec(kind=inner, n=spec.n, d=spec.d, seed=spec.seed, m=spec.m)
        if inner is None or inner.kind not in ("allreduce", "local_step"):
            got = getattr(inner, "kind", None)
            raise ProtocolError(
                f"sparsified requires an averaging inner protocol "
                f"(allreduce or local_step), got {got!r}"
            )
        if (inner.n, inner.d) != (spec.n, spec.d):
            raise ProtocolError("sparsified inner protocol must share n and d")
        parts = math.ceil(1.0 / spec.eta)
        if parts > spec.d:
            raise ProtocolError(
                f"eta={spec.eta} needs {parts} coordinate partitions but d={spec.d}"
            )
        spec = replace(spec, inner=_validated(inner))
    return spec


def theoretical_tmix(spec: ProtocolSpec) -> int | None:
    """Slot-count mixing time where theory pins one down; None for the
    randomized kinds and no_comm (empirical only)."""
    spec = _validated(spec)
    if spec.kind == "perfect":
        return 1
    if spec.kind == "allreduce":
        return spec.n
    if spec.kind == "local_step":
        return spec.m * spec.n
    if spec.kind == "slack_average":
        return spec.n * halving_count(1.0 - spec.gamma)
    if spec.kind == "sync_gossip":
        topo = topology_by_name(spec.topology, spec.n)
        if topo.slem == 0.0:
            return spec.comm_period * spec.n
        return spec.comm_period * spec.n * halving_count(topo.slem)
    if spec.kind == "sparsified":
        parts = math.ceil(1.0 / spec.eta)
        inner_val = theoretical_tmix(spec.inner)
        return parts * inner_val
    return None


def consensus_operator(spec: ProtocolSpec) -> LinearOperator:
    """The protocol's agreement map: uniform block average for replicated
    kinds, server broadcast for the parameter server."""
    spec = _validated(spec)
    if spec.kind == "no_comm":
        raise ProtocolError(
            "no consensus operator exists for no_comm: the protocol never "
            "contracts toward agreement"
        )
    if spec.kind == "async_ps":
        return ServerBroadcastOperator(spec.n_blocks, spec.d)
    return AverageOperator(spec.n_blocks, spec.d, gamma=1.0)


# ---------------------------------------------------------------------------
# event schedule
# ---------------------------------------------------------------------------


class EventSchedule:
    """Materialized protocol: per-slot acting worker, projections, operator.

    Slot t carries at most one operator, applied after the computation event
    at time t. Randomized kinds (async_gossip, async_ps) read their draws from
    seeded chunks keyed by slot index, so access is random-access and replay
    is exact.
    """

    def __init__(self, spec: ProtocolSpec):
        spec = _validated(spec)
        self.spec = spec
        self.n_workers = spec.n
        self.n_blocks = spec.n_blocks
        self.block_dim = spec.d
        self.size = self.n_blocks * self.block_dim
        self.randomized = spec.kind in RANDOMIZED_KINDS
        self.declared_xi = spec.declared_xi
        # Write gain: a worker's accumulated update must move the consensus
        # view by exactly -alpha * delta. Under block averaging a single-block
        # write is diluted by n, so replicated kinds scale writes up by n; the
        # server block IS the consensus view, so server writes are unscaled.
        self.write_gain = 1.0 if spec.kind == "async_ps" else float(spec.n)
        self._cache: dict[tuple[int, int], np.ndarray] = {}

        self._gamma = spec.gamma
        self._weights: np.ndarray | None = None
        self._edges: list[tuple[int, int]] | None = None
        self._partitions: list[np.ndarray] | None = None
        self._cadence = None  # slots between averaging events, sync kinds

        kind = spec.kind
        if kind == "perfect":
            self.period = 1
        elif kind == "no_comm":
            self.period = 1
        elif kind == "allreduce":
            self.period = spec.n
            self._cadence = spec.n
        elif kind == "local_step":
            self.period = spec.m * spec.n
            self._cadence = spec.m * spec.n
        elif kind == "slack_average":
            self.period = spec.n
            self._cadence = spec.n
        elif kind == "sync_gossip":
            topo = topology_by_name(spec.topology, spec.n)
            self.topology = topo
            self._weights = topo.weights
            self.period = spec.comm_period * spec.n
            self._cadence = self.period
        elif kind == "sparsified":
            inner = spec.inner
            self._cadence = inner.n if inner.kind == "allreduce" else inner.m * inner.n
            self._n_parts = math.ceil(1.0 / spec.eta)
            self._partitions = [
                np.arange(j, spec.d, self._n_parts, dtype=np.intp)
                for j in range(self._n_parts)
            ]
            self.period = self._cadence * self._n_parts
        elif kind == "async_gossip":
            topo = topology_by_name(spec.topology, spec.n)
            self.topology = topo
            self._edges = topo.edges()
            self.period = None
        elif kind == "async_ps":
            self.period = None
        else:  # pragma: no cover - KINDS is closed
            raise ProtocolError(kind)

    # -- randomness ---------------------------------------------------------

    def _draw(self, stream: int, t: int, high: int) -> int:
        """Counter-based uniform draw in [0, high) for slot t."""
        chunk_id, offset = divmod(t, _CHUNK)
        key = (stream, chunk_id)
        chunk = self._cache.get(key)
        if chunk is None:
            rng = np.random.default_rng((self.spec.seed, stream, chunk_id))
            chunk = rng.integers(0, high, size=_CHUNK, dtype=np.int64)
            self._cache[key] = chunk
        return int(chunk[offset])

    def with_seed(self, seed: int) -> "EventSchedule":
        return EventSchedule(replace(self.spec, seed=seed))

    # -- per-slot structure --------------------------------------------------

    def acting_worker(self, t: int) -> int:
        if t < 0:
            raise ValueError("slots start at 0")
        if self.randomized:
            return self._draw(0, t, self.n_workers)
        return t % self.n_workers

    def read_proj(self, t: int) -> BlockProjection:
        return BlockProjection(self.acting_worker(t), self.n_blocks, self.block_dim)

    def write_proj(self, t: int) -> BlockProjection:
        if self.spec.kind == "async_ps":
            return BlockProjection(self.n_blocks - 1, self.n_blocks, self.block_dim)
        return self.read_proj(t)

    def slot_code(self, t: int) -> tuple[int, int, int]:
        """(opcode, arg_a, arg_b) for the operator applied after event t."""
        if t < 0:
            raise ValueError("slots start at 0")
        kind = self.spec.kind
        if kind == "perfect":
            return (OP_AVG, 0, 0)
        if kind == "no_comm":
            return (OP_NONE, 0, 0)
        if kind in ("allreduce", "local_step"):
            if (t + 1) % self._cadence == 0:
                return (OP_AVG, 0, 0)
            return (OP_NONE, 0, 0)
        if kind == "slack_average":
            if (t + 1) % self._cadence == 0:
                return (OP_SLACK, 0, 0)
            return (OP_NONE, 0, 0)
        if kind == "sync_gossip":
            if (t + 1) % self._cadence == 0:
                return (OP_GOSSIP, 0, 0)
            return (OP_NONE, 0, 0)
        if kind == "sparsified":
            if (t + 1) % self._cadence == 0:
                event_index = (t + 1) // self._cadence - 1
                return (OP_PART, event_index % self._n_parts, 0)
            return (OP_NONE, 0, 0)
        if kind == "async_gossip":
            i, j = self._edges[self._draw(1, t, len(self._edges))]
            return (OP_EDGE, i, j)
        # async_ps: ship the server state to the worker computing at
        # t + 1 + delay, so its view misses exactly `delay` later writes
        target = self.acting_worker(t + 1 + self.spec.delay)
        return (OP_COPY, self.n_blocks - 1, target)

    def op_from_code(self, code: tuple[int, int, int]) -> LinearOperator | None:
        opcode, a, b = code
        if opcode == OP_NONE:
            return None
        if opcode == OP_AVG:
            return AverageOperator(self.n_blocks, self.block_dim, gamma=1.0)
        if opcode == OP_SLACK:
            return AverageOperator(self.n_blocks, self.block_dim, gamma=self._gamma)
        if opcode == OP_GOSSIP:
            return GossipOperator(self._weights, self.block_dim)
        if opcode == OP_EDGE:
            return EdgeAverageOperator(a, b, self.n_blocks, self.block_dim)
        if opcode == OP_COPY:
            return CopyBlockOperator(a, b, self.n_blocks, self.block_dim)
        if opcode == OP_PART:
            return PartitionAverageOperator(
                self._partitions[a], self.n_blocks, self.block_dim
            )
        raise ProtocolError(f"bad opcode {opcode}")

    def ops_for_slot(self, t: int) -> list[LinearOperator]:
        op = self.op_from_code(self.slot_code(t))
        return [] if op is None else [op]

    # Kernel-facing views of the operator parameters, so the engine's step
    # loop can apply opcodes on flat arrays without rebuilding operators.
    @property
    def gamma(self) -> float:
        return self._gamma

    @property
    def weights(self) -> np.ndarray | None:
        return self._weights

    @property
    def partitions(self) -> list[np.ndarray] | None:
        return self._partitions

    def consensus_operator(self) -> LinearOperator:
        return consensus_operator(self.spec)

    def theoretical_tmix(self) -> int | None:
        return theoretical_tmix(self.spec)


def make_protocol(spec: ProtocolSpec) -> EventSchedule:
    """Validate a spec and build its event schedule."""
    return EventSchedule(spec)
