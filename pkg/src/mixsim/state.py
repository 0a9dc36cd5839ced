"""Block-structured state vectors and the linear operators that act on them.

A system state is a flat float64 array of ``n_blocks * block_dim`` entries,
interpreted as ``n_blocks`` stacked blocks of dimension ``block_dim``. Workers
own one block each; a parameter server owns the extra trailing block.
Communication rounds are linear maps on the flat state, built from the
operator classes below and composed chronologically.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import ProtocolError

# Dense materialization cap: refuse to build N x N matrices past this many
# rows. Everything still works matrix-free above the cap.
DENSE_CAP = 4096


def _as_state(x: np.ndarray, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[0] != n:
        raise ValueError(f"expected shape ({n},) or ({n}, k), got {x.shape}")
    return x


class StateVector:
    """Flat state with block accessors. Thin wrapper over a numpy array."""

    __slots__ = ("data", "n_blocks", "block_dim")

    def __init__(self, data: np.ndarray, n_blocks: int, block_dim: int):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.shape != (n_blocks * block_dim,):
            raise ValueError(
                f"state of {n_blocks} blocks x dim {block_dim} needs shape "
                f"({n_blocks * block_dim},), got {data.shape}"
            )
        self.data = data
        self.n_blocks = n_blocks
        self.block_dim = block_dim

    @classmethod
    def zeros(cls, n_blocks: int, block_dim: int) -> "StateVector":
        return cls(np.zeros(n_blocks * block_dim), n_blocks, block_dim)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def block(self, i: int) -> np.ndarray:
        """View (not copy) of block ``i``."""
        d = self.block_dim
        return self.data[i * d : (i + 1) * d]

    def set_block(self, i: int, value: np.ndarray) -> None:
        self.block(i)[:] = value

    def block_mean(self) -> np.ndarray:
        return self.data.reshape(self.n_blocks, self.block_dim).mean(axis=0)

    def copy(self) -> "StateVector":
        return StateVector(self.data.copy(), self.n_blocks, self.block_dim)


class BlockProjection:
    """Selects one block of the flat state (a d x N selector matrix)."""

    __slots__ = ("block", "n_blocks", "block_dim")

    def __init__(self, block: int, n_blocks: int, block_dim: int):
        if not 0 <= block < n_blocks:
            raise ValueError(f"block {block} out of range [0, {n_blocks})")
        self.block = block
        self.n_blocks = n_blocks
        self.block_dim = block_dim

    @property
    def span(self) -> slice:
        d = self.block_dim
        return slice(self.block * d, (self.block + 1) * d)

    def read(self, x: np.ndarray) -> np.ndarray:
        """Copy of the selected block."""
        return np.array(x[self.span], dtype=np.float64)

    def to_dense(self) -> np.ndarray:
        n = self.n_blocks * self.block_dim
        mat = np.zeros((self.block_dim, n))
        mat[:, self.span] = np.eye(self.block_dim)
        return mat


# ---------------------------------------------------------------------------
# linear operators on flat states
# ---------------------------------------------------------------------------


class LinearOperator:
    """Linear map on flat states, applied to (N,) vectors or (N, k) batches.

    Subclasses implement ``apply`` and ``rmatvec`` (the transpose map, needed
    for operator-norm estimation of non-symmetric windows).
    """

    def __init__(self, n_blocks: int, block_dim: int):
        self.n_blocks = n_blocks
        self.block_dim = block_dim
        self.size = n_blocks * block_dim

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _blocks(self, x: np.ndarray) -> np.ndarray:
        """Reshape (N,[k]) to (n_blocks, block_dim[, k])."""
        if x.ndim == 1:
            return x.reshape(self.n_blocks, self.block_dim)
        return x.reshape(self.n_blocks, self.block_dim, x.shape[1])

    def to_dense(self) -> np.ndarray:
        if self.size > DENSE_CAP:
            raise ProtocolError(
                f"dense materialization refused: size {self.size} exceeds "
                f"cap {DENSE_CAP}; use the matrix-free interface"
            )
        return np.asarray(self.apply(np.eye(self.size)))


class IdentityOperator(LinearOperator):
    def apply(self, x):
        return np.array(_as_state(x, self.size))

    def rmatvec(self, x):
        return np.array(_as_state(x, self.size))


class AverageOperator(LinearOperator):
    """Relaxed uniform block average: (1 - gamma) I + gamma * mean-over-blocks.

    gamma = 1 is the plain synchronized average. Symmetric and doubly
    stochastic in block space for any gamma in [0, 1].
    """

    def __init__(self, n_blocks: int, block_dim: int, gamma: float = 1.0):
        super().__init__(n_blocks, block_dim)
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
        self.gamma = float(gamma)

    def apply(self, x):
        x = _as_state(x, self.size)
        b = self._blocks(x)
        mean = b.mean(axis=0, keepdims=True)
        return ((1.0 - self.gamma) * b + self.gamma * mean).reshape(x.shape)

    rmatvec = apply  # symmetric


class GossipOperator(LinearOperator):
    """Kronecker lift of a (W x W) mixing matrix to block space."""

    def __init__(self, weights: np.ndarray, block_dim: int):
        weights = np.asarray(weights, dtype=np.float64)
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
            raise ValueError(f"weights must be square, got {weights.shape}")
        super().__init__(weights.shape[0], block_dim)
        self.weights = weights

    def apply(self, x):
        x = _as_state(x, self.size)
        b = self._blocks(x)
        return np.tensordot(self.weights, b, axes=(1, 0)).reshape(x.shape)

    def rmatvec(self, x):
        x = _as_state(x, self.size)
        b = self._blocks(x)
        return np.tensordot(self.weights.T, b, axes=(1, 0)).reshape(x.shape)


class EdgeAverageOperator(LinearOperator):
    """Pairwise average of two blocks; identity elsewhere."""

    def __init__(self, i: int, j: int, n_blocks: int, block_dim: int):
        super().__init__(n_blocks, block_dim)
        if i == j or not (0 <= i < n_blocks and 0 <= j < n_blocks):
            raise ValueError(f"invalid edge ({i}, {j}) for {n_blocks} blocks")
        self.i, self.j = int(i), int(j)

    def apply(self, x):
        x = np.array(_as_state(x, self.size))
        b = self._blocks(x)
        mean = 0.5 * (b[self.i] + b[self.j])
        b[self.i] = mean
        b[self.j] = mean
        return x

    rmatvec = apply  # symmetric


class CopyBlockOperator(LinearOperator):
    """Overwrite block ``dst`` with block ``src``; identity elsewhere."""

    def __init__(self, src: int, dst: int, n_blocks: int, block_dim: int):
        super().__init__(n_blocks, block_dim)
        if src == dst or not (0 <= src < n_blocks and 0 <= dst < n_blocks):
            raise ValueError(f"invalid copy ({src} -> {dst})")
        self.src, self.dst = int(src), int(dst)

    def apply(self, x):
        x = np.array(_as_state(x, self.size))
        b = self._blocks(x)
        b[self.dst] = b[self.src]
        return x

    def rmatvec(self, x):
        # Transpose of the copy: src row collects both, dst row zeroes out.
        x = np.array(_as_state(x, self.size))
        b = self._blocks(x)
        b[self.src] = b[self.src] + b[self.dst]
        b[self.dst] = 0.0
        return x


class PartitionAverageOperator(LinearOperator):
    """Average a fixed subset of coordinates across all blocks.

    Coordinates outside ``coords`` pass through untouched, so a cycle over a
    coordinate partition averages the whole space one slice at a time.
    """

    def __init__(self, coords: np.ndarray, n_blocks: int, block_dim: int):
        super().__init__(n_blocks, block_dim)
        coords = np.asarray(coords, dtype=np.intp)
        if coords.size == 0 or coords.min() < 0 or coords.max() >= block_dim:
            raise ValueError(f"coords out of range for block dim {block_dim}")
        if np.unique(coords).size != coords.size:
            raise ValueError("coords must not repeat")
        self.coords = coords

    def apply(self, x):
        x = np.array(_as_state(x, self.size))
        b = self._blocks(x)
        sub = b[:, self.coords]
        b[:, self.coords] = sub.mean(axis=0, keepdims=True)
        return x

    rmatvec = apply  # symmetric


class ServerBroadcastOperator(LinearOperator):
    """Every block becomes a copy of the last (server) block.

    This is the consensus limit of a parameter-server protocol: repeated
    pulls converge to the server view, and writes land on the server first.
    """

    def apply(self, x):
        x = _as_state(x, self.size)
        b = self._blocks(x)
        out = np.broadcast_to(b[-1], b.shape)
        return np.ascontiguousarray(out).reshape(x.shape)

    def rmatvec(self, x):
        x = _as_state(x, self.size)
        b = self._blocks(x)
        out = np.zeros_like(b)
        out[-1] = b.sum(axis=0)
        return out.reshape(x.shape)


class CompositeOperator(LinearOperator):
    """Chronological composition: ``apply`` runs ops[0] first, ops[-1] last."""

    def __init__(self, ops: list[LinearOperator]):
        if not ops:
            raise ValueError("need at least one operator")
        first = ops[0]
        for op in ops:
            if (op.n_blocks, op.block_dim) != (first.n_blocks, first.block_dim):
                raise ValueError("operators act on mismatched state shapes")
        super().__init__(first.n_blocks, first.block_dim)
        self.ops = list(ops)

    def apply(self, x):
        y = _as_state(x, self.size)
        for op in self.ops:
            y = op.apply(y)
        return y

    def rmatvec(self, x):
        y = _as_state(x, self.size)
        for op in reversed(self.ops):
            y = op.rmatvec(y)
        return y


# ---------------------------------------------------------------------------
# functional helpers
# ---------------------------------------------------------------------------


def op_apply(op: LinearOperator, x: np.ndarray) -> np.ndarray:
    """Apply ``op`` to a state or a batch of states (columns)."""
    return op.apply(_as_state(np.asarray(x), op.size))


def op_window_product(
    schedule: "list[LinearOperator | None]", s: int, t: int
) -> LinearOperator:
    """Operator for the slot window [s, t): ``schedule[s]`` acts first.

    ``schedule`` holds one operator per slot; ``None`` marks a slot with no
    communication. An empty window (s == t) is the identity.
    """
    if s > t:
        raise ValueError(f"window start {s} exceeds end {t}")
    if t > len(schedule):
        raise ValueError(f"window end {t} exceeds schedule length {len(schedule)}")
    if not schedule:
        raise ValueError("cannot infer state shape from an empty schedule")
    probe = next(op for op in schedule if op is not None)
    ops = [op for op in schedule[s:t] if op is not None]
    if not ops:
        return IdentityOperator(probe.n_blocks, probe.block_dim)
    if len(ops) == 1:
        return ops[0]
    return CompositeOperator(ops)


def op_norm(
    op: LinearOperator,
    iters: int = 500,
    tol: float = 1e-9,
    *,
    seed: int = 0,
) -> float:
    """Largest singular value of ``op``.

    Exact (dense SVD) whenever dense materialization is allowed; otherwise
    power iteration on A^T A. An unconverged iteration warns and returns the
    best estimate so far rather than failing.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if op.size <= DENSE_CAP:
        return float(np.linalg.norm(op.to_dense(), 2))
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.size)
    v /= np.linalg.norm(v)
    lam_prev = 0.0
    for _ in range(iters):
        w = op.rmatvec(op.apply(v))
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
        if abs(lam - lam_prev) <= tol * max(lam, 1e-30):
            return float(np.sqrt(lam))
        lam_prev = lam
    warnings.warn(
        f"operator norm power iteration unconverged after {iters} iterations",
        RuntimeWarning,
        stacklevel=2,
    )
    return float(np.sqrt(lam_prev))


def block_read(x: np.ndarray, proj: BlockProjection) -> np.ndarray:
    """Copy of the block ``proj`` selects from flat state ``x``."""
    return proj.read(np.asarray(x, dtype=np.float64))


def block_accumulate(
    x: np.ndarray, proj: BlockProjection, update: np.ndarray, scale: float = 1.0
) -> np.ndarray:
    """Add ``scale * update`` into the block ``proj`` selects, in place.

    Rejects non-finite updates outright: a NaN written into shared state
    poisons every later consensus average, so fail at the source. Returns
    ``x`` for chaining.
    """
    update = np.asarray(update, dtype=np.float64)
    if update.shape != (proj.block_dim,):
        raise ValueError(
            f"update shape {update.shape} != block dim ({proj.block_dim},)"
        )
    if not (np.all(np.isfinite(update)) and np.isfinite(scale)):
        raise ValueError("refusing to accumulate non-finite update into state")
    if scale != 0.0:
        x[proj.span] += scale * update
    return x
