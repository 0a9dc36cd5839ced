"""Pure-python step kernels for the simulation loop.

The compiled extension, when built, exposes the same two functions with the
same signatures; the engine picks one implementation at import time. Keep
semantics in lockstep: cross-backend trajectories must agree to float
round-off, nothing more.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"

# Opcode values mirror protocols.OP_*; duplicated as plain ints so the
# compiled twin does not import python modules for constants.
_OP_NONE = 0
_OP_AVG = 1
_OP_SLACK = 2
_OP_GOSSIP = 3
_OP_EDGE = 4
_OP_COPY = 5
_OP_PART = 6


def apply_slot(
    x: np.ndarray,
    n_blocks: int,
    d: int,
    op: int,
    a: int,
    b: int,
    gamma: float,
    weights: np.ndarray | None,
    partitions: list[np.ndarray] | None,
) -> None:
    """Apply one communication event to the flat state, in place."""
    if op == _OP_NONE:
        return
    blocks = x.reshape(n_blocks, d)
    if op == _OP_AVG:
        blocks[:] = blocks.mean(axis=0)
    elif op == _OP_SLACK:
        mean = blocks.mean(axis=0)
        blocks *= 1.0 - gamma
        blocks += gamma * mean
    elif op == _OP_GOSSIP:
        blocks[:] = weights @ blocks
    elif op == _OP_EDGE:
        mean = 0.5 * (blocks[a] + blocks[b])
        blocks[a] = mean
        blocks[b] = mean
    elif op == _OP_COPY:
        blocks[b] = blocks[a]
    elif op == _OP_PART:
        coords = partitions[a]
        blocks[:, coords] = blocks[:, coords].mean(axis=0)
    else:
        raise ValueError(f"unknown opcode {op}")


def sam_update(
    m: np.ndarray,
    v: np.ndarray,
    g: np.ndarray,
    p: float,
    beta1: float,
    beta2: float,
) -> np.ndarray:
    """Advance one moment recursion in place and return the step direction."""
    m *= beta1
    m += (1.0 - beta1) * g
    np.maximum(beta2 * v + (1.0 - beta2) * g * g, v, out=v)
    if p == 0.0:
        return m.copy()
    return m / v**p
