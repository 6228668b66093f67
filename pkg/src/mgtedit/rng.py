"""Counter-based random streams for reproducible runs.

Every random draw in this package flows through a Philox-4x64 counter
generator keyed by the run seed plus a small integer path. Philox output is
specified bit-for-bit, so trajectories are identical across platforms and
across processes; there is no global RNG state anywhere.

A "stream" is addressed as ``(seed, *path)``; the path elements are folded
into the second Philox key word with a splitmix64 chain, the run seed is the
first key word. Distinct paths give statistically independent streams.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _fold_path(path: tuple[int, ...]) -> int:
    # Length is absorbed first so (1,) and (1, 0) cannot collide.
    acc = _splitmix64(len(path))
    for p in path:
        acc = _splitmix64(acc ^ (int(p) & _MASK64))
    return acc


def substream(seed: int, *path: int) -> np.random.Generator:
    """A Generator over an independent Philox stream keyed by (seed, path)."""
    key = np.array([int(seed) & _MASK64, _fold_path(path)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def step_uniforms(seed: int, step: int, n: int, draws_per_slot: int = 2) -> np.ndarray:
    """Per-position uniforms for one sampling step, shape (n, draws_per_slot).

    Position ``p`` owns the fixed counter slots ``p*draws_per_slot ...`` of the
    (seed, step) stream, so the draw a position sees does not depend on which
    other positions are active or on iteration order.
    """
    g = substream(seed, 0x5354, step)  # path tag "ST"
    return g.random((n, draws_per_slot))
