"""Counter-based random streams.

Every random draw in the library comes from a Philox generator keyed by
(run seed, stream id) with the step index in the counter block.  Streams are
therefore independent of evaluation order: particle 7's noise at step 12 is
the same whether particles are updated serially, in a thread pool, or in any
permutation.  Rebuilding a generator from its key is cheap (a few microseconds),
so we construct one per draw instead of carrying generator state around.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream family tags, kept in the high bits of the second key word so that
# member indices (particle ids, task ids) can never collide across families.
DATA = 1 << 48
SAMPLER = 2 << 48
INIT = 3 << 48
NOISE = 4 << 48
TEMPLATE = 5 << 48
BARYCENTER = 6 << 48


def stream(seed: int, tag: int, member: int = 0, step: int = 0) -> np.random.Generator:
    """Generator for stream (seed, tag | member) positioned at `step`.

    `member` must stay below 2**48 (particle/task indices in practice).
    Each step owns a disjoint 2**192-draw counter block.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    if not 0 <= member < (1 << 48):
        raise ValueError(f"stream member out of range: {member}")
    key = np.array([seed & _MASK64, (tag | member) & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, 0, step & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))
