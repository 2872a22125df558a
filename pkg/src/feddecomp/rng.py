"""Seeded random streams.

All randomness goes through numpy's PCG64 bit generator, whose output
sequence is fixed by its published algorithm and identical on every
platform numpy supports. Streams for distinct purposes are derived from a
single root seed through ``SeedSequence`` keyed on (root, role, index), so
adding a client never shifts another client's stream.
"""

from __future__ import annotations

import numpy as np

# role constants for derived streams
ROLE_DATA = 1
ROLE_PARTITION = 2
ROLE_MODEL = 3
ROLE_CLIENT_INIT = 4
ROLE_CLIENT_SHUFFLE = 5
ROLE_PARTICIPATION = 6

_MASK64 = (1 << 64) - 1


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))


def derive_seed(root: int, role: int, index: int = 0) -> int:
    """A 64-bit sub-seed for (role, index) under ``root``."""
    ss = np.random.SeedSequence([int(root) & _MASK64, int(role), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derived_rng(root: int, role: int, index: int = 0) -> np.random.Generator:
    return seeded_rng(derive_seed(root, role, index))


def dirichlet(rng: np.random.Generator, alpha: float, k: int) -> np.ndarray:
    """Symmetric Dirichlet draw: k independent Gamma(alpha, 1) draws, normalized.

    Falls back to a one-hot at the largest gamma draw when every draw
    underflows to zero (possible for very small alpha).
    """
    g = rng.standard_gamma(alpha, size=k)
    total = g.sum()
    if total <= 0.0 or not np.isfinite(total):
        out = np.zeros(k)
        out[int(np.argmax(g))] = 1.0
        return out
    return g / total
