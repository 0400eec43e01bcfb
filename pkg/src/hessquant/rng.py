"""Deterministic named random substreams.

Every stochastic component draws from a substream derived from a single root
seed plus a component name path (e.g. ``substream(seed, "trace", "layer", 3)``).
Substreams are independent of evaluation order, so stages can be re-run
standalone and still reproduce the pipeline bit for bit.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def substream_seed(root_seed: int, *names: object) -> int:
    """Derive a 64-bit child seed from a root seed and a name path."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest()[:8], "little") & _MASK64


def substream(root_seed: int, *names: object) -> np.random.Generator:
    """A fresh Generator seeded from ``substream_seed(root_seed, *names)``."""
    return np.random.default_rng(substream_seed(root_seed, *names))
