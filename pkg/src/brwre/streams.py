"""Seed derivation and counter-based random streams.

Every random quantity in the package is a pure function of an integer seed
plus a tuple of integer labels (replica index, block index, purpose tag).
Site-level environment draws use Philox directly so that the uniform for
site ``x`` can be produced without generating sites ``0..x-1``.
"""
from __future__ import annotations

import os

import numpy as np

MASK64 = (1 << 64) - 1

# purpose tags, folded into derived keys
TAG_ENVIRONMENT = 0x454E56
TAG_NOISE = 0x4E4F4953
TAG_WALK = 0x57414C4B
TAG_EMBEDDED = 0x454D42

# one Philox counter increment yields this many 64-bit words
_WORDS_PER_COUNTER = 4


def normalize_seed(seed: int) -> int:
    return int(seed) & MASK64


def derive_seed(seed: int, *labels: int) -> int:
    """Mix ``seed`` and ``labels`` into a new 64-bit seed."""
    ss = np.random.SeedSequence([normalize_seed(seed), *[int(v) & MASK64 for v in labels]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generator(seed: int, *labels: int) -> np.random.Generator:
    """A Philox-backed generator owned by one (seed, labels) stream."""
    ss = np.random.SeedSequence([normalize_seed(seed), *[int(v) & MASK64 for v in labels]])
    return np.random.Generator(np.random.Philox(ss))


def site_uniforms(seed: int, start: int, stop: int, tag: int = TAG_ENVIRONMENT) -> np.ndarray:
    """Uniforms in [0, 1) for sites ``start..stop-1``.

    The value for a given site depends only on ``(seed, tag, site)``, so a
    longer environment extends a shorter one without changing its prefix.
    """
    if stop <= start:
        return np.empty(0)
    bg = np.random.Philox(key=np.array([normalize_seed(seed), tag & MASK64], dtype=np.uint64))
    block, offset = divmod(start, _WORDS_PER_COUNTER)
    if block:
        bg.advance(block)
    raw = bg.random_raw(offset + (stop - start))[offset:]
    return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def default_workers() -> int:
    """Thread count for replica loops, from ``BRWRE_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("BRWRE_THREADS", "1")))
    except ValueError:
        return 1
