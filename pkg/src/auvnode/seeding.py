"""Deterministic stream derivation from a single master seed.

Every random draw in the pipeline comes from a generator seeded through
`derive_seed(master, *tags)`, so any stage can be re-run in isolation and
reproduce the exact stream it saw inside the full pipeline, regardless of
execution order or worker count.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *tags) -> int:
    """Collapse (master, tags) into a stable 63-bit seed.

    Tags may be ints or strings; the mapping is fixed by the sha256 digest
    of their repr, not by Python's salted hash().
    """
    blob = repr((int(master),) + tuple(tags)).encode("utf-8")
    digest = hashlib.sha256(blob).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def rng_from(master: int, *tags) -> np.random.Generator:
    """Generator for the stream named by (master, tags)."""
    return np.random.default_rng(derive_seed(master, *tags))
