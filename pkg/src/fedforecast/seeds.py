"""Deterministic seed derivation.

Every random stream in the simulator is derived from one master seed plus a
few string/int labels. The derivation is a cryptographic hash, not an ad-hoc
arithmetic mix, so streams for different (label, client, round) combinations
are independent and the mapping is stable across processes and platforms:

    key   = "master|label0|label1|..."        (ASCII, '|'-joined)
    seed  = first 8 bytes of SHA-256(key), little-endian uint64

The derived seed feeds numpy's default generator (PCG64). Two runs with the
same master seed therefore produce bit-identical draws everywhere.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, *labels: object) -> int:
    """Derive a 64-bit seed from the master seed and a label path."""
    key = "|".join([str(master_seed), *(str(part) for part in labels)])
    digest = hashlib.sha256(key.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master_seed: int, *labels: object) -> np.random.Generator:
    """Return a fresh generator for the stream named by ``labels``."""
    return np.random.default_rng(derive_seed(master_seed, *labels))
