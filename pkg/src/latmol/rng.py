"""Deterministic random-stream derivation from one master seed.

Every consumer of randomness names its stream; the (master, labels) pair
maps to an independent generator via SeedSequence spawn keys, so adding
or reordering consumers never shifts another stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label):
    if isinstance(label, int):
        return label & 0xFFFFFFFF
    digest = hashlib.sha256(str(label).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def derive_rng(master_seed, *labels):
    """Independent Generator for the stream named by ``labels``."""
    key = tuple(_label_key(l) for l in labels)
    seq = np.random.SeedSequence(entropy=int(master_seed) & (2**63 - 1), spawn_key=key)
    return np.random.Generator(np.random.PCG64(seq))
