"""Seed derivation.

Every random stream in the package comes from one master seed. Sub-seeds
are derived by hashing ``"<master>/<label>"`` with BLAKE2b (8-byte digest),
so a labelled stream (``"cv-fold"``, ``"bootstrap-42"``, ``"trial-3"``) is
reproducible on its own and independent of scheduling order. Generators
are numpy's counter-based Philox.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.blake2b(f"{int(master)}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, label: str | None = None) -> np.random.Generator:
    if label is not None:
        seed = derive_seed(seed, label)
    return np.random.Generator(np.random.Philox(int(seed)))
