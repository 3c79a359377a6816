"""Named, counter-based random streams.

Every stochastic consumer in the package (weight init, shuffling, attack
starts, subset selection, ...) pulls its own Philox stream keyed by a root
seed plus a string label. Streams are independent by construction, so adding
a new consumer never perturbs the draws seen by existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(root_seed: int, name: str) -> np.ndarray:
    """Derive a 128-bit Philox key from (root_seed, name)."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


def named_stream(root_seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for one named consumer of `root_seed`."""
    return np.random.Generator(np.random.Philox(key=stream_key(root_seed, name)))


def derive_seed(root_seed: int, name: str) -> int:
    """Fold (root_seed, name) into a fresh 63-bit seed for a sub-component."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[16:24], "little") >> 1
