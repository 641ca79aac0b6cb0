"""Deterministic, order-independent random streams keyed by string labels."""

import hashlib

import numpy as np


def _label_key(label) -> int:
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(base_seed: int, *labels) -> np.random.Generator:
    """Generator derived from ``(base_seed, *labels)`` only.

    Built on numpy's ``SeedSequence`` spawn-key mechanism, so creating streams
    in a different order never changes any stream's output.
    """
    key = tuple(_label_key(lbl) for lbl in labels)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(base_seed), spawn_key=key)))


def seed_streams(base_seed: int, labels):
    return {lbl: stream(base_seed, lbl) for lbl in labels}
