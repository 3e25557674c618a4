"""Deterministic seed derivation for independent per-flow random streams."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Map an arbitrary tuple of labels to a stable 64-bit seed.

    The mapping is independent of Python's hash randomization, so two runs
    (or two processes) that derive a seed from the same labels always get the
    same random stream.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    """A fresh generator seeded from `derive_seed(*parts)`."""
    return np.random.default_rng(derive_seed(*parts))
