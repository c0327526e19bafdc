"""Stable, purpose-labeled RNG derivation.

Every random stream in the artifact is derived from (root seed, purpose
labels) through sha256, so adding or reordering consumers of one stream
can never perturb another.
"""

from __future__ import annotations

import hashlib

import numpy as np

_SEP = "\x1f"


def stable_seed(*parts) -> int:
    payload = _SEP.join(str(p) for p in parts)
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))
