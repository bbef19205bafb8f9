"""Named, counter-based random streams.

Every random draw is taken from a Philox generator whose key is a SHA-256
digest of ``(scenario, n, seed, purpose)``, so each purpose (design points,
noise, Lanczos start vector, ...) has its own stream and results do not
depend on the order in which cells of a sweep are executed.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

__all__ = ["stream"]


def stream(scenario: str, n: int, seed: int, purpose: str) -> np.random.Generator:
    key = json.dumps([str(scenario), int(n), int(seed), str(purpose)]).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))
