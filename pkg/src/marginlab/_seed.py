"""Deterministic fan-out of one master seed into per-stage sub-seeds.

Every random draw in a pipeline is keyed by the master seed plus a path of
string/int tokens naming the consumer (e.g. ``derive_seed(7, "init", 64, 0)``).
Hashing makes the sub-streams independent of each other and stable across
platforms and runs.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *tokens: object) -> int:
    """Return a 64-bit seed derived from ``master`` and a token path."""
    key = "/".join([str(int(master)), *(str(t) for t in tokens)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
