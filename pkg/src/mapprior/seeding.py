"""Seed expansion.

All sub-seeds come from one global seed through splitmix64:
``derive_seed(seed, *tags)`` folds each tag into the state and emits one
mixed 63-bit value. String tags are folded via an 8-byte blake2b digest so names
like ``"prior"`` or ``"scene"`` give stable, independent streams.
"""
from __future__ import annotations

import hashlib
import random

import numpy as np
import torch

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + _GOLDEN) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _tag_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK
    return int.from_bytes(hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(seed: int, *tags) -> int:
    state = int(seed) & _MASK
    state, out = splitmix64(state)
    for tag in tags:
        state, out = splitmix64(state ^ _tag_int(tag) ^ out)
    return out >> 1


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & ((1 << 63) - 1))
    return g
