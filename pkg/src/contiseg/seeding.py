"""Deterministic seed fan-out: one root seed, named substreams."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def substream(root_seed: int, name: str) -> int:
    """Derive a stable 63-bit seed for a named purpose."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def numpy_rng(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream(root_seed, name))


def torch_generator(root_seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream(root_seed, name))
    return g
