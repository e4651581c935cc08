import numpy as np
import pytest
import torch

from contiseg.protocol import SegSample, generate_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset():
    """6-class synthetic set shared by read-only tests."""
    return generate_synthetic_dataset(20, 64, 6, seed=7)


def random_simplex(rng: np.random.Generator, k: int, h: int, w: int) -> torch.Tensor:
    """Random (K, H, W) probability map, exact simplex per pixel."""
    raw = rng.exponential(1.0, size=(k, h, w))
    return torch.from_numpy(raw / raw.sum(axis=0, keepdims=True))


def make_sample(labels: np.ndarray, rng: np.random.Generator | None = None,
                sid: str = "s0") -> SegSample:
    rng = rng or np.random.default_rng(0)
    h, w = labels.shape
    img = (rng.integers(0, 256, size=(h, w, 3)).astype(np.float32)) / 255.0
    return SegSample(image=img, labels=labels.astype(np.int64), id=sid)
