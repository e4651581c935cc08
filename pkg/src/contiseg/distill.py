"""Pooled feature distillation.

A pooled embedding of a feature map collapses it to its width-pooled and
height-pooled mean slices; the multi-scale ("local") variant computes those
statistics over a pyramid of grid sub-regions so that both long-range and
short-range structure is preserved. The distillation loss is the mean, over
feature levels, of the squared L2 distance between the embeddings of the
previous and current models.

Tensors are channel-first: a feature map is (C, H, W) or batched (B, C, H, W);
embeddings come back as (R, C) or (B, R, C) where R is the total row count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ContractError


class ScaleError(ValueError):
    """A grid count does not fit the spatial extent of the feature map."""


#: Feature "norm" below which cosine normalization is skipped to avoid
#: blowing up dead (all-zero) embedding blocks.
ZERO_NORM_EPS = 1e-12

DEFAULT_GRID_COUNTS = (1, 2, 4)
DEFAULT_LAMBDA_FEATURES = 1e-2
DEFAULT_LAMBDA_LOGITS = 5e-4


@dataclass(frozen=True)
class PodEmbedding:
    """Concatenated multi-scale pooled statistics of one feature map."""

    data: torch.Tensor  # (..., R, C)
    scale_offsets: tuple[tuple[int, int], ...]  # row range per grid count

    @property
    def rows(self) -> int:
        return self.data.shape[-2]


def pod_embedding(x: torch.Tensor) -> torch.Tensor:
    """Width/height pooled embedding of a feature map.

    For x of shape (..., C, H, W), returns (..., H+W, C): the first H rows are
    the per-row means over the width axis, the remaining W rows the per-column
    means over the height axis.
    """
    if x.ndim < 3:
        raise ContractError(f"expected (..., C, H, W), got shape {tuple(x.shape)}")
    if x.shape[-1] == 0 or x.shape[-2] == 0 or x.shape[-3] == 0:
        raise ContractError(f"empty feature map: shape {tuple(x.shape)}")
    width_means = x.mean(dim=-1)  # (..., C, H)
    height_means = x.mean(dim=-2)  # (..., C, W)
    return torch.cat([width_means, height_means], dim=-1).transpose(-1, -2)


def _partition(extent: int, g: int) -> list[tuple[int, int]]:
    """Split `extent` into g near-equal spans; remainder goes to the last spans."""
    base, rem = divmod(extent, g)
    sizes = [base] * g
    for k in range(rem):
        sizes[g - 1 - k] += 1
    bounds, at = [], 0
    for s in sizes:
        bounds.append((at, at + s))
        at += s
    return bounds


def _normalize_block(block: torch.Tensor) -> torch.Tensor:
    """Divide a per-region embedding block by its L2 norm (per batch item)."""
    flat = block.flatten(start_dim=-2)
    norm = flat.norm(dim=-1)
    safe = torch.where(norm < ZERO_NORM_EPS, torch.ones_like(norm), norm)
    return block / safe[..., None, None]


def local_pod_embedding(
    x: torch.Tensor,
    grid_counts: Sequence[int] = DEFAULT_GRID_COUNTS,
    normalize: bool = False,
) -> PodEmbedding:
    """Multi-scale pooled embedding over grid sub-regions.

    For each grid count g the spatial extent is partitioned into g x g
    near-equal regions; each region contributes its pooled embedding, and all
    regions over all scales are concatenated along the row axis. With
    grid_counts=[1] this reduces exactly to `pod_embedding`. When `normalize`
    is set, every per-region block is divided by its own L2 norm.
    """
    if x.ndim < 3:
        raise ContractError(f"expected (..., C, H, W), got shape {tuple(x.shape)}")
    h, w = x.shape[-2], x.shape[-1]
    blocks: list[torch.Tensor] = []
    offsets: list[tuple[int, int]] = []
    at = 0
    for g in grid_counts:
        if g < 1:
            raise ScaleError(f"grid count must be >= 1, got {g}")
        if g > min(h, w):
            raise ScaleError(f"grid count {g} exceeds spatial extent {h}x{w}")
        start = at
        for i0, i1 in _partition(h, g):
            for j0, j1 in _partition(w, g):
                block = pod_embedding(x[..., i0:i1, j0:j1])
                if normalize:
                    block = _normalize_block(block)
                blocks.append(block)
                at += block.shape[-2]
        offsets.append((start, at))
    return PodEmbedding(data=torch.cat(blocks, dim=-2), scale_offsets=tuple(offsets))


def local_pod_loss(
    old: Sequence[torch.Tensor],
    new: Sequence[torch.Tensor],
    grid_counts: Sequence[int] = DEFAULT_GRID_COUNTS,
    normalize: bool = False,
    square_preact: bool = False,
) -> torch.Tensor:
    """Mean over levels of the squared L2 distance between pooled embeddings.

    `old` is treated as a constant (detached); gradients flow only into `new`.
    With `square_preact`, feature maps are squared elementwise before pooling
    (intended for pre-activation maps). Batched levels average the per-sample
    squared distances over the batch.
    """
    if len(old) != len(new):
        raise ContractError(f"level count mismatch: {len(old)} vs {len(new)}")
    if len(old) == 0:
        raise ContractError("empty feature stacks")
    total = None
    for lvl, (xo, xn) in enumerate(zip(old, new)):
        if xo.shape != xn.shape:
            raise ContractError(
                f"level {lvl}: shape mismatch {tuple(xo.shape)} vs {tuple(xn.shape)}"
            )
        xo = xo.detach()
        if square_preact:
            xo = xo * xo
            xn = xn * xn
        eo = local_pod_embedding(xo, grid_counts, normalize=normalize).data
        en = local_pod_embedding(xn, grid_counts, normalize=normalize).data
        sq = (en - eo).pow(2).flatten(start_dim=-2).sum(dim=-1)
        term = sq.mean() if sq.ndim > 0 else sq
        total = term if total is None else total + term
    return total / len(old)


def adaptive_lambda(base_lambda: float, n_seen: int, n_current: int) -> float:
    """Scale a distillation weight by sqrt(seen classes / current classes)."""
    if n_current < 1:
        raise ContractError(f"n_current must be >= 1, got {n_current}")
    if n_seen < n_current:
        raise ContractError(f"n_seen ({n_seen}) < n_current ({n_current})")
    return base_lambda * math.sqrt(n_seen / n_current)
