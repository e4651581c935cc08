"""Structural components for long continual runs: cosine classifier with
weight imprinting, and batch renormalization with freezable statistics."""

from __future__ import annotations

import warnings
from typing import Mapping, Sequence

import torch
from torch import nn

from .errors import ContractError

NORM_EPS = 1e-5


def _safe_norm(x: torch.Tensor, dim: int) -> torch.Tensor:
    """L2 norm clamped away from zero so dead vectors do not divide by zero."""
    return x.norm(dim=dim, keepdim=True).clamp_min(NORM_EPS)


class CosineClassifier(nn.Module):
    """Per-pixel cosine-similarity classifier with a learned scale.

    Scores are alpha * cos(weight_c, h) for every class c, computed
    independently at each spatial location; all class weights act with unit
    magnitude, which keeps old and new classes on the same footing.
    """

    def __init__(self, in_channels: int, n_classes: int, alpha_init: float = 1.0):
        super().__init__()
        self.in_channels = in_channels
        self.weight = nn.Parameter(torch.empty(n_classes, in_channels))
        nn.init.normal_(self.weight, std=0.01)
        self.alpha = nn.Parameter(torch.tensor(float(alpha_init)))

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """h: (B, ch, H, W) or (ch, H, W) -> cosine scores with a class axis
        in the same position as the channel axis."""
        if h.shape[-3] != self.in_channels:
            raise ContractError(
                f"feature dim {h.shape[-3]} != classifier dim {self.in_channels}"
            )
        hn = h / _safe_norm(h, dim=-3)
        wn = self.weight / _safe_norm(self.weight, dim=1)
        scores = torch.einsum("...chw,kc->...khw", hn, wn)
        return self.alpha * scores

    def extend(self, new_weights: torch.Tensor) -> None:
        """Append one weight row per new class."""
        if new_weights.ndim != 2 or new_weights.shape[1] != self.in_channels:
            raise ContractError(f"bad new weight shape {tuple(new_weights.shape)}")
        with torch.no_grad():
            merged = torch.cat([self.weight.data, new_weights.to(self.weight.dtype)])
        self.weight = nn.Parameter(merged)


def imprinted_weight(
    vectors: torch.Tensor, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, bool]:
    """Normalize-mean-normalize a stack of feature vectors into a unit weight.

    Returns (weight, used_fallback). A degenerate mean (zero vectors, or
    vectors that cancel) falls back to a random unit vector.
    """
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        return _random_unit(vectors.shape[-1], vectors.dtype, generator), True
    unit = vectors / _safe_norm(vectors, dim=1)
    mean = unit.mean(dim=0)
    norm = mean.norm()
    if norm < 1e-8:
        return _random_unit(vectors.shape[1], vectors.dtype, generator), True
    return mean / norm, False


def _random_unit(
    dim: int, dtype: torch.dtype, generator: torch.Generator | None
) -> torch.Tensor:
    v = torch.randn(dim, dtype=torch.float64 if dtype == torch.float64 else torch.float32,
                    generator=generator)
    return (v / v.norm()).to(dtype)


def imprint_new_weights(
    clf: CosineClassifier,
    features_by_class: Mapping[int, torch.Tensor],
    class_order: Sequence[int],
    generator: torch.Generator | None = None,
) -> CosineClassifier:
    """Append imprinted weights for `class_order`; classes without feature
    vectors get a random unit vector and a warning."""
    rows = []
    for c in class_order:
        vecs = features_by_class.get(int(c))
        if vecs is None or vecs.numel() == 0:
            warnings.warn(f"class {c}: no pixels to imprint from, using random init")
            rows.append(_random_unit(clf.in_channels, clf.weight.dtype, generator))
            continue
        w, fell_back = imprinted_weight(vecs, generator)
        if fell_back:
            warnings.warn(f"class {c}: degenerate imprint mean, using random init")
        rows.append(w)
    clf.extend(torch.stack(rows))
    return clf


class BatchRenorm2d(nn.Module):
    """Batch (re)normalization over channel axis 1 with freezable statistics.

    In renorm mode the training forward corrects batch statistics toward the
    running ones through the constants r = sigma_B / sigma and
    d = (mu_B - mu) / sigma, both excluded from the gradient; with
    renorm=False it behaves as plain batch normalization. `frozen` stops all
    running-statistic updates while leaving gamma/beta trainable.
    """

    def __init__(
        self,
        num_features: int,
        momentum: float = 0.1,
        eps: float = NORM_EPS,
        renorm: bool = True,
        affine: bool = True,
    ):
        super().__init__()
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.renorm = renorm
        self.affine = affine
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))
        self.register_buffer("frozen", torch.tensor(False))
        if affine:
            self.gamma = nn.Parameter(torch.ones(num_features))
            self.beta = nn.Parameter(torch.zeros(num_features))

    def _stat_dims(self, x: torch.Tensor) -> tuple[int, ...]:
        if x.ndim == 2:
            return (0,)
        if x.ndim == 4:
            return (0, 2, 3)
        raise ContractError(f"expected 2D or 4D input, got shape {tuple(x.shape)}")

    def _shape_for(self, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        if x.ndim == 4:
            return v.view(1, -1, 1, 1)
        return v.view(1, -1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dims = self._stat_dims(x)
        if x.shape[1] != self.num_features:
            raise ContractError(
                f"channel dim {x.shape[1]} != num_features {self.num_features}"
            )
        rmean = self.running_mean.to(x.dtype)
        rvar = self.running_var.to(x.dtype)
        if self.training:
            n = x.numel() // x.shape[1]
            if n < 2:
                raise ContractError("training-mode normalization needs >= 2 values per channel")
            mu_b = x.mean(dim=dims)
            var_b = x.var(dim=dims, unbiased=False)
            sigma_b = torch.sqrt(var_b + self.eps)
            if self.renorm:
                sigma = torch.sqrt(rvar + self.eps)
                r = (sigma_b / sigma).detach()
                d = ((mu_b - rmean) / sigma).detach()
            else:
                r = torch.ones_like(sigma_b)
                d = torch.zeros_like(mu_b)
            y = (x - self._shape_for(x, mu_b)) / self._shape_for(x, sigma_b)
            y = y * self._shape_for(x, r) + self._shape_for(x, d)
            if not bool(self.frozen):
                with torch.no_grad():
                    m = self.momentum
                    self.running_mean.mul_(1 - m).add_(
                        mu_b.detach().to(self.running_mean.dtype), alpha=m
                    )
                    self.running_var.mul_(1 - m).add_(
                        var_b.detach().to(self.running_var.dtype), alpha=m
                    )
        else:
            sigma = torch.sqrt(rvar + self.eps)
            y = (x - self._shape_for(x, rmean)) / self._shape_for(x, sigma)
        if self.affine:
            y = y * self._shape_for(x, self.gamma) + self._shape_for(x, self.beta)
        return y


def freeze_after_first_task(model: nn.Module) -> None:
    """Freeze the running statistics of every normalization layer; idempotent.
    Gamma/beta stay trainable."""
    for m in model.modules():
        if isinstance(m, BatchRenorm2d):
            m.frozen.fill_(True)
