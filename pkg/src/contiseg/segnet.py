"""Desk-scale encoder/decoder segmentation network.

Four convolutional encoder blocks (the first three with stride 2) and a
light skip-connected decoder that upsamples back to input resolution. The
forward pass exposes the pre-activation maps of the first three encoder
blocks plus the logits map, which is what the distillation loss consumes,
together with the per-pixel class probabilities.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ContractError
from .heads import BatchRenorm2d, CosineClassifier, imprint_new_weights

CHECKPOINT_VERSION = 1

DEFAULT_WIDTHS = (16, 32, 64, 64)


class ShapeError(ValueError):
    """Input spatial dims are not divisible by the network's stride."""


@dataclass(frozen=True)
class ArchSpec:
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    in_channels: int = 3
    norm: str = "batch"  # "batch" | "renorm"
    cosine: bool = False
    renorm_momentum: float = 0.1

    @property
    def downsample(self) -> int:
        return 8

    @property
    def num_levels(self) -> int:
        # three encoder pre-activation maps + the logits map
        return 4


def _norm_layer(spec: ArchSpec, channels: int) -> BatchRenorm2d:
    return BatchRenorm2d(
        channels, momentum=spec.renorm_momentum, renorm=(spec.norm == "renorm")
    )


class _ConvBlock(nn.Module):
    """conv3x3 -> norm; the pre-activation output is kept for distillation."""

    def __init__(self, spec: ArchSpec, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm = _norm_layer(spec, cout)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        pre = self.norm(self.conv(x))
        return pre, F.relu(pre)


class SegNet(nn.Module):
    """Segmentation model owning its classifier and the list of class ids it
    scores (channel k of the logits corresponds to class_ids[k])."""

    def __init__(self, class_ids: Sequence[int], arch: ArchSpec = ArchSpec()):
        super().__init__()
        self.arch = arch
        self.class_ids: list[int] = [int(c) for c in class_ids]
        w1, w2, w3, w4 = arch.widths
        self.enc1 = _ConvBlock(arch, arch.in_channels, w1, stride=2)
        self.enc2 = _ConvBlock(arch, w1, w2, stride=2)
        self.enc3 = _ConvBlock(arch, w2, w3, stride=2)
        self.enc4 = _ConvBlock(arch, w3, w4, stride=1)
        self.dec3 = _ConvBlock(arch, w4 + w2, w2, stride=1)
        self.dec2 = _ConvBlock(arch, w2 + w1, w1, stride=1)
        self.head = _ConvBlock(arch, w1, w1, stride=1)
        self.embed_channels = w1
        if arch.cosine:
            self.classifier: nn.Module = CosineClassifier(w1, len(self.class_ids))
        else:
            self.classifier = nn.Conv2d(w1, len(self.class_ids), 1)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise ShapeError(f"expected (B, {self.arch.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-2] % self.arch.downsample or x.shape[-1] % self.arch.downsample:
            raise ShapeError(
                f"spatial dims {x.shape[-2]}x{x.shape[-1]} not divisible by "
                f"{self.arch.downsample}"
            )

    def embed(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Run the trunk; returns the distillable pre-activation maps and the
        final per-pixel embedding h at input resolution."""
        self._check_input(x)
        p1, a1 = self.enc1(x)
        p2, a2 = self.enc2(a1)
        p3, a3 = self.enc3(a2)
        _, a4 = self.enc4(a3)
        u3 = F.interpolate(a4, scale_factor=2, mode="bilinear", align_corners=False)
        _, d3 = self.dec3(torch.cat([u3, a2], dim=1))
        u2 = F.interpolate(d3, scale_factor=2, mode="bilinear", align_corners=False)
        _, d2 = self.dec2(torch.cat([u2, a1], dim=1))
        u1 = F.interpolate(d2, scale_factor=2, mode="bilinear", align_corners=False)
        _, h = self.head(u1)
        return [p1, p2, p3], h

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Returns (feature stack, probability map).

        The feature stack is [enc1_pre, enc2_pre, enc3_pre, logits]; the
        probability map is the softmax of the logits at input resolution.
        """
        preacts, h = self.embed(x)
        logits = self.classifier(h)
        probs = torch.softmax(logits, dim=1)
        return preacts + [logits], probs


def clone_frozen(model: SegNet) -> SegNet:
    """Deep copy in eval mode with gradients disabled; the distillation and
    pseudo-labeling teacher for the next step."""
    teacher = copy.deepcopy(model)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def extend_classifier(
    model: SegNet,
    new_class_ids: Sequence[int],
    imprint_features: Mapping[int, torch.Tensor] | None = None,
    generator: torch.Generator | None = None,
) -> SegNet:
    """Grow the classifier by the new classes, leaving old weights untouched.

    Cosine heads take imprinted rows when `imprint_features` is given (map of
    class id -> (N, ch) feature stack); otherwise new rows are randomly
    initialized. Returns the same model, mutated.
    """
    new_ids = [int(c) for c in new_class_ids]
    overlap = set(new_ids) & set(model.class_ids)
    if overlap:
        raise ContractError(f"classes already present: {sorted(overlap)}")
    clf = model.classifier
    if isinstance(clf, CosineClassifier):
        if imprint_features is not None:
            imprint_new_weights(clf, imprint_features, new_ids, generator)
        else:
            rows = torch.empty(len(new_ids), clf.in_channels, dtype=clf.weight.dtype)
            rows.normal_(std=0.01, generator=generator)
            clf.extend(rows)
    else:
        old_w, old_b = clf.weight.data, clf.bias.data
        new_clf = nn.Conv2d(clf.in_channels, len(model.class_ids) + len(new_ids), 1)
        if generator is not None:
            with torch.no_grad():
                new_clf.weight.normal_(std=0.01, generator=generator)
                new_clf.bias.zero_()
        new_clf = new_clf.to(old_w.dtype)
        with torch.no_grad():
            new_clf.weight[: old_w.shape[0]] = old_w
            new_clf.bias[: old_b.shape[0]] = old_b
        model.classifier = new_clf
    model.class_ids.extend(new_ids)
    return model


def save_checkpoint(model: SegNet, path: str | Path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "arch": {
            "widths": list(model.arch.widths),
            "in_channels": model.arch.in_channels,
            "norm": model.arch.norm,
            "cosine": model.arch.cosine,
            "renorm_momentum": model.arch.renorm_momentum,
        },
        "class_ids": list(model.class_ids),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> SegNet:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {payload.get('version')}")
    arch = ArchSpec(
        widths=tuple(payload["arch"]["widths"]),
        in_channels=payload["arch"]["in_channels"],
        norm=payload["arch"]["norm"],
        cosine=payload["arch"]["cosine"],
        renorm_momentum=payload["arch"]["renorm_momentum"],
    )
    model = SegNet(payload["class_ids"], arch)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def model_checksum(model: nn.Module) -> str:
    """Stable digest of all parameters and buffers (used to key caches)."""
    digest = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(t.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
