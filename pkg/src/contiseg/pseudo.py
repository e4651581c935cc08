"""Uncertainty-filtered pseudo-labeling of background pixels.

At each step the previous model's per-pixel predictions complete the
ambiguous background labels: a background pixel is relabeled with the old
model's argmax class when the old model's entropy there falls below a
per-class threshold (the median entropy of pixels predicted as that class,
optionally capped). Everything rejected is ignored by the classification
loss, and a per-image factor nu downweights images whose background is
mostly uncertain.

Probability maps are channel-first (K, H, W); label maps are (H, W) integer
tensors using the dataset's class ids (0 background, 255 ignore).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import ContractError
from .protocol import BACKGROUND_ID, IGNORE_ID

SIMPLEX_TOL = 1e-5


def validate_prob_map(probs: torch.Tensor, tol: float = SIMPLEX_TOL) -> None:
    """Check the per-pixel simplex constraint within tolerance."""
    if probs.ndim != 3:
        raise ContractError(f"expected (K, H, W), got shape {tuple(probs.shape)}")
    if probs.min() < -tol or probs.max() > 1 + tol:
        raise ContractError("probabilities outside [0, 1]")
    sums = probs.sum(dim=0)
    err = (sums - 1.0).abs().max().item()
    if err > tol:
        raise ContractError(f"per-pixel probabilities sum off by {err:.3g}")


def pixel_entropy(probs: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """Per-pixel Shannon entropy (natural log) of a (K, H, W) probability map."""
    if validate:
        validate_prob_map(probs)
    return -torch.special.xlogy(probs, probs).sum(dim=0)


@dataclass(frozen=True)
class ThresholdTable:
    """Per-class entropy acceptance thresholds, optionally capped."""

    tau: dict[int, float]
    tau_max: float | None = None

    def save(self, path: str | Path) -> None:
        payload = {
            "tau": {str(c): v for c, v in self.tau.items()},
            "tau_max": self.tau_max,
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ThresholdTable":
        payload = json.loads(Path(path).read_text())
        return cls(
            tau={int(c): float(v) for c, v in payload["tau"].items()},
            tau_max=payload["tau_max"],
        )


def compute_class_thresholds(
    old_probs_stream: Iterable[torch.Tensor],
    class_ids: Sequence[int],
    tau_max: float | None = None,
) -> ThresholdTable:
    """Median-entropy threshold per class over an inference stream.

    For each class id, collects the entropies of every pixel (across all maps
    in the stream) whose argmax prediction is that class, and takes the exact
    median. Classes never predicted fall back to the cap (infinity when the
    cap is disabled). With a cap, thresholds are clipped to tau_max.
    """
    per_class: dict[int, list[np.ndarray]] = {int(c): [] for c in class_ids}
    ids = [int(c) for c in class_ids]
    n_maps = 0
    for probs in old_probs_stream:
        n_maps += 1
        if probs.shape[0] != len(ids):
            raise ContractError(
                f"prob map has {probs.shape[0]} classes, expected {len(ids)}"
            )
        u = pixel_entropy(probs, validate=False).double().cpu().numpy()
        amax = probs.argmax(dim=0).cpu().numpy()
        for k, c in enumerate(ids):
            picked = u[amax == k]
            if picked.size:
                per_class[c].append(picked)
    if n_maps == 0:
        raise ContractError("threshold stream is empty")

    fallback = math.inf if tau_max is None else float(tau_max)
    tau: dict[int, float] = {}
    for c in ids:
        if per_class[c]:
            t = float(np.median(np.concatenate(per_class[c])))
            if tau_max is not None:
                t = min(t, float(tau_max))
            tau[c] = t
        else:
            tau[c] = fallback
    return ThresholdTable(tau=tau, tau_max=tau_max)


@dataclass(frozen=True)
class PseudoTarget:
    """Per-pixel training target with its acceptance mask and image weight."""

    target: torch.Tensor  # (H, W) int64 over seen class ids / background / ignore
    accepted: torch.Tensor  # (H, W) bool
    nu: float


def build_pseudo_target(
    gt: torch.Tensor,
    old_probs: torch.Tensor,
    old_class_ids: Sequence[int],
    thresholds: ThresholdTable,
) -> PseudoTarget:
    """Complete background labels with confident old-model predictions.

    Per pixel: ground-truth foreground is kept and accepted; ignore stays
    rejected; a background pixel takes the old model's argmax class when the
    old model's entropy is below that class's threshold, and is ignored
    otherwise. nu is the accepted fraction of background-origin pixels
    (1 when the image has none).
    """
    if gt.shape != old_probs.shape[1:]:
        raise ContractError(
            f"shape mismatch: gt {tuple(gt.shape)} vs probs {tuple(old_probs.shape)}"
        )
    if old_probs.shape[0] != len(old_class_ids):
        raise ContractError("class_ids do not match the probability map")
    validate_prob_map(old_probs)

    ids = torch.as_tensor([int(c) for c in old_class_ids], dtype=torch.int64)
    try:
        tau_arr = torch.as_tensor(
            [thresholds.tau[int(c)] for c in old_class_ids], dtype=torch.float64
        )
    except KeyError as e:
        raise ContractError(f"threshold table missing class {e}") from e

    u = pixel_entropy(old_probs, validate=False).double()
    amax = old_probs.argmax(dim=0)

    bg = gt == BACKGROUND_ID
    ig = gt == IGNORE_ID
    fg = ~bg & ~ig

    target = gt.clone().to(torch.int64)
    accepted = fg.clone()

    confident = u < tau_arr[amax]
    take = bg & confident
    target[bg] = IGNORE_ID
    target[take] = ids[amax[take]]
    accepted |= take

    n_bg = int(bg.sum())
    nu = float(take.sum()) / n_bg if n_bg > 0 else 1.0
    return PseudoTarget(target=target, accepted=accepted, nu=nu)


def apply_pseudo_oracle(
    pt: PseudoTarget, gt: torch.Tensor, full_gt: torch.Tensor
) -> PseudoTarget:
    """Ablation filter: drop background-origin pseudo-labels that disagree
    with the complete ground truth. Requires fully-labeled data."""
    bg = gt == BACKGROUND_ID
    wrong = bg & pt.accepted & (pt.target != full_gt)
    target = pt.target.clone()
    accepted = pt.accepted.clone()
    target[wrong] = IGNORE_ID
    accepted[wrong] = False
    n_bg = int(bg.sum())
    nu = float((bg & accepted).sum()) / n_bg if n_bg > 0 else 1.0
    return PseudoTarget(target=target, accepted=accepted, nu=nu)


def pseudo_ce_loss(
    log_probs: torch.Tensor,
    pt: PseudoTarget,
    class_ids: Sequence[int],
) -> torch.Tensor:
    """Cross-entropy over accepted pixels, nu-weighted and renormalized.

    `log_probs` is (K, H, W) over `class_ids`; the normalizer counts only
    accepted pixels, so rejected pixels reduce it rather than dilute the mean.
    Returns 0 when nothing is accepted.
    """
    if log_probs.ndim != 3 or log_probs.shape[1:] != pt.target.shape:
        raise ContractError(
            f"log_probs {tuple(log_probs.shape)} vs target {tuple(pt.target.shape)}"
        )
    acc = pt.accepted
    if not bool(acc.any()):
        return log_probs.sum() * 0.0

    max_id = max(int(c) for c in class_ids)
    lut = torch.full((max_id + 2,), -1, dtype=torch.int64)
    for k, c in enumerate(class_ids):
        lut[int(c)] = k
    tvals = pt.target[acc]
    if int(tvals.max()) > max_id:
        raise ContractError("accepted pixel targets a class outside the model's range")
    idx = lut[tvals]
    if (idx < 0).any():
        raise ContractError("accepted pixel targets a class outside the model's range")

    picked = log_probs.permute(1, 2, 0)[acc].gather(1, idx[:, None]).squeeze(1)
    return -pt.nu * picked.mean()


def total_loss(
    pseudo: torch.Tensor | float,
    distill: torch.Tensor | float,
    lambda_eff: float,
) -> torch.Tensor | float:
    """Weighted sum of the classification and distillation terms."""
    return pseudo + lambda_eff * distill
