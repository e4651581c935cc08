"""Confusion-matrix segmentation metrics and run reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .protocol import IGNORE_ID


def confusion_accumulate(
    pred: np.ndarray,
    gt: np.ndarray,
    n_classes: int,
    conf: np.ndarray | None = None,
) -> np.ndarray:
    """Accumulate a confusion matrix; rows are ground truth, columns are
    predictions. Pixels with gt == 255 are skipped."""
    if pred.shape != gt.shape:
        raise ContractError(f"pred {pred.shape} vs gt {gt.shape}")
    if conf is None:
        conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    valid = gt != IGNORE_ID
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= n_classes or p.max() >= n_classes or g.min() < 0 or p.min() < 0):
        raise ContractError("label outside [0, n_classes)")
    counts = np.bincount(n_classes * g + p, minlength=n_classes * n_classes)
    conf += counts.reshape(n_classes, n_classes)
    return conf


def per_class_iou(conf: np.ndarray) -> dict[int, float | None]:
    """IoU per class index; None where the class has zero union (absent)."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=1) + conf.sum(axis=0) - np.diag(conf)
    out: dict[int, float | None] = {}
    for k in range(conf.shape[0]):
        out[k] = float(tp[k] / union[k]) if union[k] > 0 else None
    return out


def miou_from_confusion(
    conf: np.ndarray, class_subset: Sequence[int] | None = None
) -> float | None:
    """Unweighted mean IoU over a subset of class indices; absent classes
    (zero union) are excluded from the mean."""
    ious = per_class_iou(conf)
    subset = list(range(conf.shape[0])) if class_subset is None else list(class_subset)
    vals = [ious[k] for k in subset if ious[k] is not None]
    if not vals:
        return None
    return float(np.mean(vals))


@dataclass
class StepMetrics:
    """Evaluation snapshot after one continual step."""

    step: int
    per_class: dict[int, float | None]  # class id -> IoU (None if absent)
    miou_initial: float | None
    miou_increment: float | None
    miou_all: float | None
    confusion: np.ndarray

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "per_class": {str(c): v for c, v in self.per_class.items()},
            "miou_initial": self.miou_initial,
            "miou_increment": self.miou_increment,
            "miou_all": self.miou_all,
            "confusion": self.confusion.tolist(),
        }


@dataclass
class RunReport:
    """Full record of a continual run."""

    steps: list[StepMetrics]
    config: dict
    wall_clock: list[float] = field(default_factory=list)
    memory_bytes: int = 0
    debug: dict = field(default_factory=dict)

    @property
    def avg(self) -> float:
        """Mean of the all-classes mIoU over steps."""
        return float(np.mean([s.miou_all for s in self.steps]))

    def to_json(self) -> dict:
        return {
            "steps": [s.to_json() for s in self.steps],
            "avg": self.avg,
            "config": self.config,
            "wall_clock": self.wall_clock,
            "memory_bytes": self.memory_bytes,
            "debug": self.debug,
        }


def emit_report(report: RunReport, out_dir: str | Path) -> None:
    """Write report.json, metrics.csv, and a mIoU-vs-step plot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2))

    rows = []
    running = []
    for s in report.steps:
        running.append(s.miou_all)
        rows.append({
            "step": s.step,
            "miou_initial": _fmt(s.miou_initial),
            "miou_increment": _fmt(s.miou_increment),
            "miou_all": _fmt(s.miou_all),
            "avg_so_far": _fmt(float(np.mean(running))),
        })
    with open(out / "metrics.csv", "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["step", "miou_initial", "miou_increment", "miou_all", "avg_so_far"]
        )
        writer.writeheader()
        writer.writerows(rows)

    _plot_curves(report, out / "curves.png")


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def _plot_curves(report: RunReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [s.step for s in report.steps]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in [
        ("miou_all", "all"),
        ("miou_initial", "initial"),
        ("miou_increment", "increment"),
    ]:
        ys = [getattr(s, key) for s in report.steps]
        if any(y is not None for y in ys):
            ax.plot(steps, [np.nan if y is None else y for y in ys], marker="o", label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("mIoU")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
