"""Continual-segmentation protocol: class splits, per-step views, synthetic data, dataset I/O.

Conventions used throughout the package: images are float32 arrays of shape
(H, W, 3) with values in [0, 1] derived from 8-bit data; label maps are int64
arrays of shape (H, W) where 0 is background and 255 is ignore.
"""

from __future__ import annotations

import colorsys
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

BACKGROUND_ID = 0
IGNORE_ID = 255


class SplitSpecError(ValueError):
    """Split specification does not match the class universe."""


class ProtocolError(ValueError):
    """Step index or view request outside the task sequence."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class DatasetLoadError(RuntimeError):
    """On-disk dataset is malformed."""


class ContractShapeError(ValueError):
    """Image and label arrays disagree on spatial dimensions."""


@dataclass(frozen=True)
class SegSample:
    """One image / label-map pair with a stable identifier."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (H, W) int64, values in {0..K, 255}
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape:
            raise ContractShapeError(
                f"sample {self.id}: image {self.image.shape} vs labels {self.labels.shape}"
            )

    @property
    def present_classes(self) -> set[int]:
        vals = np.unique(self.labels)
        return {int(v) for v in vals if v not in (BACKGROUND_ID, IGNORE_ID)}


@dataclass(frozen=True)
class TaskSequence:
    """Ordered, disjoint groups of foreground class ids, one group per step."""

    class_groups: tuple[tuple[int, ...], ...]
    background_id: int = BACKGROUND_ID
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        if len(self.class_groups) < 1:
            raise SplitSpecError("a task sequence needs at least one step")
        seen: set[int] = set()
        for g in self.class_groups:
            if len(g) == 0:
                raise SplitSpecError("empty class group")
            for c in g:
                if c in (self.background_id, self.ignore_id):
                    raise SplitSpecError(f"class id {c} is reserved")
                if c in seen:
                    raise SplitSpecError(f"class id {c} appears in two groups")
                seen.add(c)

    @property
    def num_steps(self) -> int:
        return len(self.class_groups)

    @property
    def total_classes(self) -> int:
        return sum(len(g) for g in self.class_groups)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(c for g in self.class_groups for c in g)

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ProtocolError(f"step {t} outside 1..{self.num_steps}")

    def current_classes(self, t: int) -> tuple[int, ...]:
        self._check_step(t)
        return self.class_groups[t - 1]

    def old_classes(self, t: int) -> tuple[int, ...]:
        """Classes of steps 1..t-1, in introduction order."""
        self._check_step(t)
        return tuple(c for g in self.class_groups[: t - 1] for c in g)

    def seen_classes(self, t: int) -> tuple[int, ...]:
        """Classes of steps 1..t, in introduction order."""
        self._check_step(t)
        return tuple(c for g in self.class_groups[:t] for c in g)


@dataclass(frozen=True)
class StepView:
    """Samples visible at one step, labels restricted to that step's classes."""

    step_index: int
    samples: list[SegSample]
    current_classes: tuple[int, ...]
    old_classes: tuple[int, ...]


def build_task_sequence(
    class_universe: Sequence[int],
    split_spec: str | Sequence[int] | Sequence[Sequence[int]],
) -> TaskSequence:
    """Build a TaskSequence from a class universe and a split specification.

    `split_spec` is either a string "A" or "A-B" (one group of A classes, then
    groups of B until the universe is exhausted), a list of group sizes, or an
    explicit list of class-id groups.
    """
    universe = [int(c) for c in class_universe]
    if len(set(universe)) != len(universe):
        raise SplitSpecError("class universe contains duplicates")

    if isinstance(split_spec, str):
        parts = split_spec.strip().split("-")
        try:
            nums = [int(p) for p in parts]
        except ValueError as e:
            raise SplitSpecError(f"cannot parse split spec {split_spec!r}") from e
        if len(nums) == 1:
            sizes = nums
        elif len(nums) == 2:
            first, later = nums
            if later <= 0 or first <= 0:
                raise SplitSpecError(f"split sizes must be positive: {split_spec!r}")
            rest = len(universe) - first
            if rest < 0 or rest % later != 0:
                raise SplitSpecError(
                    f"split {split_spec!r} does not tile {len(universe)} classes"
                )
            sizes = [first] + [later] * (rest // later)
        else:
            raise SplitSpecError(f"split spec {split_spec!r} must be 'A' or 'A-B'")
    elif split_spec and isinstance(split_spec[0], (list, tuple)):
        groups = tuple(tuple(int(c) for c in g) for g in split_spec)
        flat = [c for g in groups for c in g]
        if sorted(flat) != sorted(universe):
            raise SplitSpecError("explicit groups do not cover the class universe")
        return TaskSequence(groups)
    else:
        sizes = [int(s) for s in split_spec]

    if sum(sizes) != len(universe):
        raise SplitSpecError(
            f"group sizes {sizes} sum to {sum(sizes)}, universe has {len(universe)}"
        )
    if any(s <= 0 for s in sizes):
        raise SplitSpecError(f"non-positive group size in {sizes}")

    groups, at = [], 0
    for s in sizes:
        groups.append(tuple(universe[at : at + s]))
        at += s
    return TaskSequence(tuple(groups))


def _remap_labels(labels: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    """Relabel everything outside `keep` (plus ignore) as background."""
    lut = np.zeros(256, dtype=np.int64)
    for c in keep:
        lut[c] = c
    lut[IGNORE_ID] = IGNORE_ID
    return lut[labels]


def make_step_view(dataset: Sequence[SegSample], seq: TaskSequence, t: int) -> StepView:
    """Training view at step t: keep samples with at least one current-class
    pixel, relabel every other foreground pixel as background."""
    seq._check_step(t)
    current = set(seq.current_classes(t))
    kept = []
    for s in dataset:
        if s.present_classes & current:
            kept.append(
                SegSample(image=s.image, labels=_remap_labels(s.labels, sorted(current)), id=s.id)
            )
    return StepView(
        step_index=t,
        samples=kept,
        current_classes=seq.current_classes(t),
        old_classes=seq.old_classes(t),
    )


def make_eval_view(dataset: Sequence[SegSample], seq: TaskSequence, t: int) -> StepView:
    """Evaluation view at step t: keep every sample, keep labels of all seen
    classes, relabel future classes as background."""
    seq._check_step(t)
    seen = seq.seen_classes(t)
    samples = [
        SegSample(image=s.image, labels=_remap_labels(s.labels, seen), id=s.id)
        for s in dataset
    ]
    return StepView(
        step_index=t,
        samples=samples,
        current_classes=seq.current_classes(t),
        old_classes=seq.old_classes(t),
    )


# ---------------------------------------------------------------------------
# Synthetic shape dataset
# ---------------------------------------------------------------------------

_SHAPE_KINDS = ("circle", "square", "triangle")


def _class_color(class_id: int, n_classes: int) -> np.ndarray:
    hue = (class_id - 1) / max(n_classes, 1)
    r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 0.85)
    return np.array([r * 255, g * 255, b * 255], dtype=np.float64)


def _shape_mask(kind: str, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= r
    # upward triangle: apex at cy - r, base at cy + r
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)


def _render_image(
    rng: np.random.Generator, size: int, class_choices: np.ndarray, n_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    base = rng.integers(70, 110)
    noise = rng.normal(0.0, 8.0, size=(size, size, 3))
    img = np.clip(base + noise, 0, 255)
    labels = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)

    r_min, r_max = 4, max(5, size // 5)
    placed = 0
    for c in class_choices:
        for _ in range(40):  # rejection sampling against overlaps
            r = int(rng.integers(r_min, r_max + 1))
            cy = int(rng.integers(r + 1, size - r - 1))
            cx = int(rng.integers(r + 1, size - r - 1))
            mask = _shape_mask(_SHAPE_KINDS[(c - 1) % 3], size, cy, cx, r)
            if not mask.any() or (mask & occupied).any():
                continue
            color = _class_color(int(c), n_classes)
            shade = color[None, :] + rng.normal(0.0, 10.0, size=(int(mask.sum()), 3))
            img[mask] = np.clip(shade, 0, 255)
            labels[mask] = int(c)
            occupied |= mask
            placed += 1
            break
    if placed == 0:
        raise GenerationError("could not place any shape")
    return img.astype(np.uint8), labels


def generate_synthetic_dataset(
    n_images: int,
    image_size: int,
    n_classes: int,
    seed: int,
    id_prefix: str = "im",
) -> list[SegSample]:
    """Generate images of 1-3 non-overlapping colored shapes on noisy gray.

    Deterministic under `seed`. Every foreground class is guaranteed to appear
    in at least max(1, n_images // 20) images when feasible; the generator
    retries with derived seeds until the guarantee holds.
    """
    if n_classes < 2:
        raise GenerationError("need at least 2 classes")
    if image_size < 16:
        raise GenerationError(f"image size {image_size} too small to place a shape")

    min_count = max(1, n_images // 20) if n_images >= n_classes else 0
    for attempt in range(20):
        rng = np.random.default_rng([seed, attempt])
        samples = []
        counts = {c: 0 for c in range(1, n_classes + 1)}
        for i in range(n_images):
            k = int(rng.integers(1, 4))
            k = min(k, n_classes)
            classes = rng.choice(np.arange(1, n_classes + 1), size=k, replace=False)
            img, labels = _render_image(rng, image_size, classes, n_classes)
            for c in np.unique(labels):
                if c != BACKGROUND_ID:
                    counts[int(c)] += 1
            samples.append(
                SegSample(
                    image=(img.astype(np.float32) / 255.0),
                    labels=labels,
                    id=f"{id_prefix}_{i:05d}",
                )
            )
        if min(counts.values()) >= min_count:
            return samples
    raise GenerationError(
        f"could not cover all {n_classes} classes in {n_images} images after 20 attempts"
    )


# ---------------------------------------------------------------------------
# Dataset directory I/O: images/<id>.png, labels/<id>.png, manifest.json
# ---------------------------------------------------------------------------


def save_dataset(
    samples: Sequence[SegSample],
    root_dir: str | Path,
    class_universe: Sequence[int],
    seed: int | None = None,
    class_names: dict[int, str] | None = None,
) -> None:
    root = Path(root_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img8 = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray(s.labels.astype(np.uint8), mode="L").save(
            root / "labels" / f"{s.id}.png"
        )
    manifest = {
        "classes": [int(c) for c in class_universe],
        "names": {str(c): (class_names or {}).get(c, f"class_{c}") for c in class_universe},
        "seed": seed,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root_dir: str | Path) -> list[SegSample]:
    """Load a dataset directory; returns samples sorted by id."""
    root = Path(root_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        warnings.warn(f"no manifest.json under {root}; returning empty dataset")
        return []
    try:
        manifest = json.loads(manifest_path.read_text())
        universe = {int(c) for c in manifest["classes"]}
    except (json.JSONDecodeError, KeyError) as e:
        raise DatasetLoadError(f"corrupt manifest {manifest_path}: {e}") from e

    image_files = sorted((root / "images").glob("*.png")) if (root / "images").exists() else []
    if not image_files:
        warnings.warn(f"no images under {root}; returning empty dataset")
        return []

    legal = universe | {BACKGROUND_ID, IGNORE_ID}
    samples, offenders = [], []
    for img_path in image_files:
        sid = img_path.stem
        label_path = root / "labels" / f"{sid}.png"
        if not label_path.exists():
            raise DatasetLoadError(f"missing label file for {sid}")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.uint8)
        labels = np.asarray(Image.open(label_path), dtype=np.int64)
        bad = set(np.unique(labels).tolist()) - legal
        if bad:
            offenders.append(f"{label_path} (values {sorted(bad)})")
            continue
        samples.append(
            SegSample(image=img.astype(np.float32) / 255.0, labels=labels, id=sid)
        )
    if offenders:
        raise DatasetLoadError("unknown label values in: " + "; ".join(offenders))
    samples.sort(key=lambda s: s.id)
    return samples
