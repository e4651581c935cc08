"""Rehearsal memories: sparse object patches and whole-image replay.

Object rehearsal stores, per past class, the masked pixels of that class from
a handful of images. During later steps each stored object can be zoom/rotate
augmented about its own center, pasted back into current images at its
original (normalized) position, and the surrounding foreground selectively
erased to a constant fill so the pasted object does not fight the destination
scene. Patch-kind stores additionally keep a dilated ring of background
context around the object.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image

from .errors import ContractError
from .protocol import BACKGROUND_ID, IGNORE_ID, SegSample

DEFAULT_FILL = (128 / 255.0, 128 / 255.0, 128 / 255.0)
DEFAULT_ZOOM_RANGE = (0.8, 1.2)
DEFAULT_ROT_RANGE_DEG = (-15.0, 15.0)


class ExtractionError(ValueError):
    """Requested class has no pixels in the sample."""


class AugmentationError(RuntimeError):
    """An affine draw pushed the whole object out of frame."""


class NotImplementedMixing(NotImplementedError):
    """Config selected a mixing/fill strategy that is intentionally stubbed."""


@dataclass(frozen=True)
class ObjectPatch:
    """Masked pixels of one object on its originating canvas.

    `mask` is the pasted region; for patch-kind entries it is the dilated
    object plus context ring while `label_mask` marks the actual object
    pixels (None means they coincide).
    """

    pixels: np.ndarray  # (H, W, 3) float32, zero outside mask
    mask: np.ndarray  # (H, W) bool
    class_id: int
    source_id: str
    bbox: tuple[int, int, int, int]  # (top, bottom, left, right), half-open
    label_mask: np.ndarray | None = None

    @property
    def object_mask(self) -> np.ndarray:
        return self.mask if self.label_mask is None else self.label_mask


def _tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def extract_object(
    sample: SegSample, class_id: int, dilate_radius: int = 0
) -> ObjectPatch:
    """Cut the class mask (optionally dilated by `dilate_radius` pixels) out
    of a sample; pixels outside the mask are zeroed."""
    obj_mask = sample.labels == class_id
    if not obj_mask.any():
        raise ExtractionError(f"class {class_id} absent from sample {sample.id}")
    if class_id in (BACKGROUND_ID, IGNORE_ID):
        raise ExtractionError(f"cannot extract reserved class {class_id}")
    if dilate_radius > 0:
        k = 2 * dilate_radius + 1
        kernel = np.ones((k, k), dtype=np.uint8)
        mask = cv2.dilate(obj_mask.astype(np.uint8), kernel).astype(bool)
        label_mask = obj_mask
    else:
        mask = obj_mask
        label_mask = None
    pixels = np.where(mask[..., None], sample.image, 0.0).astype(np.float32)
    return ObjectPatch(
        pixels=pixels,
        mask=mask,
        class_id=int(class_id),
        source_id=sample.id,
        bbox=_tight_bbox(mask),
        label_mask=label_mask,
    )


# ---------------------------------------------------------------------------
# Memory store
# ---------------------------------------------------------------------------

MEMORY_KINDS = ("image", "object", "patch")


@dataclass
class MemoryStore:
    """Budgeted per-class rehearsal memory. Never evicts previous classes."""

    kind: str
    budget_per_class: int
    seed: int
    objects: dict[int, list[ObjectPatch]]
    images: dict[int, list[SegSample]]

    @classmethod
    def empty(cls, kind: str, budget_per_class: int, seed: int) -> "MemoryStore":
        if kind not in MEMORY_KINDS:
            raise ContractError(f"unknown memory kind {kind!r}")
        return cls(kind=kind, budget_per_class=budget_per_class, seed=seed,
                   objects={}, images={})

    @property
    def classes(self) -> list[int]:
        src = self.images if self.kind == "image" else self.objects
        return sorted(src)

    def total_entries(self) -> int:
        src = self.images if self.kind == "image" else self.objects
        return sum(len(v) for v in src.values())

    def is_empty(self) -> bool:
        return self.total_entries() == 0


def update_memory(
    store: MemoryStore,
    step_samples: Sequence[SegSample],
    new_classes: Sequence[int],
    step_index: int,
    dilate_radius: int = 8,
) -> MemoryStore:
    """Add up to the per-class budget of randomly selected entries for each
    new class. Selection is seeded by (store seed, step); image-kind entries
    stay unique across classes."""
    m = store.budget_per_class
    rng = np.random.default_rng([store.seed, step_index])
    stored_ids = {s.id for lst in store.images.values() for s in lst}
    for c in sorted(int(c) for c in new_classes):
        candidates = [s for s in step_samples if c in s.present_classes]
        if store.kind == "image":
            candidates = [s for s in candidates if s.id not in stored_ids]
        if not candidates:
            warnings.warn(f"memory: no candidates for class {c}, stored empty")
            if store.kind == "image":
                store.images.setdefault(c, [])
            else:
                store.objects.setdefault(c, [])
            continue
        order = rng.permutation(len(candidates))[: min(m, len(candidates))]
        picked = [candidates[i] for i in order]
        if store.kind == "image":
            store.images.setdefault(c, []).extend(picked)
            stored_ids.update(s.id for s in picked)
        else:
            radius = dilate_radius if store.kind == "patch" else 0
            store.objects.setdefault(c, []).extend(
                extract_object(s, c, dilate_radius=radius) for s in picked
            )
    return store


# ---------------------------------------------------------------------------
# Affine augmentation, pasting, erasing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineParams:
    """Zoom and in-plane rotation about the patch center; no translation."""

    z: float
    alpha_rot: float  # radians

    def __post_init__(self):
        if self.z <= 0:
            raise ContractError(f"zoom must be > 0, got {self.z}")


def draw_affine_params(
    rng: np.random.Generator,
    zoom_range: tuple[float, float] = DEFAULT_ZOOM_RANGE,
    rot_range_deg: tuple[float, float] = DEFAULT_ROT_RANGE_DEG,
) -> AffineParams:
    z = float(rng.uniform(*zoom_range))
    a = float(np.deg2rad(rng.uniform(*rot_range_deg)))
    return AffineParams(z=z, alpha_rot=a)


def _affine_matrix(params: AffineParams, center_xy: tuple[float, float]) -> np.ndarray:
    """2x3 forward matrix: zoom+rotation about `center_xy` (x, y) order."""
    z, a = params.z, params.alpha_rot
    lin = np.array(
        [[z * np.cos(a), z * np.sin(a)], [-z * np.sin(a), z * np.cos(a)]],
        dtype=np.float64,
    )
    c = np.asarray(center_xy, dtype=np.float64)
    offset = c - lin @ c
    return np.hstack([lin, offset[:, None]])


def affine_augment(patch: ObjectPatch, params: AffineParams) -> ObjectPatch:
    """Zoom/rotate a patch about its bbox center on its own canvas.

    Pixels are resampled bilinearly, masks nearest-neighbor; anything pushed
    outside the canvas is dropped. Raises AugmentationError when nothing of
    the mask survives (callers resample the parameters).
    """
    top, bottom, left, right = patch.bbox
    center = ((left + right - 1) / 2.0, (top + bottom - 1) / 2.0)  # (x, y)
    mat = _affine_matrix(params, center)
    h, w = patch.mask.shape
    new_pixels = cv2.warpAffine(
        patch.pixels, mat, (w, h), flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT, borderValue=0.0,
    )
    new_mask = cv2.warpAffine(
        patch.mask.astype(np.uint8), mat, (w, h), flags=cv2.INTER_NEAREST,
        borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    ).astype(bool)
    if not new_mask.any():
        raise AugmentationError("transform left no mask pixels in frame")
    new_label_mask = None
    if patch.label_mask is not None:
        new_label_mask = cv2.warpAffine(
            patch.label_mask.astype(np.uint8), mat, (w, h), flags=cv2.INTER_NEAREST,
            borderMode=cv2.BORDER_CONSTANT, borderValue=0,
        ).astype(bool)
        new_label_mask &= new_mask
        if not new_label_mask.any():
            raise AugmentationError("transform left no object pixels in frame")
    new_pixels = np.where(new_mask[..., None], new_pixels, 0.0).astype(np.float32)
    return replace(
        patch,
        pixels=new_pixels,
        mask=new_mask,
        bbox=_tight_bbox(new_mask),
        label_mask=new_label_mask,
    )


def _fit_to_canvas(patch: ObjectPatch, hw: tuple[int, int]) -> ObjectPatch:
    """Rescale the patch canvas to the destination resolution, keeping the
    object at its original normalized position."""
    h, w = hw
    if patch.mask.shape == (h, w):
        return patch
    pixels = cv2.resize(patch.pixels, (w, h), interpolation=cv2.INTER_LINEAR)
    mask = cv2.resize(
        patch.mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST
    ).astype(bool)
    if not mask.any():
        raise AugmentationError("patch vanished when rescaled to destination")
    label_mask = None
    if patch.label_mask is not None:
        label_mask = cv2.resize(
            patch.label_mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST
        ).astype(bool) & mask
    pixels = np.where(mask[..., None], pixels, 0.0).astype(np.float32)
    return replace(patch, pixels=pixels, mask=mask, bbox=_tight_bbox(mask),
                   label_mask=label_mask)


def paste_object(dest: SegSample, patch: ObjectPatch) -> SegSample:
    """Overlay the patch onto a sample: pasted pixels replace the image under
    the mask, labels become the patch class under the object mask (and
    background under any context ring)."""
    if dest.image.ndim != 3 or patch.pixels.ndim != 3 \
            or dest.image.shape[2] != patch.pixels.shape[2]:
        raise ContractError("destination and patch channel counts differ")
    patch = _fit_to_canvas(patch, dest.image.shape[:2])
    image = np.where(patch.mask[..., None], patch.pixels, dest.image)
    labels = dest.labels.copy()
    labels[patch.mask] = BACKGROUND_ID
    labels[patch.object_mask] = patch.class_id
    return SegSample(image=image.astype(np.float32), labels=labels, id=dest.id)


def selective_erase(
    sample: SegSample,
    pasted_mask: np.ndarray,
    erase_policy: str = "foreground",
    fill: tuple[float, float, float] = DEFAULT_FILL,
) -> SegSample:
    """Replace pixels outside the pasted region by a constant fill and mark
    them ignore. Policy "all" erases everything else; "foreground" erases
    only labeled non-background pixels (pseudo-completed labels included)."""
    if erase_policy not in ("all", "foreground"):
        raise ContractError(f"unknown erase policy {erase_policy!r}")
    if erase_policy == "all":
        region = np.ones_like(pasted_mask, dtype=bool)
    else:
        region = (sample.labels != BACKGROUND_ID) & (sample.labels != IGNORE_ID)
    region = region & ~pasted_mask
    color = np.asarray(fill, dtype=np.float32)
    image = np.where(region[..., None], color, sample.image).astype(np.float32)
    labels = sample.labels.copy()
    labels[region] = IGNORE_ID
    return SegSample(image=image, labels=labels, id=sample.id)


# ---------------------------------------------------------------------------
# Disk round-trip
# ---------------------------------------------------------------------------


def _save_png(arr8: np.ndarray, path: Path, mode: str) -> int:
    Image.fromarray(arr8, mode=mode).save(path, optimize=True)
    return path.stat().st_size


def save_memory(store: MemoryStore, out_dir: str | Path) -> dict:
    """Write the store as per-class PNG files plus a manifest; returns the
    manifest (which records per-class counts and byte totals)."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries: dict[str, list[dict]] = {}
    per_class_counts: dict[str, int] = {}
    total_bytes = 0
    classes = store.classes
    for c in classes:
        cdir = root / str(c)
        cdir.mkdir(exist_ok=True)
        recs = []
        if store.kind == "image":
            for n, s in enumerate(store.images.get(c, [])):
                img8 = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
                b = _save_png(img8, cdir / f"{n}.png", "RGB")
                b += _save_png(
                    s.labels.astype(np.uint8), cdir / f"{n}.labels.png", "L"
                )
                total_bytes += b
                recs.append({"n": n, "id": s.id, "bytes": b})
        else:
            for n, p in enumerate(store.objects.get(c, [])):
                t, btm, l, r = p.bbox
                img8 = np.clip(np.round(p.pixels[t:btm, l:r] * 255.0), 0, 255).astype(np.uint8)
                b = _save_png(img8, cdir / f"{n}.png", "RGB")
                b += _save_png(
                    (p.mask[t:btm, l:r] * 255).astype(np.uint8),
                    cdir / f"{n}.mask.png", "L",
                )
                rec = {
                    "n": n,
                    "source_id": p.source_id,
                    "bbox": list(p.bbox),
                    "canvas": list(p.mask.shape),
                }
                if p.label_mask is not None:
                    b += _save_png(
                        (p.label_mask[t:btm, l:r] * 255).astype(np.uint8),
                        cdir / f"{n}.label_mask.png", "L",
                    )
                    rec["has_label_mask"] = True
                total_bytes += b
                rec["bytes"] = b
                recs.append(rec)
        entries[str(c)] = recs
        per_class_counts[str(c)] = len(recs)
    manifest = {
        "kind": store.kind,
        "m": store.budget_per_class,
        "seed": store.seed,
        "per_class_counts": per_class_counts,
        "total_bytes": total_bytes,
        "entries": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_memory(mem_dir: str | Path) -> MemoryStore:
    root = Path(mem_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
        kind = manifest["kind"]
        store = MemoryStore.empty(kind, manifest["m"], manifest["seed"])
        entry_map = manifest["entries"]
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise ContractError(f"corrupt memory manifest under {root}: {e}") from e
    for cs, recs in entry_map.items():
        c = int(cs)
        if kind == "image":
            lst = []
            for rec in recs:
                img = np.asarray(
                    Image.open(root / cs / f"{rec['n']}.png").convert("RGB"),
                    dtype=np.uint8,
                )
                labels = np.asarray(
                    Image.open(root / cs / f"{rec['n']}.labels.png"), dtype=np.int64
                )
                lst.append(SegSample(
                    image=img.astype(np.float32) / 255.0, labels=labels, id=rec["id"]
                ))
            store.images[c] = lst
        else:
            lst = []
            for rec in recs:
                t, btm, l, r = rec["bbox"]
                ch, cw = rec["canvas"]
                crop = np.asarray(
                    Image.open(root / cs / f"{rec['n']}.png").convert("RGB"),
                    dtype=np.uint8,
                ).astype(np.float32) / 255.0
                mcrop = np.asarray(
                    Image.open(root / cs / f"{rec['n']}.mask.png"), dtype=np.uint8
                ) > 0
                pixels = np.zeros((ch, cw, 3), dtype=np.float32)
                mask = np.zeros((ch, cw), dtype=bool)
                pixels[t:btm, l:r] = crop
                mask[t:btm, l:r] = mcrop
                pixels = np.where(mask[..., None], pixels, 0.0).astype(np.float32)
                label_mask = None
                if rec.get("has_label_mask"):
                    lcrop = np.asarray(
                        Image.open(root / cs / f"{rec['n']}.label_mask.png"),
                        dtype=np.uint8,
                    ) > 0
                    label_mask = np.zeros((ch, cw), dtype=bool)
                    label_mask[t:btm, l:r] = lcrop
                lst.append(ObjectPatch(
                    pixels=pixels, mask=mask, class_id=c,
                    source_id=rec["source_id"], bbox=tuple(rec["bbox"]),
                    label_mask=label_mask,
                ))
            store.objects[c] = lst
    return store


# ---------------------------------------------------------------------------
# Batch augmentation
# ---------------------------------------------------------------------------


def rehearse_batch(
    batch: Sequence[SegSample],
    store: MemoryStore,
    rng: np.random.Generator,
    mixing: str = "paste",
    erase_policy: str = "foreground",
    fill: tuple[float, float, float] = DEFAULT_FILL,
    paste_prob: float = 1.0,
    objects_per_image: int = 1,
    zoom_range: tuple[float, float] = DEFAULT_ZOOM_RANGE,
    rot_range_deg: tuple[float, float] = DEFAULT_ROT_RANGE_DEG,
) -> list[SegSample]:
    """Extend a batch with rehearsal data.

    Image-kind memory appends stored samples (labels to be completed by
    pseudo-labeling downstream). Object/patch-kind memory appends, for each
    current sample that wins the paste draw, a copy with an augmented stored
    object pasted in and the surrounding foreground erased.
    """
    if store.is_empty():
        return list(batch)
    if mixing != "paste" and store.kind != "image":
        raise NotImplementedMixing(
            f"mixing={mixing!r} is a recognized but unimplemented strategy; use 'paste'"
        )

    out = list(batch)
    if store.kind == "image":
        pool = [s for lst in store.images.values() for s in lst]
        take = min(len(batch), len(pool))
        for i in rng.permutation(len(pool))[:take]:
            out.append(pool[i])
        return out

    class_pool = [c for c in store.classes if store.objects.get(c)]
    if not class_pool:
        return out
    for sample in batch:
        if rng.random() > paste_prob:
            continue
        pasted = sample
        union_mask = np.zeros_like(sample.labels, dtype=bool)
        ok = False
        for _ in range(objects_per_image):
            c = int(class_pool[rng.integers(len(class_pool))])
            entries = store.objects[c]
            patch = entries[int(rng.integers(len(entries)))]
            for _attempt in range(5):
                params = draw_affine_params(rng, zoom_range, rot_range_deg)
                try:
                    aug = affine_augment(patch, params)
                except AugmentationError:
                    continue
                try:
                    aug = _fit_to_canvas(aug, sample.image.shape[:2])
                except AugmentationError:
                    continue
                pasted = paste_object(pasted, aug)
                union_mask |= aug.mask
                ok = True
                break
        if not ok:
            continue
        erased = selective_erase(pasted, union_mask, erase_policy, fill)
        out.append(SegSample(image=erased.image, labels=erased.labels,
                             id=f"{sample.id}+rehearsal"))
    return out
