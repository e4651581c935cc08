"""Continual training loop: step views, teacher distillation, pseudo-labeled
classification, rehearsal, SGD schedule, and per-step evaluation."""

from __future__ import annotations

import json
import math
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import distill, pseudo, rehearsal
from .config import RunConfig
from .errors import ConfigError, TrainingDiverged
from .heads import freeze_after_first_task
from .metrics import RunReport, StepMetrics, confusion_accumulate, miou_from_confusion, per_class_iou, emit_report
from .protocol import (
    BACKGROUND_ID,
    IGNORE_ID,
    SegSample,
    StepView,
    TaskSequence,
    build_task_sequence,
    generate_synthetic_dataset,
    load_dataset,
    make_eval_view,
    make_step_view,
)
from .pseudo import ThresholdTable
from .seeding import numpy_rng, substream, torch_generator
from .segnet import ArchSpec, SegNet, clone_frozen, extend_classifier, model_checksum, save_checkpoint


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array -> (3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def labels_to_tensor(labels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(labels)).long()


def stack_batch(samples: Sequence[SegSample]) -> tuple[torch.Tensor, torch.Tensor]:
    imgs = torch.stack([image_to_tensor(s.image) for s in samples])
    labs = torch.stack([labels_to_tensor(s.labels) for s in samples])
    return imgs, labs


def plain_ce_loss(log_probs: torch.Tensor, labels: torch.Tensor,
                  class_ids: Sequence[int]) -> torch.Tensor:
    """Cross-entropy with 255 ignored, over one image's (K, H, W) log-probs."""
    max_id = max(int(c) for c in class_ids)
    lut = torch.full((256,), -1, dtype=torch.int64)
    for k, c in enumerate(class_ids):
        lut[int(c)] = k
    valid = labels != IGNORE_ID
    if not bool(valid.any()):
        return log_probs.sum() * 0.0
    idx = lut[labels[valid]]
    picked = log_probs.permute(1, 2, 0)[valid].gather(1, idx[:, None]).squeeze(1)
    return -picked.mean()


def _prepare_data(cfg: RunConfig) -> tuple[list[SegSample], list[SegSample], list[int]]:
    """Returns (train samples, eval samples, class universe)."""
    p = cfg.protocol
    if p.data_dir:
        train = load_dataset(Path(p.data_dir) / "train")
        test = load_dataset(Path(p.data_dir) / "test")
        universe = sorted({c for s in train for c in s.present_classes}
                          | {c for s in test for c in s.present_classes})
    else:
        train = generate_synthetic_dataset(
            p.n_train, p.image_size, p.n_classes, substream(cfg.seed, "data-train"),
            id_prefix="tr",
        )
        test = generate_synthetic_dataset(
            p.n_eval, p.image_size, p.n_classes, substream(cfg.seed, "data-eval"),
            id_prefix="te",
        )
        universe = list(range(1, p.n_classes + 1))
    if p.class_order is not None:
        if sorted(p.class_order) != sorted(universe):
            raise ConfigError("protocol.class_order must permute the class universe")
        universe = list(p.class_order)
    return train, test, universe


def _teacher_prob_stream(teacher: SegNet, view: StepView, batch_size: int):
    """Yield one (K, H, W) probability map per training image, batched inside."""
    with torch.no_grad():
        for at in range(0, len(view.samples), batch_size):
            chunk = view.samples[at : at + batch_size]
            imgs, _ = stack_batch(chunk)
            _, probs = teacher(imgs)
            for b in range(probs.shape[0]):
                yield probs[b]


def _compute_or_load_thresholds(
    teacher: SegNet, view: StepView, cfg: RunConfig, out: Path, t: int
) -> ThresholdTable:
    """Median-entropy thresholds for step t, cached on disk keyed by the
    teacher checksum."""
    cache = out / f"thresholds_step{t}.json"
    checksum = model_checksum(teacher)
    if cache.exists():
        try:
            payload = json.loads(cache.read_text())
            if payload.get("teacher_checksum") == checksum:
                return ThresholdTable(
                    tau={int(c): float(v) for c, v in payload["tau"].items()},
                    tau_max=payload["tau_max"],
                )
        except (json.JSONDecodeError, KeyError):
            pass
    table = pseudo.compute_class_thresholds(
        _teacher_prob_stream(teacher, view, cfg.optim.batch_size),
        teacher.class_ids,
        tau_max=cfg.pseudo.tau_max,
    )
    payload = {
        "tau": {str(c): (None if math.isinf(v) else v) for c, v in table.tau.items()},
        "tau_max": table.tau_max,
        "teacher_checksum": checksum,
        "step": t,
    }
    cache.write_text(json.dumps(payload, indent=2, default=float))
    return table


def _collect_imprint_features(
    model: SegNet, view: StepView, new_classes: Sequence[int], batch_size: int,
    max_pixels_per_class: int = 2048,
) -> dict[int, torch.Tensor]:
    """Embedding vectors of new-class pixels under the current trunk (eval
    mode), used to initialize the new cosine weights."""
    was_training = model.training
    model.eval()
    buckets: dict[int, list[torch.Tensor]] = {int(c): [] for c in new_classes}
    counts = {int(c): 0 for c in new_classes}
    with torch.no_grad():
        for at in range(0, len(view.samples), batch_size):
            chunk = view.samples[at : at + batch_size]
            imgs, labs = stack_batch(chunk)
            _, h = model.embed(imgs)  # (B, ch, H, W)
            hm = h.permute(0, 2, 3, 1)  # (B, H, W, ch)
            for c in new_classes:
                if counts[int(c)] >= max_pixels_per_class:
                    continue
                sel = labs == int(c)
                if bool(sel.any()):
                    vecs = hm[sel]
                    room = max_pixels_per_class - counts[int(c)]
                    vecs = vecs[:room]
                    buckets[int(c)].append(vecs)
                    counts[int(c)] += vecs.shape[0]
            if all(counts[c] >= max_pixels_per_class for c in counts):
                break
    if was_training:
        model.train()
    return {c: torch.cat(v) for c, v in buckets.items() if v}


def _rehearsal_kwargs(cfg: RunConfig) -> dict:
    r = cfg.rehearsal
    return dict(
        mixing=r.mixing,
        erase_policy=r.erase,
        fill=tuple(r.fill),
        paste_prob=r.paste_prob,
        objects_per_image=r.objects_per_image,
        zoom_range=(r.zoom_min, r.zoom_max),
        rot_range_deg=(-r.rot_deg, r.rot_deg),
    )


def _classification_loss(
    log_probs: torch.Tensor,
    labels: torch.Tensor,
    sample_ids: Sequence[str],
    teacher_probs: torch.Tensor | None,
    thresholds: ThresholdTable | None,
    teacher_ids: Sequence[int] | None,
    model_ids: Sequence[int],
    cfg: RunConfig,
    full_gt_by_id: dict[str, np.ndarray] | None,
    stats: dict,
) -> torch.Tensor:
    """Mean of per-image classification losses.

    When pseudo-labeling is active, original images get uncertainty-filtered
    targets with the per-image nu weight; rehearsal-pasted images (whose
    labels were already completed during augmentation) use the plain ignore-
    aware cross-entropy.
    """
    terms = []
    for b, sid in enumerate(sample_ids):
        use_pseudo = (
            teacher_probs is not None
            and thresholds is not None
            and not sid.endswith("+rehearsal")
        )
        if use_pseudo:
            pt = pseudo.build_pseudo_target(
                labels[b], teacher_probs[b], teacher_ids, thresholds
            )
            if cfg.pseudo.oracle and full_gt_by_id is not None and sid in full_gt_by_id:
                pt = pseudo.apply_pseudo_oracle(
                    pt, labels[b], labels_to_tensor(full_gt_by_id[sid])
                )
            stats["nu_sum"] += pt.nu
            stats["nu_count"] += 1
            terms.append(pseudo.pseudo_ce_loss(log_probs[b], pt, model_ids))
        else:
            terms.append(plain_ce_loss(log_probs[b], labels[b], model_ids))
    return torch.stack(terms).mean()


def run_continual(cfg: RunConfig, progress: bool = False) -> RunReport:
    """Run the whole continual protocol described by `cfg` and return the
    report (also written to cfg.output_dir together with per-step
    checkpoints)."""
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(substream(cfg.seed, "torch-global"))
    train, test, universe = _prepare_data(cfg)
    seq = build_task_sequence(universe, cfg.protocol.split)
    full_gt_by_id = {s.id: s.labels for s in train} if cfg.pseudo.oracle else None

    arch = ArchSpec(
        norm="renorm" if cfg.heads.renorm else "batch",
        cosine=cfg.heads.cosine,
        renorm_momentum=cfg.heads.renorm_momentum,
    )
    model = SegNet([BACKGROUND_ID, *seq.current_classes(1)], arch)

    store = None
    if cfg.rehearsal.kind != "none":
        store = rehearsal.MemoryStore.empty(
            cfg.rehearsal.kind, cfg.rehearsal.m, substream(cfg.seed, "memory")
        )

    report = RunReport(steps=[], config=cfg.to_flat(),
                       debug={"teacher_forwards": 0, "pseudo_targets": 0,
                              "distill_batches": 0, "nu_mean_per_step": [],
                              "loss_log": []})
    augment_rng = numpy_rng(cfg.seed, "augment")

    for t in range(1, seq.num_steps + 1):
        t0 = time.perf_counter()
        view = make_step_view(train, seq, t)
        if not view.samples:
            raise ConfigError(f"step {t} has no training samples")

        teacher = None
        thresholds = None
        if t > 1:
            teacher = clone_frozen(model)
            if cfg.pseudo.enabled:
                thresholds = _compute_or_load_thresholds(teacher, view, cfg, out, t)
            imprint_feats = None
            if cfg.heads.imprint:
                imprint_feats = _collect_imprint_features(
                    model, view, seq.current_classes(t), cfg.optim.batch_size
                )
            extend_classifier(
                model,
                seq.current_classes(t),
                imprint_features=imprint_feats if cfg.heads.imprint else None,
                generator=torch_generator(cfg.seed, f"extend-{t}"),
            )
            if cfg.heads.freeze_after_first and t == 2:
                freeze_after_first_task(model)

        stats = _train_one_step(cfg, model, teacher, thresholds, view, store, seq, t,
                                augment_rng, full_gt_by_id, report)

        if store is not None:
            rehearsal.update_memory(
                store, view.samples, seq.current_classes(t), t,
                dilate_radius=cfg.rehearsal.dilate_radius,
            )

        step_metrics = evaluate_step(model, test, seq, t, cfg.optim.batch_size)
        report.steps.append(step_metrics)
        report.debug["nu_mean_per_step"].append(
            stats["nu_sum"] / stats["nu_count"] if stats["nu_count"] else None
        )
        report.wall_clock.append(time.perf_counter() - t0)
        save_checkpoint(model, out / f"step{t}.ckpt")
        if progress:
            print(f"[step {t}/{seq.num_steps}] miou_all={step_metrics.miou_all:.4f} "
                  f"({report.wall_clock[-1]:.1f}s)")

    if store is not None:
        manifest = rehearsal.save_memory(store, out / "memory")
        report.memory_bytes = manifest["total_bytes"]
    emit_report(report, out)
    return report


def _train_one_step(
    cfg: RunConfig,
    model: SegNet,
    teacher: SegNet | None,
    thresholds: ThresholdTable | None,
    view: StepView,
    store,
    seq: TaskSequence,
    t: int,
    augment_rng: np.random.Generator,
    full_gt_by_id: dict[str, np.ndarray] | None,
    report: RunReport,
) -> dict:
    opt = torch.optim.SGD(
        model.parameters(),
        lr=cfg.optim.lr_first if t == 1 else cfg.optim.lr_later,
        momentum=cfg.optim.momentum,
        nesterov=cfg.optim.nesterov,
    )
    scheduler = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=cfg.optim.decay)
    epochs = cfg.optim.epochs_first if t == 1 else cfg.optim.epochs_later
    shuffle_rng = numpy_rng(cfg.seed, f"shuffle-{t}")
    bs = cfg.optim.batch_size
    teacher_ids = teacher.class_ids if teacher is not None else None

    n_seen = len(seq.seen_classes(t))
    n_current = len(seq.current_classes(t))
    if cfg.distill.adaptive and t > 1:
        lam_feat = distill.adaptive_lambda(cfg.distill.lambda_features, n_seen, n_current)
        lam_logit = distill.adaptive_lambda(cfg.distill.lambda_logits, n_seen, n_current)
    else:
        lam_feat, lam_logit = cfg.distill.lambda_features, cfg.distill.lambda_logits

    stats = {"nu_sum": 0.0, "nu_count": 0}
    model.train()
    for epoch in range(epochs):
        order = shuffle_rng.permutation(len(view.samples))
        for at in range(0, len(order), bs):
            batch = [view.samples[i] for i in order[at : at + bs]]
            if len(batch) < 2:
                continue  # batch statistics need >= 2 samples
            if store is not None and t > 1 and not store.is_empty():
                batch = rehearsal.rehearse_batch(
                    batch, store, augment_rng, **_rehearsal_kwargs(cfg)
                )
            imgs, labs = stack_batch(batch)
            feats, probs = model(imgs)
            log_probs = F.log_softmax(feats[-1], dim=1)

            teacher_probs = None
            teacher_feats = None
            if teacher is not None and (cfg.pseudo.enabled or cfg.distill.enabled):
                with torch.no_grad():
                    teacher_feats, teacher_probs = teacher(imgs)
                report.debug["teacher_forwards"] += 1

            cls_loss = _classification_loss(
                log_probs, labs, [s.id for s in batch],
                teacher_probs if cfg.pseudo.enabled else None,
                thresholds, teacher_ids, model.class_ids, cfg,
                full_gt_by_id, stats,
            )
            if cfg.pseudo.enabled and teacher is not None:
                report.debug["pseudo_targets"] += len(batch)

            feat_term = torch.zeros((), dtype=cls_loss.dtype)
            logit_term = torch.zeros((), dtype=cls_loss.dtype)
            if teacher is not None and cfg.distill.enabled:
                k_old = len(teacher_ids)
                feat_term = distill.local_pod_loss(
                    teacher_feats[:-1], feats[:-1],
                    grid_counts=cfg.distill.grid_counts,
                    normalize=cfg.distill.normalize,
                    square_preact=cfg.distill.square_preact,
                )
                logit_term = distill.local_pod_loss(
                    [teacher_feats[-1]], [feats[-1][:, :k_old]],
                    grid_counts=cfg.distill.grid_counts,
                    normalize=cfg.distill.normalize,
                    square_preact=False,
                )
                report.debug["distill_batches"] += 1

            loss = cls_loss + lam_feat * feat_term + lam_logit * logit_term
            if not torch.isfinite(loss):
                _dump_divergence(cfg, t, epoch, at, cls_loss, feat_term, logit_term)
                raise TrainingDiverged(f"non-finite loss at step {t} epoch {epoch}")

            if len(report.debug["loss_log"]) < 10:
                report.debug["loss_log"].append({
                    "step": t, "epoch": epoch, "batch_start": int(at),
                    "cls": float(cls_loss.detach()), "feat": float(feat_term.detach()),
                    "logit": float(logit_term.detach()),
                    "lambda_feat": lam_feat, "lambda_logit": lam_logit,
                    "total": float(loss.detach()),
                })

            opt.zero_grad()
            loss.backward()
            if cfg.optim.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
            opt.step()
        scheduler.step()
    model.eval()
    return stats


def _dump_divergence(cfg, t, epoch, at, cls_loss, feat_term, logit_term) -> None:
    snap = {
        "step": t, "epoch": epoch, "batch_start": int(at),
        "cls": float(cls_loss.detach()), "feat": float(feat_term.detach()),
        "logit": float(logit_term.detach()),
    }
    Path(cfg.output_dir, "divergence.json").write_text(json.dumps(snap, indent=2))


def evaluate_step(
    model: SegNet,
    test: Sequence[SegSample],
    seq: TaskSequence,
    t: int,
    batch_size: int = 8,
) -> StepMetrics:
    """Evaluate on the step-t view of the test set over all seen classes."""
    view = make_eval_view(test, seq, t)
    ids = model.class_ids
    n = len(ids)
    lut = np.full(256, -1, dtype=np.int64)
    for k, c in enumerate(ids):
        lut[c] = k
    lut[IGNORE_ID] = IGNORE_ID  # keep ignore out of the matrix

    model.eval()
    conf = np.zeros((n, n), dtype=np.int64)
    with torch.no_grad():
        for at in range(0, len(view.samples), batch_size):
            chunk = view.samples[at : at + batch_size]
            imgs, labs = stack_batch(chunk)
            _, probs = model(imgs)
            pred = probs.argmax(dim=1).cpu().numpy()
            gt_idx = lut[np.stack([s.labels for s in chunk])]
            conf = confusion_accumulate(pred.reshape(-1), gt_idx.reshape(-1), n, conf)

    initial = [lut[c] for c in seq.current_classes(1)]
    increment = [lut[c] for c in seq.seen_classes(t) if c not in seq.current_classes(1)]
    all_idx = list(range(n))
    id_iou = {ids[k]: v for k, v in per_class_iou(conf).items()}
    return StepMetrics(
        step=t,
        per_class=id_iou,
        miou_initial=miou_from_confusion(conf, initial),
        miou_increment=miou_from_confusion(conf, increment) if increment else None,
        miou_all=miou_from_confusion(conf, all_idx),
        confusion=conf,
    )
