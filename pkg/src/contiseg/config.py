"""Run configuration: dataclasses, method presets, and flat key-value files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

PRESETS = ("finetune", "plop", "ploplong")
SCALES = ("desk", "paper")


@dataclass
class ProtocolConfig:
    split: str = "4-1"
    data_dir: str | None = None  # load from disk when set, else synthetic
    n_classes: int = 6
    n_train: int = 120
    n_eval: int = 60
    image_size: int = 64
    class_order: list[int] | None = None  # explicit permutation of class ids


@dataclass
class OptimConfig:
    lr_first: float = 1e-2
    lr_later: float = 1e-3
    decay: float = 0.9  # per-epoch multiplicative lr decay
    momentum: float = 0.9
    nesterov: bool = True
    epochs_first: int = 20
    epochs_later: int = 10
    batch_size: int = 8
    grad_clip: float | None = None


@dataclass
class DistillConfig:
    enabled: bool = False
    grid_counts: list[int] = field(default_factory=lambda: [1, 2, 4])
    lambda_features: float = 1e-2
    lambda_logits: float = 5e-4
    normalize: bool = False
    square_preact: bool = True
    adaptive: bool = True


@dataclass
class PseudoConfig:
    enabled: bool = False
    tau_max: float | None = None
    oracle: bool = False


@dataclass
class HeadsConfig:
    cosine: bool = False
    imprint: bool = False
    renorm: bool = False
    freeze_after_first: bool = False
    renorm_momentum: float = 0.1


@dataclass
class RehearsalConfig:
    kind: str = "none"  # none | image | object | patch
    m: int = 10
    erase: str = "foreground"  # foreground | all
    mixing: str = "paste"  # paste | mixup (stub)
    fill_mode: str = "constant"  # constant | inpaint (stub) | texture (stub)
    fill: list[float] = field(default_factory=lambda: [128 / 255] * 3)
    dilate_radius: int = 8
    paste_prob: float = 1.0
    objects_per_image: int = 1
    zoom_min: float = 0.8
    zoom_max: float = 1.2
    rot_deg: float = 15.0


@dataclass
class RunConfig:
    preset: str = "finetune"
    scale: str = "desk"
    seed: int = 0
    output_dir: str = "runs/out"
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    rehearsal: RehearsalConfig = field(default_factory=RehearsalConfig)

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}, expected one of {PRESETS}")
        if self.scale not in SCALES:
            raise ConfigError(f"unknown scale {self.scale!r}, expected one of {SCALES}")
        if self.heads.imprint and not self.heads.cosine:
            raise ConfigError("heads.imprint requires heads.cosine")
        if self.rehearsal.kind not in ("none", "image", "object", "patch"):
            raise ConfigError(f"unknown rehearsal.kind {self.rehearsal.kind!r}")
        if self.rehearsal.erase not in ("foreground", "all"):
            raise ConfigError(f"unknown rehearsal.erase {self.rehearsal.erase!r}")
        if self.rehearsal.mixing != "paste":
            raise ConfigError(
                f"rehearsal.mixing={self.rehearsal.mixing!r} is recognized but not "
                "implemented (pasting was retained); use 'paste'"
            )
        if self.rehearsal.fill_mode != "constant":
            raise ConfigError(
                f"rehearsal.fill_mode={self.rehearsal.fill_mode!r} is recognized but "
                "not implemented; use 'constant'"
            )
        if self.optim.batch_size < 2:
            raise ConfigError("optim.batch_size must be >= 2 (batch statistics)")
        return self

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {
            "preset": self.preset,
            "scale": self.scale,
            "seed": self.seed,
            "output_dir": self.output_dir,
        }
        for section in ("protocol", "optim", "distill", "pseudo", "heads", "rehearsal"):
            sub = getattr(self, section)
            for f in fields(sub):
                flat[f"{section}.{f.name}"] = getattr(sub, f.name)
        return flat


def apply_preset(cfg: RunConfig, preset: str) -> RunConfig:
    """Expand a method preset over a config (deterministic)."""
    cfg.preset = preset
    if preset == "finetune":
        cfg.distill.enabled = False
        cfg.pseudo.enabled = False
        cfg.heads = HeadsConfig()
        cfg.rehearsal.kind = "none"
    elif preset == "plop":
        cfg.distill.enabled = True
        cfg.distill.normalize = False
        cfg.pseudo.enabled = True
        cfg.heads = HeadsConfig()
    elif preset == "ploplong":
        cfg.distill.enabled = True
        cfg.distill.normalize = True
        cfg.pseudo.enabled = True
        cfg.heads = HeadsConfig(
            cosine=True, imprint=True, renorm=True, freeze_after_first=True
        )
        if cfg.optim.grad_clip is None:
            cfg.optim.grad_clip = 1.0
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    return cfg


def apply_scale(cfg: RunConfig, scale: str) -> RunConfig:
    """Desk scale keeps CPU runs in minutes; paper scale mirrors the published
    hyperparameters (batch 24, 512px, 30-epoch steps, capped thresholds)."""
    cfg.scale = scale
    if scale == "desk":
        cfg.optim.batch_size = 8
        cfg.optim.epochs_first = 20
        cfg.optim.epochs_later = 10
        cfg.protocol.image_size = 64
        cfg.pseudo.tau_max = None
    elif scale == "paper":
        cfg.optim.batch_size = 24
        cfg.optim.epochs_first = 30
        cfg.optim.epochs_later = 30
        cfg.protocol.image_size = 512
        cfg.pseudo.tau_max = 1e-3
    else:
        raise ConfigError(f"unknown scale {scale!r}")
    return cfg


def make_config(
    preset: str = "finetune",
    scale: str = "desk",
    overrides: dict[str, Any] | None = None,
    **kwargs: Any,
) -> RunConfig:
    """Build a validated RunConfig: scale first, then preset, then overrides."""
    cfg = RunConfig()
    apply_scale(cfg, scale)
    apply_preset(cfg, preset)
    for k, v in (overrides or {}).items():
        _set_flat(cfg, k, v)
    for k, v in kwargs.items():
        _set_flat(cfg, k, v)
    return cfg.validate()


_SECTIONS = ("protocol", "optim", "distill", "pseudo", "heads", "rehearsal")
_TOP_KEYS = ("preset", "scale", "seed", "output_dir")


def _set_flat(cfg: RunConfig, key: str, value: Any) -> None:
    if key in _TOP_KEYS:
        setattr(cfg, key, value)
        return
    if "." not in key:
        raise ConfigError(f"unknown config key {key!r}")
    section, _, name = key.partition(".")
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section {section!r} in key {key!r}")
    sub = getattr(cfg, section)
    valid = {f.name for f in fields(sub)}
    if name not in valid:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(sub, name, value)


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a flat key-value config document (YAML or JSON)."""
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        doc = json.loads(text)
    else:
        doc = yaml.safe_load(text)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a flat mapping")
    nested = {k for k, v in doc.items() if isinstance(v, dict)}
    if nested:
        raise ConfigError(f"config file must be flat (dotted keys); nested: {sorted(nested)}")
    return doc


def config_from_file(
    path: str | Path,
    preset: str | None = None,
    scale: str | None = None,
    extra: dict[str, Any] | None = None,
) -> RunConfig:
    """Config file plus CLI-style overrides (file's preset/scale honored
    unless overridden)."""
    doc = load_config_file(path)
    file_preset = doc.pop("preset", "finetune")
    file_scale = doc.pop("scale", "desk")
    doc.update(extra or {})
    return make_config(preset or file_preset, scale or file_scale, overrides=doc)
