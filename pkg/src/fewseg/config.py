"""Run configuration: flat dotted-key text format, validation, hashing.

The on-disk format is one ``section.key = value`` pair per line; ``#`` starts
a comment.  Parsing and serialization round-trip exactly (parse -> serialize
-> parse is the identity on the config object).  The schema is versioned via
the ``config_version`` key.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError

CONFIG_VERSION = 1

VALID_DATASETS = ("pascal5i", "coco20i", "synthetic")
VALID_BACKBONES = ("tiny", "resnet50", "resnet101")
VALID_PROTOTYPE_MODES = ("gp", "gp+gp", "gp+lp")
VALID_PRIOR_SOURCES = ("high", "low")


def _key(name: str):
    return field(metadata={"key": name})


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs, validated up front."""

    # dataset
    dataset: str = "synthetic"
    fold: int = 0
    data_root: str = ""
    image_size: int = 64
    synthetic_images: int = 240

    # episode composition
    shots: int = 1
    unlabeled_count: int = 2
    class_agnostic_unlabeled: bool = False

    # model
    backbone: str = "tiny"
    backbone_frozen: bool = False
    backbone_weights: str = ""
    c_merged: int = 256
    c_local: int = 64
    grid_size: int = 4
    se_ratio: int = 4
    prototype_mode: str = "gp+lp"
    channel_attention: bool = True
    prior_interaction_source: str = "high"
    prior_guidance_source: str = "low"

    # attention
    attn_layers: int = 2
    attn_heads: int = 8
    attn_ffn_dim: int = 0  # 0 -> 2 * c_merged

    # unlabeled branch
    unlabeled_guide: bool = True
    unlabeled_loss_weight: float = 0.5
    unlabeled_soft_labels: bool = False
    unlabeled_confidence: float = 0.0
    unlabeled_warmup_fraction: float = 0.0
    cycle_mask: bool = True

    # losses
    aux_enabled: bool = True
    aux_weight: float = 1.0

    # optimizer
    optim_method: str = "sgd"
    learning_rate: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_schedule: str = "poly"
    poly_power: float = 0.9
    iterations: int = 500
    grad_clip: float = 5.0  # max gradient norm; 0 disables clipping
    tail_average_fraction: float = 0.0  # Polyak-average params over the last fraction

    # run mechanics
    seed: int = 0
    val_every: int = 0  # 0 -> no periodic validation
    val_episodes: int = 20
    checkpoint_every: int = 0  # 0 -> only final checkpoint
    out_dir: str = "runs/default"
    config_version: int = CONFIG_VERSION

    # Dotted file keys, one per field.  The mapping is the documented schema.
    _KEYS = {
        "dataset": "dataset.name",
        "fold": "dataset.fold",
        "data_root": "dataset.root",
        "image_size": "dataset.image_size",
        "synthetic_images": "dataset.synthetic_images",
        "shots": "episode.shots",
        "unlabeled_count": "unlabeled.count",
        "class_agnostic_unlabeled": "unlabeled.class_agnostic",
        "backbone": "model.backbone",
        "backbone_frozen": "model.backbone_frozen",
        "backbone_weights": "model.backbone_weights",
        "c_merged": "model.c_merged",
        "c_local": "model.c_local",
        "grid_size": "model.grid_size",
        "se_ratio": "model.se_ratio",
        "prototype_mode": "model.prototype_mode",
        "channel_attention": "model.channel_attention",
        "prior_interaction_source": "prior.interaction_source",
        "prior_guidance_source": "prior.guidance_source",
        "attn_layers": "attention.layers",
        "attn_heads": "attention.heads",
        "attn_ffn_dim": "attention.ffn_dim",
        "unlabeled_guide": "unlabeled.guide",
        "unlabeled_loss_weight": "unlabeled.loss_weight",
        "unlabeled_soft_labels": "unlabeled.soft_labels",
        "unlabeled_confidence": "unlabeled.confidence",
        "unlabeled_warmup_fraction": "unlabeled.warmup_fraction",
        "cycle_mask": "attention.cycle_mask",
        "aux_enabled": "loss.aux_enabled",
        "aux_weight": "loss.aux_weight",
        "optim_method": "optim.method",
        "learning_rate": "optim.learning_rate",
        "momentum": "optim.momentum",
        "weight_decay": "optim.weight_decay",
        "lr_schedule": "optim.lr_schedule",
        "poly_power": "optim.poly_power",
        "iterations": "optim.iterations",
        "grad_clip": "optim.grad_clip",
        "tail_average_fraction": "optim.tail_average_fraction",
        "seed": "run.seed",
        "val_every": "run.val_every",
        "val_episodes": "run.val_episodes",
        "checkpoint_every": "run.checkpoint_every",
        "out_dir": "run.out_dir",
        "config_version": "config_version",
    }

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigurationError(
                f"unsupported config_version {self.config_version}, expected {CONFIG_VERSION}"
            )
        if self.dataset not in VALID_DATASETS:
            raise ConfigurationError(f"unknown dataset {self.dataset!r}")
        if self.backbone not in VALID_BACKBONES:
            raise ConfigurationError(f"unknown backbone {self.backbone!r}")
        if self.prototype_mode not in VALID_PROTOTYPE_MODES:
            raise ConfigurationError(f"unknown prototype_mode {self.prototype_mode!r}")
        if self.prior_interaction_source not in VALID_PRIOR_SOURCES:
            raise ConfigurationError("prior.interaction_source must be high or low")
        if self.prior_guidance_source not in VALID_PRIOR_SOURCES:
            raise ConfigurationError("prior.guidance_source must be high or low")
        if self.shots not in (1, 5):
            raise ConfigurationError(f"episode.shots must be 1 or 5, got {self.shots}")
        if self.unlabeled_count < 0:
            raise ConfigurationError("unlabeled.count must be >= 0")
        if self.unlabeled_loss_weight < 0:
            raise ConfigurationError("unlabeled.loss_weight must be >= 0")
        if not 0.0 <= self.unlabeled_confidence < 1.0:
            raise ConfigurationError("unlabeled.confidence must be in [0, 1)")
        if not 0.0 <= self.unlabeled_warmup_fraction < 1.0:
            raise ConfigurationError("unlabeled.warmup_fraction must be in [0, 1)")
        if self.image_size < 32:
            raise ConfigurationError("dataset.image_size must be >= 32")
        if self.grid_size < 1:
            raise ConfigurationError("model.grid_size must be >= 1")
        if self.c_merged < 1 or self.c_local < 1:
            raise ConfigurationError("channel widths must be positive")
        if self.se_ratio < 1:
            raise ConfigurationError("model.se_ratio must be >= 1")
        if self.attn_layers < 1:
            raise ConfigurationError("attention.layers must be >= 1")
        if self.attn_heads < 1 or self.c_merged % self.attn_heads != 0:
            raise ConfigurationError("attention.heads must divide model.c_merged")
        if self.attn_ffn_dim < 0:
            raise ConfigurationError("attention.ffn_dim must be >= 0")
        if self.optim_method != "sgd":
            raise ConfigurationError(f"unknown optimizer {self.optim_method!r}")
        if self.lr_schedule not in ("poly", "constant"):
            raise ConfigurationError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.learning_rate <= 0:
            raise ConfigurationError("optim.learning_rate must be > 0")
        if self.iterations < 1:
            raise ConfigurationError("optim.iterations must be >= 1")
        if self.grad_clip < 0:
            raise ConfigurationError("optim.grad_clip must be >= 0")
        if not 0.0 <= self.tail_average_fraction <= 1.0:
            raise ConfigurationError("optim.tail_average_fraction must be in [0, 1]")
        if self.aux_weight < 0:
            raise ConfigurationError("loss.aux_weight must be >= 0")
        if self.synthetic_images < 20:
            raise ConfigurationError("dataset.synthetic_images must be >= 20")

    @property
    def ffn_dim(self) -> int:
        return self.attn_ffn_dim if self.attn_ffn_dim > 0 else 2 * self.c_merged

    # ---- serialization ----------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name.startswith("_"):
                continue
            value = getattr(self, f.name)
            lines.append(f"{self._KEYS[f.name]} = {_format_value(value)}")
        return "\n".join(sorted(lines)) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        raw = parse_flat_config(text)
        return cls.from_mapping(raw)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        return cls.from_text(path.read_text())

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        by_key = {v: k for k, v in cls._KEYS.items()}
        kwargs = {}
        for dotted, value in raw.items():
            if dotted not in by_key:
                raise ConfigurationError(f"unknown config key {dotted!r}")
            name = by_key[dotted]
            ftype = {f.name: f.type for f in fields(cls)}[name]
            kwargs[name] = _coerce(dotted, value, ftype)
        return cls(**kwargs)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """New config with ``dotted.key -> value`` overrides applied."""
        merged = dict(zip(self._KEYS.values(), (getattr(self, n) for n in self._KEYS)))
        for dotted, value in overrides.items():
            if dotted not in merged:
                raise ConfigurationError(f"unknown config key {dotted!r}")
            merged[dotted] = value
        return RunConfig.from_mapping(merged)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {self._KEYS[f.name]: getattr(self, f.name) for f in fields(self)
                if not f.name.startswith("_")}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, value, ftype):
    """Coerce a parsed string (or already-typed value) to the field type."""
    tname = ftype if isinstance(ftype, str) else ftype.__name__
    if tname == "bool":
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")
    try:
        if tname == "int":
            return int(value)
        if tname == "float":
            return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: cannot parse {value!r} as {tname}")
    return str(value)


def parse_flat_config(text: str) -> dict:
    """Parse ``key = value`` lines into an ordered string mapping."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigurationError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_override(item: str) -> tuple[str, str]:
    """Parse a ``--override key=value`` CLI argument."""
    if "=" not in item:
        raise ConfigurationError(f"override must look like key=value, got {item!r}")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


def synthetic_desk_config(**overrides) -> RunConfig:
    """Small-footprint defaults for the synthetic-shapes dataset on CPU.

    The tiny backbone trains from scratch, so pseudo-labels carry no signal
    at the start; the consistency term is warmed up at half the schedule.
    """
    base = dict(
        dataset="synthetic",
        fold=0,
        image_size=64,
        backbone="tiny",
        backbone_frozen=False,
        c_merged=64,
        c_local=32,
        attn_heads=4,
        learning_rate=0.025,
        iterations=500,
        unlabeled_warmup_fraction=0.5,
        tail_average_fraction=0.2,
    )
    base.update(overrides)
    return RunConfig(**base)


def dataclass_replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
