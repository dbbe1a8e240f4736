"""Ablation sweeps: train and evaluate one run per axis value, emit a table.

Axes cover the number of unlabeled images, query-prototype guidance of the
unlabeled branch, the prototype configuration, and the consistency weight.
"""

from __future__ import annotations

from pathlib import Path

from .config import RunConfig, dataclass_replace
from .data import build_dataset, make_folds
from .errors import ConfigurationError
from .evaluate import evaluate_model
from .train import train

PROTOTYPE_VARIANTS = {
    "gp": {"prototype_mode": "gp"},
    "gp+gp": {"prototype_mode": "gp+gp"},
    "gp+lp-noCA": {"prototype_mode": "gp+lp", "channel_attention": False},
    "gp+lp-CA": {"prototype_mode": "gp+lp", "channel_attention": True},
}

AXES = ("unlabeled_count", "guide", "prototypes", "beta")


def apply_axis(cfg: RunConfig, axis: str, value: str) -> RunConfig:
    if axis == "unlabeled_count":
        return dataclass_replace(cfg, unlabeled_count=int(value))
    if axis == "guide":
        flag = str(value).lower() in ("on", "true", "1", "yes")
        if str(value).lower() not in ("on", "off", "true", "false", "1", "0", "yes", "no"):
            raise ConfigurationError(f"guide axis takes on/off, got {value!r}")
        return dataclass_replace(cfg, unlabeled_guide=flag)
    if axis == "prototypes":
        if value not in PROTOTYPE_VARIANTS:
            raise ConfigurationError(
                f"prototypes axis takes {sorted(PROTOTYPE_VARIANTS)}, got {value!r}")
        return dataclass_replace(cfg, **PROTOTYPE_VARIANTS[value])
    if axis == "beta":
        return dataclass_replace(cfg, unlabeled_loss_weight=float(value))
    raise ConfigurationError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def ablate(base_cfg: RunConfig, axis: str, values: list,
           eval_episodes: int = 100, eval_seed: int = 0) -> list:
    """Train + evaluate per value; returns table rows in input order."""
    dataset = build_dataset(base_cfg)
    rows = []
    for value in values:
        cfg = apply_axis(base_cfg, axis, str(value))
        cfg = dataclass_replace(
            cfg, out_dir=str(Path(base_cfg.out_dir) / f"{axis}_{value}"))
        result = train(cfg, dataset=dataset)
        fold = make_folds(cfg.dataset, cfg.fold)
        from .checkpoint import load_checkpoint, restore_model

        model, _ = restore_model(load_checkpoint(result.checkpoint_path))
        acc = evaluate_model(model, dataset, fold, cfg.shots, eval_episodes, eval_seed)
        rows.append({
            axis: str(value),
            "miou": acc.miou(),
            "fb_iou": acc.fb_iou(),
            "final_loss": result.history[-1]["final"] if result.history else None,
            "checkpoint": str(result.checkpoint_path),
        })
    return rows


def format_table(rows: list, axis: str) -> str:
    header = [axis, "mIoU", "FB-IoU"]
    lines = ["  ".join(f"{h:>12}" for h in header)]
    for row in rows:
        lines.append("  ".join([f"{row[axis]:>12}",
                                f"{row['miou']:>12.4f}",
                                f"{row['fb_iou']:>12.4f}"]))
    return "\n".join(lines)
