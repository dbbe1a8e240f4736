"""Checkpoint container: named tensors plus a manifest.

The manifest pins the format version, backbone id, key architecture sizes,
and a hash of the full config so an incompatible load fails loudly instead
of silently evaluating the wrong model.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .config import RunConfig
from .errors import CheckpointError

CHECKPOINT_FORMAT_VERSION = 1


def build_manifest(cfg: RunConfig, iteration: int) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "backbone_id": cfg.backbone,
        "c_merged": cfg.c_merged,
        "grid_size": cfg.grid_size,
        "config_hash": cfg.config_hash(),
        "iteration": iteration,
    }


def save_checkpoint(path: str | Path, model, optimizer, iteration: int,
                    cfg: RunConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "manifest": build_manifest(cfg, iteration),
        "config_text": cfg.to_text(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "iteration": iteration,
    }
    try:
        torch.save(payload, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}")
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    manifest = payload.get("manifest")
    if not manifest or manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format "
            f"{manifest.get('format_version') if manifest else None}")
    cfg = RunConfig.from_text(payload["config_text"])
    if cfg.config_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match manifest")
    payload["config"] = cfg
    return payload


def restore_model(payload: dict):
    """Rebuild the model recorded in a checkpoint payload."""
    from .model import build_model

    cfg = payload["config"]
    model = build_model(cfg)
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint incompatible with its manifest: {e}")
    return model, cfg
