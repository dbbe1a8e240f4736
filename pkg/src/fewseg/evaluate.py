"""Evaluation: test episodes with supports and a query only (M = 0 always).

The loop calls the model's prediction entry point, which has no unlabeled
inputs, under no-grad; parameters are untouched and the module's train/eval
mode is restored afterwards.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore_model
from .data import (
    build_dataset,
    derive_seed,
    episode_tensors,
    make_folds,
    num_folds,
    sample_episode,
)
from .errors import DataError, DegenerateMaskError
from .metrics import MetricAccumulator
from .model import logits_to_mask

_EVAL_STREAM = 500_000


def evaluate_model(model, dataset, fold, shots: int, n_episodes: int, seed: int,
                   phase: str = "test") -> MetricAccumulator:
    """Run ``n_episodes`` episodes from the given phase's class pool."""
    acc = MetricAccumulator(fold.classes_for(phase), fold.fold_index)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for i in range(n_episodes):
            # episodes whose mask degenerates at feature resolution are redrawn
            for attempt in range(32):
                ep_seed = derive_seed(seed, _EVAL_STREAM + i, attempt)
                episode = sample_episode(dataset, fold, phase, shots, 0, ep_seed)
                tensors = episode_tensors(episode, dataset, train=False, seed=ep_seed)
                try:
                    logits = model.predict(tensors.support_images,
                                           tensors.support_masks, tensors.query_image)
                    break
                except DegenerateMaskError:
                    continue
            else:
                raise DataError(f"could not draw a usable test episode (#{i})")
            acc.update(logits_to_mask(logits), tensors.query_mask, episode.class_id)
    model.train(was_training)
    return acc


def evaluate_checkpoint(checkpoint_path, fold_index: int, shots: int,
                        n_episodes: int, seeds: list, dataset=None) -> dict:
    """Per-seed metrics plus their mean for a stored checkpoint."""
    payload = load_checkpoint(checkpoint_path)
    model, cfg = restore_model(payload)
    cfg = cfg.with_overrides({"dataset.fold": fold_index, "episode.shots": shots})
    if dataset is None:
        dataset = build_dataset(cfg)
    fold = make_folds(cfg.dataset, fold_index)

    per_seed = []
    for seed in seeds:
        acc = evaluate_model(model, dataset, fold, shots, n_episodes, int(seed))
        per_seed.append({"seed": int(seed), **acc.to_dict()})
    return {
        "checkpoint": str(checkpoint_path),
        "dataset": cfg.dataset,
        "backbone": cfg.backbone,
        "fold": fold_index,
        "shots": shots,
        "episodes": n_episodes,
        "per_seed": per_seed,
        "miou": float(np.mean([r["miou"] for r in per_seed])),
        "fb_iou": float(np.mean([r["fb_iou"] for r in per_seed])),
    }


def write_results_csv(reports: list, path: str | Path) -> Path:
    """One row per (dataset, backbone, shots): per-fold mIoU columns + mean."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    folds = max((num_folds(r["dataset"]) for r in reports), default=4)
    fold_cols = [f"fold{i}" for i in range(folds)]
    rows = {}
    for r in reports:
        key = (r["dataset"], r["backbone"], r["shots"])
        row = rows.setdefault(key, {c: "" for c in fold_cols})
        row[f"fold{r['fold']}"] = f"{r['miou']:.4f}"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "backbone", "shots", *fold_cols, "mean"])
        for (dataset, backbone, shots), row in sorted(rows.items()):
            vals = [float(row[c]) for c in fold_cols if row[c] != ""]
            mean = f"{np.mean(vals):.4f}" if vals else ""
            writer.writerow([dataset, backbone, shots,
                             *[row[c] for c in fold_cols], mean])
    return path
