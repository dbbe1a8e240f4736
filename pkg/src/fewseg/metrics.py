"""Evaluation metrics: class-pooled mIoU and foreground-background IoU.

Counters are pooled across episodes before any ratio is taken (the standard
protocol for class-disjoint folds): per class, intersection and union pixel
counts accumulate over all of that class's episodes, and mIoU is the mean of
the pooled ratios.  Accumulators merge associatively so evaluation shards
can be reduced in any order.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


def _to_binary(mask) -> np.ndarray:
    arr = np.asarray(mask.detach().cpu() if hasattr(mask, "detach") else mask)
    return arr.astype(bool)


class MetricAccumulator:
    """Pooled intersection/union counters for one fold's evaluation."""

    def __init__(self, classes, fold_index: int = 0):
        self.fold_index = fold_index
        self.classes = frozenset(int(c) for c in classes)
        self.intersection = {c: 0 for c in self.classes}
        self.union = {c: 0 for c in self.classes}
        self.fg_intersection = 0
        self.fg_union = 0
        self.bg_intersection = 0
        self.bg_union = 0
        self.episodes = 0
        self.per_episode_iou = []

    def update(self, prediction, truth, class_id: int) -> "MetricAccumulator":
        class_id = int(class_id)
        if class_id not in self.classes:
            raise ContractViolation(
                f"class {class_id} does not belong to fold {self.fold_index}"
            )
        p, t = _to_binary(prediction), _to_binary(truth)
        if p.shape != t.shape:
            raise ContractViolation(f"shape mismatch {p.shape} vs {t.shape}")
        inter = int((p & t).sum())
        union = int((p | t).sum())
        self.intersection[class_id] += inter
        self.union[class_id] += union
        self.fg_intersection += inter
        self.fg_union += union
        self.bg_intersection += int((~p & ~t).sum())
        self.bg_union += int((~p | ~t).sum())
        self.episodes += 1
        self.per_episode_iou.append(inter / union if union else 1.0)
        return self

    def miou(self) -> float:
        """Mean of pooled per-class IoU over classes that were evaluated."""
        ratios = [self.intersection[c] / self.union[c]
                  for c in sorted(self.classes) if self.union[c] > 0]
        return float(np.mean(ratios)) if ratios else 0.0

    def episode_mean_iou(self) -> float:
        """Per-episode averaging, kept for comparison with the pooled value."""
        return float(np.mean(self.per_episode_iou)) if self.per_episode_iou else 0.0

    def fb_iou(self) -> float:
        fg = self.fg_intersection / self.fg_union if self.fg_union else 1.0
        bg = self.bg_intersection / self.bg_union if self.bg_union else 1.0
        return float((fg + bg) / 2)

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        if self.classes != other.classes or self.fold_index != other.fold_index:
            raise ContractViolation("cannot merge accumulators from different folds")
        out = MetricAccumulator(self.classes, self.fold_index)
        for c in self.classes:
            out.intersection[c] = self.intersection[c] + other.intersection[c]
            out.union[c] = self.union[c] + other.union[c]
        out.fg_intersection = self.fg_intersection + other.fg_intersection
        out.fg_union = self.fg_union + other.fg_union
        out.bg_intersection = self.bg_intersection + other.bg_intersection
        out.bg_union = self.bg_union + other.bg_union
        out.episodes = self.episodes + other.episodes
        out.per_episode_iou = self.per_episode_iou + other.per_episode_iou
        return out

    def to_dict(self) -> dict:
        return {
            "fold": self.fold_index,
            "episodes": self.episodes,
            "miou": self.miou(),
            "fb_iou": self.fb_iou(),
            "per_class_iou": {
                str(c): (self.intersection[c] / self.union[c] if self.union[c] else None)
                for c in sorted(self.classes)
            },
        }
