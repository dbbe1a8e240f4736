"""Training-only unlabeled branch: weak/strong pseudo-label consistency.

Each unlabeled image is forwarded twice through the *same* model (there is
no branch-specific parameter): once weakly and once strongly augmented.  The
weak view's hard prediction, detached from the graph, becomes the target for
the strong view's prediction, compared with dice in the weak view's frame.
Fine-grained prototypes are borrowed from the query branch by default so the
pseudo supervision stays on the episode's class.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .augment import warp_between_frames
from .data import UnlabeledViews
from .errors import ContractViolation
from .losses import dice_loss
from .model import (
    FewShotSegmenter,
    SupportState,
    foreground_probability,
    logits_to_mask,
    upsample_logits,
)

logger = logging.getLogger(__name__)


@dataclass
class UnlabeledForward:
    """One unlabeled image's consistency pair."""

    weak_logits: torch.Tensor  # 2 x H x W, image resolution
    strong_logits: torch.Tensor
    pseudo_label: torch.Tensor  # H x W binary, no gradient
    alignment: tuple  # (strong_record, weak_record) mapping strong -> weak frame
    consistency: torch.Tensor  # scalar dice loss for this image


def unlabeled_forward(model: FewShotSegmenter, state: SupportState,
                      views: list, guide_payload=None, *, guide: bool = True,
                      soft_labels: bool = False, confidence: float = 0.0,
                      training: bool = True) -> list:
    """Forward all unlabeled views and compute their consistency losses.

    views: list[UnlabeledViews].  ``guide_payload`` carries the query
    branch's fine-grained prototypes; with ``guide=False`` each view
    generates prototypes from its own features instead.
    """
    if not training:
        raise ContractViolation("the unlabeled branch is a training-only code path")
    results = []
    for view in views:
        override = guide_payload if guide else None
        weak_out = model.segment(view.weak_image, state, local_override=override)
        strong_out = model.segment(view.strong_image, state, local_override=override)

        hw = view.weak_image.shape[-2:]
        weak_logits = upsample_logits(weak_out.logits, hw)
        strong_logits = upsample_logits(strong_out.logits, hw)

        pseudo = logits_to_mask(weak_logits.detach())
        if soft_labels:
            target = foreground_probability(weak_logits.detach())
        else:
            target = pseudo.to(weak_logits.dtype)

        strong_prob = foreground_probability(strong_logits)
        if view.strong_record != view.weak_record:
            strong_prob = warp_between_frames(
                strong_prob[None], view.strong_record, view.weak_record)[0]

        if confidence > 0.0:
            conf = foreground_probability(weak_logits.detach())
            keep = ((conf >= confidence) | (conf <= 1.0 - confidence)).to(strong_prob.dtype)
            loss = dice_loss(strong_prob * keep, target * keep)
        else:
            loss = dice_loss(strong_prob, target)

        results.append(UnlabeledForward(
            weak_logits=weak_logits, strong_logits=strong_logits,
            pseudo_label=pseudo, alignment=(view.strong_record, view.weak_record),
            consistency=loss,
        ))
    return results


def consistency_loss(forwards: list, dtype=torch.float32) -> torch.Tensor:
    """Mean consistency over the episode's unlabeled images (0 when M = 0)."""
    if not forwards:
        return torch.zeros((), dtype=dtype)
    return torch.stack([f.consistency for f in forwards]).mean()


def branch_exclusive_parameters(model: FewShotSegmenter) -> list:
    """Parameter names that would belong only to the unlabeled branch.

    The architecture shares every parameter with the query branch, so this
    is empty by construction; kept as an enumerable check.
    """
    return [name for name, _ in model.named_parameters() if "unlabeled" in name]
