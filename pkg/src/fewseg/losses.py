"""Dice losses and the weighted episode objective.

Dice is computed on the foreground probability channel against a binary
target, with a smoothing constant of 1.0 in numerator and denominator so
empty-vs-empty comparisons cost zero instead of dividing by zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError
from .model import foreground_probability, upsample_logits

DICE_SMOOTHING = 1.0


def dice_loss(prediction: torch.Tensor, target: torch.Tensor,
              smoothing: float = DICE_SMOOTHING) -> torch.Tensor:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s); result in [0, 1].

    prediction: foreground probabilities in [0, 1]; target: binary, same shape.
    """
    if prediction.shape != target.shape:
        raise ConfigurationError(
            f"prediction {tuple(prediction.shape)} vs target {tuple(target.shape)}"
        )
    t = target.to(prediction.dtype)
    overlap = (prediction * t).sum()
    return 1.0 - (2.0 * overlap + smoothing) / (prediction.sum() + t.sum() + smoothing)


def main_loss(query_logits: torch.Tensor, query_truth: torch.Tensor,
              aux_logits: torch.Tensor | None, aux_weight: float = 1.0):
    """Dice on the upsampled query prediction plus the auxiliary alignment
    term (dice on the intermediate head), returned as (main, aux)."""
    hw = query_truth.shape[-2:]
    pred = foreground_probability(upsample_logits(query_logits, hw))
    main = dice_loss(pred, query_truth)
    if aux_logits is None:
        aux = torch.zeros((), dtype=main.dtype, device=main.device)
    else:
        aux_pred = foreground_probability(upsample_logits(aux_logits, hw))
        aux = dice_loss(aux_pred, query_truth)
    return main + aux_weight * aux, aux


def final_loss(main, unlabeled, beta: float):
    """main + beta * unlabeled; works on tensors and plain floats."""
    return main + beta * unlabeled


@dataclass
class LossReport:
    """Per-episode loss components; ``final`` is reconstructed from the
    reported components so the composition identity holds bit-exactly."""

    main: float
    aux: float
    unlabeled: float
    beta: float
    final: float = None

    def __post_init__(self):
        if self.final is None:
            self.final = final_loss(self.main, self.unlabeled, self.beta)

    @classmethod
    def from_tensors(cls, main, aux, unlabeled, beta: float) -> "LossReport":
        def value(x):
            return float(x.detach()) if hasattr(x, "detach") else float(x)

        return cls(main=value(main), aux=value(aux), unlabeled=value(unlabeled),
                   beta=float(beta))

    def to_dict(self) -> dict:
        return {"main": self.main, "aux": self.aux, "unlabeled": self.unlabeled,
                "beta": self.beta, "final": self.final}
