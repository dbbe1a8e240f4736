"""Prototype extraction: one global support vector plus a grid of local
query vectors, and the cosine-similarity prior maps that guide them.

The global prototype is a masked average over support foreground features.
Local prototypes average guidance-weighted query features over an m x m
partition of the feature plane, then pass through a channel squeeze and a
squeeze-excite style gate.  Priors score each query location by its best
cosine match against support foreground features, min-max normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DegenerateMaskError

NORM_EPS = 1e-7  # min-max normalization guard; constant maps become all-zero
COSINE_EPS = 1e-8


def downsample_mask(mask: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor downsample keeps the mask binary. mask: H x W."""
    if mask.shape == hw:
        return mask.float()
    out = F.interpolate(mask[None, None].float(), size=hw, mode="nearest")
    return out[0, 0]


def masked_average_pool(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean feature vector over foreground locations.

    features: C x H x W; mask: H x W with values in {0, 1} at the same
    resolution.  Raises if the mask has no foreground (the caller should
    resample the episode).
    """
    if features.shape[-2:] != mask.shape:
        raise ConfigurationError(
            f"mask {tuple(mask.shape)} does not match features {tuple(features.shape[-2:])}"
        )
    m = mask.to(features.dtype)
    total = m.sum()
    if total.item() == 0:
        raise DegenerateMaskError("mask has no foreground at feature resolution")
    return (features * m).sum(dim=(-2, -1)) / total


@dataclass
class PriorMask:
    """Per-pixel similarity map in [0, 1] plus the feature level that made it."""

    map: torch.Tensor  # H x W
    source_level: str  # "high" | "low"

    def resized(self, hw: tuple[int, int]) -> torch.Tensor:
        if self.map.shape == hw:
            return self.map
        out = F.interpolate(self.map[None, None], size=hw,
                            mode="bilinear", align_corners=False)
        return out[0, 0]


def cosine_scores(query_features: torch.Tensor, fg_features: torch.Tensor) -> torch.Tensor:
    """Best cosine match per query location against a foreground feature bank.

    query_features: C x H x W; fg_features: Nf x C.  Returns H*W raw scores.
    """
    if fg_features.shape[0] == 0:
        raise DegenerateMaskError("empty foreground feature bank")
    c = query_features.shape[0]
    q = query_features.reshape(c, -1).T  # Nq x C
    q = q / q.norm(dim=1, keepdim=True).clamp_min(COSINE_EPS)
    s = fg_features / fg_features.norm(dim=1, keepdim=True).clamp_min(COSINE_EPS)
    return (q @ s.T).max(dim=1).values


def normalize_minmax(scores: torch.Tensor) -> torch.Tensor:
    """Min-max to [0, 1]; constant inputs become all zeros (epsilon guard)."""
    lo, hi = scores.min(), scores.max()
    return (scores - lo) / (hi - lo + NORM_EPS)


def cosine_prior(query_features: torch.Tensor, support_features: torch.Tensor,
                 support_mask: torch.Tensor, source_level: str = "high") -> PriorMask:
    """Best cosine match of each query location against support foreground.

    query_features: C x Hq x Wq; support_features: C x Hs x Ws;
    support_mask: Hs x Ws binary, already at support feature resolution.
    Scores are min-max normalized to [0, 1]; a constant score map maps to
    all zeros (epsilon-guarded denominator).
    """
    fg = support_mask.reshape(-1) > 0.5
    if not bool(fg.any()):
        raise DegenerateMaskError("support mask has no foreground at feature resolution")
    c = support_features.shape[0]
    bank = support_features.reshape(c, -1).T[fg]
    scores = cosine_scores(query_features, bank)
    normalized = normalize_minmax(scores)
    return PriorMask(normalized.reshape(query_features.shape[-2:]), source_level)


def grid_geometry(h: int, w: int, m: int) -> list:
    """Pixel window (y0, y1, x0, x1) for each of the m*m grid cells.

    Windows follow adaptive average pooling: cell i spans
    [floor(i*h/m), ceil((i+1)*h/m)).  They cover the plane and overlap only
    through boundary rounding.
    """
    cells = []
    for i in range(m):
        y0, y1 = (i * h) // m, -(-((i + 1) * h) // m)
        for j in range(m):
            x0, x1 = (j * w) // m, -(-((j + 1) * w) // m)
            cells.append((y0, y1, x0, x1))
    return cells


def pool_local_grid(features: torch.Tensor, guidance: torch.Tensor, m: int) -> torch.Tensor:
    """Guidance-weighted window means: C x H x W -> C x m x m.

    guidance: H x W in [0, 1], broadcast over channels before pooling.
    """
    h, w = features.shape[-2:]
    if m > h or m > w:
        raise ConfigurationError(f"grid size {m} exceeds feature size {(h, w)}")
    if guidance.shape != (h, w):
        raise ConfigurationError(
            f"guidance {tuple(guidance.shape)} does not match features {(h, w)}"
        )
    product = features * guidance[None]
    return F.adaptive_avg_pool2d(product[None], m)[0]


class ChannelGate(nn.Module):
    """Squeeze-excite gate over a prototype grid: pool the grid, bottleneck,
    sigmoid, scale channels.  ``enabled=False`` makes it a pass-through
    (gates of exactly 1), which is also the no-channel-attention ablation.
    """

    def __init__(self, channels: int, ratio: int = 4, enabled: bool = True):
        super().__init__()
        hidden = max(1, channels // ratio)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.enabled = enabled

    def gates(self, grid: torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            return torch.ones(grid.shape[0], dtype=grid.dtype, device=grid.device)
        z = grid.mean(dim=(-2, -1))  # C
        return torch.sigmoid(self.fc2(F.relu(self.fc1(z))))

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        return grid * self.gates(grid)[:, None, None]


@dataclass
class LocalPrototypeGrid:
    """m x m local prototype vectors plus their source pixel windows."""

    grid: torch.Tensor  # C' x m x m
    geometry: list  # grid_geometry() windows in feature pixels

    @property
    def m(self) -> int:
        return self.grid.shape[-1]

    @property
    def count(self) -> int:
        return self.grid.shape[-2] * self.grid.shape[-1]


class LocalPrototypeGenerator(nn.Module):
    """Pool guidance-weighted features to an m x m grid, squeeze channels
    with a 1x1 map, then apply the channel gate."""

    def __init__(self, c_in: int, c_out: int, m: int, se_ratio: int = 4,
                 channel_attention: bool = True):
        super().__init__()
        self.m = m
        self.squeeze = nn.Conv2d(c_in, c_out, kernel_size=1)
        self.gate = ChannelGate(c_out, ratio=se_ratio, enabled=channel_attention)

    def forward(self, features: torch.Tensor, guidance: torch.Tensor) -> LocalPrototypeGrid:
        pooled = pool_local_grid(features, guidance, self.m)  # C_in x m x m
        squeezed = self.squeeze(pooled[None])[0]  # C_out x m x m
        refined = self.gate(squeezed)
        h, w = features.shape[-2:]
        return LocalPrototypeGrid(refined, grid_geometry(h, w, self.m))


def expand_global(prototype: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Broadcast a C (or C x 1 x 1) vector to C x H x W."""
    vec = prototype.reshape(-1)
    return vec[:, None, None].expand(-1, hw[0], hw[1])


def expand_grid(grid: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Tile each grid cell over its corresponding spatial region (nearest)."""
    return F.interpolate(grid[None], size=hw, mode="nearest")[0]
