"""Transformer feature activation: self-attention over query tokens followed
by cross-attention onto support tokens with cycle-consistency masking.

The cycle check: each support token nominates the query token that attends
to it most; that query token nominates its own best support token.  If the
two support tokens carry different foreground/background labels, the
original support token is inconsistent and its attention column is masked
to exactly zero.  Masking removes support evidence whose correspondence
does not survive a round trip; query-side self-attention is never touched.
"""

from __future__ import annotations

import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


def sincos_position_encoding(h: int, w: int, dim: int, dtype=torch.float32,
                             device=None) -> torch.Tensor:
    """Fixed 2D sinusoidal encodings, (h*w) x dim; half for rows, half for cols."""
    def axis(n, d):
        pos = torch.arange(n, dtype=dtype, device=device)[:, None]
        k = torch.arange(0, d, 2, dtype=dtype, device=device)[None]
        angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype, device=device), k / d)
        enc = torch.zeros(n, d, dtype=dtype, device=device)
        enc[:, 0::2] = torch.sin(angle)
        enc[:, 1::2] = torch.cos(angle[:, : enc[:, 1::2].shape[1]])
        return enc

    d_y = dim // 2
    d_x = dim - d_y
    enc_y = axis(h, d_y)[:, None, :].expand(h, w, d_y)
    enc_x = axis(w, d_x)[None, :, :].expand(h, w, d_x)
    return torch.cat([enc_y, enc_x], dim=-1).reshape(h * w, dim)


def _drop_dead_heads(inconsistent: torch.Tensor) -> torch.Tensor:
    """Unmask heads whose every support column would be removed.

    A column holding its head's globally largest affinity entry always
    round-trips to itself, so this guard cannot fire for real affinities;
    it is kept as a defensive fallback (and warns if it ever triggers).
    """
    dead = inconsistent.all(dim=1)
    if bool(dead.any()):
        logger.warning("cycle mask removed every support token for %d head(s); "
                       "falling back to unmasked cross-attention", int(dead.sum()))
        inconsistent = inconsistent.clone()
        inconsistent[dead] = False
    return inconsistent


def cycle_consistency_bias(affinity: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-head column bias (heads x Lk): -inf on inconsistent support tokens.

    affinity: heads x Lq x Lk pre-softmax scores; labels: Lk in {0, 1}.
    """
    heads, lq, lk = affinity.shape
    best_query = affinity.argmax(dim=1)  # heads x Lk
    rows = torch.gather(affinity, 1, best_query[:, :, None].expand(-1, -1, lk))
    round_trip = rows.argmax(dim=2)  # heads x Lk
    lab = labels.reshape(-1)
    inconsistent = lab[round_trip] != lab[None, :]  # heads x Lk
    inconsistent = _drop_dead_heads(inconsistent)
    bias = torch.zeros_like(affinity[:, 0, :])
    bias[inconsistent] = float("-inf")
    return bias


class MultiheadAttention(nn.Module):
    """Explicit multi-head attention exposing the affinity matrix, so the
    cycle mask can be computed on it and tests can read the attention rows."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        assert dim % heads == 0
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, source: torch.Tensor,
                labels: torch.Tensor | None = None):
        """query: Lq x C, source: Lk x C; labels enable cycle masking.

        Returns (Lq x C output, heads x Lq x Lk post-softmax attention).
        """
        lq, lk = query.shape[0], source.shape[0]
        q = self.q_proj(query).reshape(lq, self.heads, self.head_dim).transpose(0, 1)
        k = self.k_proj(source).reshape(lk, self.heads, self.head_dim).transpose(0, 1)
        v = self.v_proj(source).reshape(lk, self.heads, self.head_dim).transpose(0, 1)
        affinity = q @ k.transpose(1, 2) / math.sqrt(self.head_dim)  # heads x Lq x Lk
        if labels is not None:
            affinity = affinity + cycle_consistency_bias(affinity, labels)[:, None, :]
        attn = F.softmax(affinity, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(lq, -1)
        return self.out_proj(out), attn


class EncoderBlock(nn.Module):
    """Self-attention, cross-attention, feed-forward; post-norm residuals."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiheadAttention(dim, heads)
        self.cross_attn = MultiheadAttention(dim, heads)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True),
                                 nn.Linear(ffn_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, tokens, support_tokens, labels):
        sa, self_map = self.self_attn(tokens, tokens)
        tokens = self.norm1(tokens + sa)
        ca, cross_map = self.cross_attn(tokens, support_tokens, labels)
        tokens = self.norm2(tokens + ca)
        tokens = self.norm3(tokens + self.ffn(tokens))
        return tokens, self_map, cross_map


class TransformerActivation(nn.Module):
    """n encoder blocks over flattened query features, attending to support
    tokens.  Positional encodings are added to query tokens only, keeping the
    output invariant to support token order (up to the cycle mask).
    """

    def __init__(self, dim: int, layers: int = 2, heads: int = 8,
                 ffn_dim: int | None = None, cycle_mask: bool = True):
        super().__init__()
        ffn_dim = ffn_dim or 2 * dim
        self.blocks = nn.ModuleList(EncoderBlock(dim, heads, ffn_dim)
                                    for _ in range(layers))
        self.cycle_mask = cycle_mask
        self.last_self_attention: list = []
        self.last_cross_attention: list = []

    def forward(self, query_features: torch.Tensor, support_tokens: torch.Tensor,
                support_labels: torch.Tensor, store_attention: bool = False) -> torch.Tensor:
        """query_features: C x H x W; support_tokens: Ls x C;
        support_labels: Ls binary.  Returns C x H x W."""
        c, h, w = query_features.shape
        tokens = query_features.reshape(c, h * w).T  # (H*W) x C
        tokens = tokens + sincos_position_encoding(
            h, w, c, dtype=tokens.dtype, device=tokens.device)
        labels = support_labels if self.cycle_mask else None
        self.last_self_attention, self.last_cross_attention = [], []
        for block in self.blocks:
            tokens, self_map, cross_map = block(tokens, support_tokens, labels)
            if store_attention:
                self.last_self_attention.append(self_map.detach())
                self.last_cross_attention.append(cross_map.detach())
        return tokens.T.reshape(c, h, w)
