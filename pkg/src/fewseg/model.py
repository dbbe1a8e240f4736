"""The episodic segmenter: shared feature extraction, prototype generation
and interaction, transformer activation, and the classification head.

One model instance serves the support, query, and unlabeled branches; there
is no branch-specific parameter tensor.  The evaluation entry point
(``predict``) accepts only support pairs and a query image, so the unlabeled
machinery is unreachable at test time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import TransformerActivation
from .backbone import Backbone, BackboneBundle, FeatureMerger, build_backbone
from .errors import ConfigurationError
from .prototypes import (
    LocalPrototypeGrid,
    LocalPrototypeGenerator,
    PriorMask,
    cosine_scores,
    downsample_mask,
    expand_global,
    expand_grid,
    masked_average_pool,
    normalize_minmax,
)

# feature levels feeding each prior kind
PRIOR_LEVELS = {"high": 4, "low": 1}


@dataclass
class SupportState:
    """Episode-constant support context reused by query and unlabeled passes."""

    global_prototype: torch.Tensor  # C_merged
    support_tokens: torch.Tensor  # Ls x C_merged (all shots, flattened)
    support_labels: torch.Tensor  # Ls binary
    fg_banks: dict  # prior source ("high"/"low") -> Nf x C foreground features
    merged_hw: tuple[int, int]
    shots: int


@dataclass
class SegmentOutput:
    """Everything one branch forward produces at feature resolution."""

    logits: torch.Tensor  # 2 x H x W
    aux_logits: torch.Tensor | None
    augmented: torch.Tensor  # C x H x W, post-interaction features
    merged: torch.Tensor  # C x H x W
    interaction_prior: PriorMask
    guidance_prior: PriorMask
    local_prototypes: LocalPrototypeGrid | None
    global_query_vector: torch.Tensor | None = None


class FewShotSegmenter(nn.Module):
    """Prototype-conditioned episodic segmentation model."""

    def __init__(self, backbone: Backbone, c_merged: int = 256, c_local: int = 64,
                 grid_size: int = 4, se_ratio: int = 4, channel_attention: bool = True,
                 prototype_mode: str = "gp+lp", attn_layers: int = 2, attn_heads: int = 8,
                 ffn_dim: int | None = None, cycle_mask: bool = True,
                 prior_interaction_source: str = "high", prior_guidance_source: str = "low",
                 aux_enabled: bool = True):
        super().__init__()
        self.backbone = backbone
        self.merger = FeatureMerger(backbone.level_channels, c_merged)
        self.c_merged = c_merged
        self.prototype_mode = prototype_mode
        self.prior_interaction_source = prior_interaction_source
        self.prior_guidance_source = prior_guidance_source
        self.aux_enabled = aux_enabled

        if prototype_mode == "gp+lp":
            self.local_prototypes = LocalPrototypeGenerator(
                c_merged, c_local, grid_size, se_ratio, channel_attention)
            extra = c_local
        elif prototype_mode == "gp+gp":
            self.local_prototypes = None
            extra = c_merged
        elif prototype_mode == "gp":
            self.local_prototypes = None
            extra = 0
        else:
            raise ConfigurationError(f"unknown prototype mode {prototype_mode!r}")

        # concatenation: global prototype | extra prototype | features | prior
        self.interaction_in_channels = c_merged + extra + c_merged + 1
        self.interaction = nn.Conv2d(self.interaction_in_channels, c_merged, 1)
        self.activation = TransformerActivation(
            c_merged, layers=attn_layers, heads=attn_heads,
            ffn_dim=ffn_dim, cycle_mask=cycle_mask)
        self.refine = nn.Conv2d(c_merged, c_merged, 3, padding=1)
        self.classifier = nn.Conv2d(c_merged, 2, 1)
        self.aux_head = nn.Conv2d(c_merged, 2, 1) if aux_enabled else None
        # start from uniform class scores: dice saturates badly when early
        # logits are large, so the scoring heads begin at zero
        for head in (self.classifier, self.aux_head):
            if head is not None:
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    # ---- shared feature plumbing -------------------------------------------

    def features(self, image: torch.Tensor) -> tuple[BackboneBundle, torch.Tensor]:
        """image: 3 x H x W -> (bundle, merged C x h x w)."""
        bundle = self.backbone.extract(image[None])
        merged = self.merger(bundle)[0]
        return bundle, merged

    def _prior_sources(self) -> tuple[str, ...]:
        return tuple({self.prior_interaction_source, self.prior_guidance_source})

    def _prior(self, bundle: BackboneBundle, banks: dict, source: str) -> PriorMask:
        level = PRIOR_LEVELS[source]
        feats = bundle.levels[level][0]
        scores = cosine_scores(feats, banks[source])
        return PriorMask(normalize_minmax(scores).reshape(feats.shape[-2:]), source)

    # ---- support side --------------------------------------------------------

    def build_support_state(self, support_images: list, support_masks: list) -> SupportState:
        """Backbone + merge each shot, pool the global prototype, build the
        per-level foreground banks, and prepare support tokens for
        cross-attention (interaction applied to the support's own features).
        """
        shots = len(support_images)
        bundles, merged, masks_feat, protos = [], [], [], []
        for img, mask in zip(support_images, support_masks):
            bundle, feat = self.features(img)
            m = downsample_mask(mask, feat.shape[-2:]).to(feat.dtype)
            bundles.append(bundle)
            merged.append(feat)
            masks_feat.append(m)
            protos.append(masked_average_pool(feat, m))
        global_prototype = torch.stack(protos).mean(dim=0)

        fg_banks = {}
        for source in self._prior_sources():
            level = PRIOR_LEVELS[source]
            chunks = []
            for bundle, mask in zip(bundles, support_masks):
                feats = bundle.levels[level][0]
                m = downsample_mask(mask, feats.shape[-2:]) > 0.5
                chunks.append(feats.reshape(feats.shape[0], -1).T[m.reshape(-1)])
            fg_banks[source] = torch.cat(chunks, dim=0)

        tokens, labels = [], []
        for bundle, feat, m in zip(bundles, merged, masks_feat):
            guidance = self._prior(bundle, fg_banks, self.prior_guidance_source)
            inter_prior = self._prior(bundle, fg_banks, self.prior_interaction_source)
            augmented = self._interact(global_prototype, feat, inter_prior,
                                       guidance, local_override=None)[0]
            tokens.append(augmented.reshape(augmented.shape[0], -1).T)
            labels.append(m.reshape(-1))
        return SupportState(
            global_prototype=global_prototype,
            support_tokens=torch.cat(tokens, dim=0),
            support_labels=torch.cat(labels, dim=0),
            fg_banks=fg_banks,
            merged_hw=merged[0].shape[-2:],
            shots=shots,
        )

    # ---- prototype interaction ----------------------------------------------

    def _interact(self, global_prototype, merged, interaction_prior: PriorMask,
                  guidance_prior: PriorMask, local_override):
        """Expand prototypes, concatenate with features and the prior, and
        project back to the shared width (1x1 conv + ReLU).

        Returns (augmented C x H x W, local grid or None, query vector or None).
        """
        hw = merged.shape[-2:]
        guidance = guidance_prior.resized(hw).to(merged.dtype)
        parts = [expand_global(global_prototype, hw)]
        local = None
        query_vec = None
        if self.prototype_mode == "gp+lp":
            local = local_override
            if local is None:
                local = self.local_prototypes(merged, guidance)
            parts.append(expand_grid(local.grid, hw))
        elif self.prototype_mode == "gp+gp":
            query_vec = local_override
            if query_vec is None:
                weight = guidance[None]
                query_vec = (merged * weight).sum(dim=(-2, -1)) / \
                    weight.sum().clamp_min(1e-7)
            parts.append(expand_global(query_vec, hw))
        parts.append(merged)
        parts.append(interaction_prior.resized(hw).to(merged.dtype)[None])
        stacked = torch.cat(parts, dim=0)
        if stacked.shape[0] != self.interaction_in_channels:
            raise RuntimeError(
                f"interaction expected {self.interaction_in_channels} channels, "
                f"got {stacked.shape[0]}")
        augmented = F.relu(self.interaction(stacked[None])[0])
        return augmented, local, query_vec

    # ---- query / unlabeled forward -------------------------------------------

    def segment(self, image: torch.Tensor, state: SupportState,
                local_override=None, store_attention: bool = False) -> SegmentOutput:
        """Forward one image conditioned on the support state.

        ``local_override`` substitutes externally generated fine-grained
        prototypes (the unlabeled branch passes the query's here); by default
        they are generated from the image's own features.
        """
        bundle, merged = self.features(image)
        guidance = self._prior(bundle, state.fg_banks, self.prior_guidance_source)
        inter_prior = self._prior(bundle, state.fg_banks, self.prior_interaction_source)
        augmented, local, query_vec = self._interact(
            state.global_prototype, merged, inter_prior, guidance, local_override)
        activated = self.activation(augmented, state.support_tokens,
                                    state.support_labels, store_attention)
        refined = activated + F.relu(self.refine(activated[None])[0])
        logits = self.classifier(refined[None])[0]
        aux_logits = self.aux_head(augmented[None])[0] if self.aux_enabled else None
        return SegmentOutput(
            logits=logits, aux_logits=aux_logits, augmented=augmented,
            merged=merged, interaction_prior=inter_prior, guidance_prior=guidance,
            local_prototypes=local, global_query_vector=query_vec,
        )

    def prototype_payload(self, out: SegmentOutput):
        """The fine-grained prototypes a guided unlabeled pass should reuse."""
        if self.prototype_mode == "gp+lp":
            return out.local_prototypes
        if self.prototype_mode == "gp+gp":
            return out.global_query_vector
        return None

    # ---- evaluation entry point ------------------------------------------------

    def predict(self, support_images: list, support_masks: list,
                query_image: torch.Tensor) -> torch.Tensor:
        """Image-resolution logits (2 x H x W) for one test episode.

        Takes exactly K support pairs plus the query image; this is the only
        inference surface and it has no notion of unlabeled inputs.
        """
        state = self.build_support_state(support_images, support_masks)
        out = self.segment(query_image, state)
        return upsample_logits(out.logits, query_image.shape[-2:])

    def predict_mask(self, support_images, support_masks, query_image) -> torch.Tensor:
        """Binary foreground mask; ties at equal logits fall to background."""
        logits = self.predict(support_images, support_masks, query_image)
        return logits_to_mask(logits)


def upsample_logits(logits: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    if logits.shape[-2:] == tuple(hw):
        return logits
    return F.interpolate(logits[None], size=hw, mode="bilinear",
                         align_corners=False)[0]


def logits_to_mask(logits: torch.Tensor) -> torch.Tensor:
    """argmax over (background, foreground); equal scores pick background."""
    return (logits[1] > logits[0]).to(torch.uint8)


def foreground_probability(logits: torch.Tensor) -> torch.Tensor:
    return F.softmax(logits, dim=0)[1]


def build_model(cfg) -> FewShotSegmenter:
    backbone = build_backbone(cfg.backbone, cfg.backbone_weights, cfg.backbone_frozen)
    backbone.expected_size = cfg.image_size
    return FewShotSegmenter(
        backbone,
        c_merged=cfg.c_merged,
        c_local=cfg.c_local,
        grid_size=cfg.grid_size,
        se_ratio=cfg.se_ratio,
        channel_attention=cfg.channel_attention,
        prototype_mode=cfg.prototype_mode,
        attn_layers=cfg.attn_layers,
        attn_heads=cfg.attn_heads,
        ffn_dim=cfg.ffn_dim,
        cycle_mask=cfg.cycle_mask,
        prior_interaction_source=cfg.prior_interaction_source,
        prior_guidance_source=cfg.prior_guidance_source,
        aux_enabled=cfg.aux_enabled,
    )
