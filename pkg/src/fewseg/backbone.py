"""Backbone feature extraction and mid-level feature merging.

Two extractors share one interface: a frozen ResNet-50/101 (torchvision) for
real data, and a small trainable 4-stage CNN for CPU-scale runs on the
synthetic dataset.  Both expose four feature levels; level 1 carries shallow
appearance detail, level 4 the most semantic content.

Every extractor counts the images it has processed (``forward_count``) so
tests can assert how many backbone passes an entry point performs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

TINY_WIDTHS = (32, 64, 128, 128)
TINY_STRIDES = (2, 4, 8, 8)


@dataclass
class BackboneBundle:
    """Per-level feature maps for one input image (tensors are C x H x W)."""

    levels: dict  # level index (1..4) -> tensor
    strides: dict  # level index -> downsampling factor vs. the input

    def validate(self):
        sizes = [self.levels[i].shape[-2:] for i in sorted(self.levels)]
        for a, b in zip(sizes, sizes[1:]):
            if a[0] < b[0] or a[1] < b[1]:
                raise ValueError(f"level sizes must be non-increasing, got {sizes}")
        for i, t in self.levels.items():
            if not torch.isfinite(t).all():
                raise ValueError(f"non-finite values in level {i}")


class Backbone(nn.Module):
    """Interface: ``extract(image) -> BackboneBundle`` plus a forward counter."""

    level_channels: tuple
    strides: tuple = TINY_STRIDES

    def __init__(self):
        super().__init__()
        self.forward_count = 0
        self.expected_size: int | None = None

    def reset_counter(self):
        self.forward_count = 0

    def _check_size(self, image: torch.Tensor):
        if image.dim() != 4 or image.shape[1] != 3:
            raise ConfigurationError(f"expected B x 3 x H x W input, got {tuple(image.shape)}")
        if self.expected_size is not None and image.shape[-2:] != (self.expected_size,) * 2:
            raise ConfigurationError(
                f"input is {tuple(image.shape[-2:])}, configured size is {self.expected_size}"
            )

    def extract(self, image: torch.Tensor) -> BackboneBundle:
        """image: B x 3 x H x W (B is usually 1, one episode member)."""
        self._check_size(image)
        self.forward_count += image.shape[0]
        levels = self._levels(image)
        return BackboneBundle(levels=levels, strides=dict(enumerate(self.strides, 1)))


class TinyBackbone(Backbone):
    """Four (conv3x3, GroupNorm, ReLU) stages, widths 32/64/128/128,
    cumulative strides 2/4/8/8.  Trainable from scratch."""

    level_channels = TINY_WIDTHS
    strides = TINY_STRIDES

    def __init__(self):
        super().__init__()
        widths = (3,) + TINY_WIDTHS
        stage_strides = (2, 2, 2, 1)
        self.stages = nn.ModuleList()
        for i in range(4):
            self.stages.append(nn.Sequential(
                nn.Conv2d(widths[i], widths[i + 1], 3, stride=stage_strides[i], padding=1),
                nn.GroupNorm(8, widths[i + 1]),
                nn.ReLU(inplace=True),
            ))

    def _levels(self, image):
        levels = {}
        x = image
        for i, stage in enumerate(self.stages, 1):
            x = stage(x)
            levels[i] = x
        return levels


class ResnetBackbone(Backbone):
    """Frozen torchvision ResNet; layers 3-4 are dilated so levels 2-4 share
    one spatial stride, the usual layout for dense prediction."""

    def __init__(self, variant: str = "resnet50", weights_path: str = ""):
        super().__init__()
        import torchvision.models as tvm

        if variant == "resnet50":
            net = tvm.resnet50(weights=None, replace_stride_with_dilation=[False, True, True])
            self.level_channels = (256, 512, 1024, 2048)
        elif variant == "resnet101":
            net = tvm.resnet101(weights=None, replace_stride_with_dilation=[False, True, True])
            self.level_channels = (256, 512, 1024, 2048)
        else:
            raise ConfigurationError(f"unknown resnet variant {variant!r}")
        if weights_path:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        self.strides = (4, 8, 8, 8)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4
        self.freeze()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # stays in eval so BatchNorm statistics never move
        return super().train(False)

    def _levels(self, image):
        with torch.no_grad():
            x = self.stem(image)
            l1 = self.layer1(x)
            l2 = self.layer2(l1)
            l3 = self.layer3(l2)
            l4 = self.layer4(l3)
        return {1: l1, 2: l2, 3: l3, 4: l4}


def build_backbone(backbone_id: str, weights_path: str = "",
                   frozen: bool | None = None) -> Backbone:
    if backbone_id == "tiny":
        net = TinyBackbone()
        if frozen:
            for p in net.parameters():
                p.requires_grad_(False)
        return net
    if backbone_id in ("resnet50", "resnet101"):
        return ResnetBackbone(backbone_id, weights_path)
    raise ConfigurationError(f"unknown backbone {backbone_id!r}")


class FeatureMerger(nn.Module):
    """Channel-concatenate the two mid-level maps and project to a shared
    width: ``merged = ReLU(Conv1x1(cat(level2, level3)))``.

    One instance serves the support, query, and unlabeled branches, so the
    projection parameters are shared by construction.
    """

    def __init__(self, level_channels, c_merged: int, mid_levels=(2, 3)):
        super().__init__()
        self.mid_levels = tuple(mid_levels)
        in_ch = sum(level_channels[i - 1] for i in self.mid_levels)
        self.project = nn.Conv2d(in_ch, c_merged, kernel_size=1)
        self.c_merged = c_merged

    def forward(self, bundle: BackboneBundle) -> torch.Tensor:
        a = bundle.levels[self.mid_levels[0]]
        b = bundle.levels[self.mid_levels[1]]
        # resize the coarser map to the finer grid before concatenation
        target = (max(a.shape[-2], b.shape[-2]), max(a.shape[-1], b.shape[-1]))
        if a.shape[-2:] != target:
            a = F.interpolate(a, size=target, mode="bilinear", align_corners=False)
        if b.shape[-2:] != target:
            b = F.interpolate(b, size=target, mode="bilinear", align_corners=False)
        merged = torch.cat([a, b], dim=1)
        if merged.shape[1] != self.project.in_channels:
            raise ConfigurationError(
                f"merged channels {merged.shape[1]} != configured {self.project.in_channels}"
            )
        return F.relu(self.project(merged))
