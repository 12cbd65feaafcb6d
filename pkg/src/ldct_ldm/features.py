"""Frozen multi-layer feature extractors for the perceptual loss and LPIPS.

Desk-scale runs use a fixed-seed random convolutional stack. It taps several
depths like a classifier backbone would, but needs no downloaded weights, so
results are identical offline and across machines. A VGG-16 backbone can be
plugged in when torchvision weights are available locally.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import nn


class FeatureExtractor(nn.Module):
    """Runs ``blocks`` in sequence and returns the output of each one."""

    def __init__(self, blocks: Sequence[nn.Module], mode: str):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.mode = mode
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)


def random_conv_extractor(seed: int = 0, channels: Sequence[int] = (8, 16, 32),
                          in_channels: int = 1) -> FeatureExtractor:
    """Conv-ReLU stack with He-normal weights drawn from ``seed``.

    The first block keeps full resolution, later blocks downsample by 2.
    """
    gen = torch.Generator().manual_seed(seed)
    blocks, c_in = [], in_channels
    for i, c_out in enumerate(channels):
        conv = nn.Conv2d(c_in, c_out, 3, stride=1 if i == 0 else 2, padding=1)
        std = math.sqrt(2.0 / (c_in * 9))
        with torch.no_grad():
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
            conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
        blocks.append(nn.Sequential(conv, nn.ReLU()))
        c_in = c_out
    return FeatureExtractor(blocks, mode="fixed-random-seeded")


def identity_extractor() -> FeatureExtractor:
    """Single layer returning its input; reduces the feature losses to pixel form."""
    return FeatureExtractor([nn.Identity()], mode="identity")


class _GrayToImagenet(nn.Module):
    def __init__(self):
        super().__init__()
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        x = (x + 1.0) / 2.0
        return (x.repeat(1, 3, 1, 1) - self.mean) / self.std


def vgg16_extractor(weights_path: str | None = None) -> FeatureExtractor:
    """VGG-16 taps at relu1_2, relu2_2, relu3_3 and relu4_3.

    ``weights_path`` is a local torchvision state dict; without it the
    architecture is built with untrained weights (for shape checks only).
    """
    from torchvision.models import vgg16

    net = vgg16(weights=None)
    if weights_path is not None:
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
    f = net.features
    cuts = [(0, 4), (4, 9), (9, 16), (16, 23)]
    blocks = [nn.Sequential(*f[a:b]) for a, b in cuts]
    blocks[0] = nn.Sequential(_GrayToImagenet(), *blocks[0])
    return FeatureExtractor(blocks, mode="pretrained-perceptual" if weights_path else "untrained-vgg16")
