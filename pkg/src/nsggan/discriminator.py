"""PatchGAN critic with an auxiliary age regression head."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import NEG_SLOPE


class CriticOutput(NamedTuple):
    realism_map: torch.Tensor   # [B, 1, h', w'], no output nonlinearity
    age_estimate: torch.Tensor  # [B], normalised age


class Discriminator(nn.Module):
    """Three stride-2 stages and one stride-1 stage of 4x4 convs, then a patch head.

    At width 64 this is the 70x70 PatchGAN. No normalisation layers are used,
    so every patch score depends only on pixels inside its receptive field.
    """

    def __init__(self, base_channels: int = 64, spectral_norm: bool = False, n_groups: int = 0):
        super().__init__()
        wrap = nn.utils.parametrizations.spectral_norm if spectral_norm else (lambda m: m)
        b = base_channels
        layers, ch = [], 3
        for out, stride in ((b, 2), (2 * b, 2), (4 * b, 2), (8 * b, 1)):
            layers += [wrap(nn.Conv2d(ch, out, 4, stride, 1)), nn.LeakyReLU(NEG_SLOPE)]
            ch = out
        self.trunk = nn.Sequential(*layers)
        self.patch = wrap(nn.Conv2d(ch, 1, 4, 1, 1))
        self.age = wrap(nn.Linear(ch, 1))
        # optional class projection on the realism map; the trunk and age head never see the group
        self.group_embed = nn.Embedding(n_groups, ch) if n_groups else None
        if self.group_embed is not None:
            nn.init.zeros_(self.group_embed.weight)

    def forward(self, x: torch.Tensor, groups: torch.Tensor | None = None) -> CriticOutput:
        h = self.trunk(x)
        realism = self.patch(h)
        if self.group_embed is not None:
            if groups is None:
                raise ValueError("this critic is group-conditioned; pass the target groups")
            # 2x2 mean keeps the projection inside each patch's receptive field
            local = F.avg_pool2d(h, 2, 1)
            realism = realism + (self.group_embed(groups.long())[:, :, None, None] * local).sum(1, keepdim=True)
        return CriticOutput(realism, self.age(h.mean(dim=(2, 3)))[:, 0])


def patch_grid(size: int) -> int:
    """Side length of the realism map for a square input of ``size`` pixels."""
    for stride in (2, 2, 2, 1):
        size = (size + 2 - 4) // stride + 1
    return size - 1
