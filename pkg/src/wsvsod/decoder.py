"""Top-down decoder and the auxiliary edge head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


@dataclass
class Prediction:
    saliency: torch.Tensor  # (T,H,W) in [0,1]
    edge: Optional[torch.Tensor]
    saliency_logits: torch.Tensor
    edge_logits: Optional[torch.Tensor]


def upsample(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class FBlock(nn.Module):
    """Upsample (skipped when resolutions already match), concat the lateral, 3x3 conv."""

    def __init__(self, in_ch, lateral_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch + lateral_ch, out_ch, 3, padding=1)

    def forward(self, top, lateral):
        top = upsample(top, lateral.shape[-2:])
        return F.relu(self.conv(torch.cat([top, lateral], dim=1)))


class Decoder(nn.Module):
    def __init__(self, channels=32, width=32, n_stages=4):
        super().__init__()
        if n_stages < 2:
            raise ShapeError("decoder needs at least two stages")
        blocks = [FBlock(channels, channels, width)]
        blocks += [FBlock(width, channels, width) for _ in range(n_stages - 2)]
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(width, 1, 1)

    def forward(self, stages: List[torch.Tensor], out_size):
        """``stages`` ordered fine to coarse, as the encoder emits them."""
        sizes = [s.shape[-2:] for s in stages]
        for fine, coarse in zip(sizes, sizes[1:]):
            if fine[0] < coarse[0] or fine[1] < coarse[1]:
                raise ShapeError(f"stage sizes {sizes} are not ordered fine to coarse")
        x = stages[-1]
        for block, lateral in zip(self.blocks, reversed(stages[:-1])):
            x = block(x, lateral)
        return upsample(self.head(x), out_size)[:, 0]


class EdgeHead(nn.Module):
    def __init__(self, ch1, ch2, width=32):
        super().__init__()
        self.conv = nn.Conv2d(ch1 + ch2, width, 3, padding=1)
        self.out = nn.Conv2d(width, 1, 1)

    def forward(self, f1, f2, out_size):
        x = torch.cat([f1, upsample(f2, f1.shape[-2:])], dim=1)
        return upsample(self.out(F.relu(self.conv(x))), out_size)[:, 0]
