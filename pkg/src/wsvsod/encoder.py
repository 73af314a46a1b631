"""Two-stream saliency feature extraction: a four-stage CNN per modality plus ASPP."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

DESK_CHANNELS = (16, 32, 64, 64)
DESK_STRIDES = (2, 4, 8, 8)
RESNET_STRIDES = (4, 8, 16, 16)
ASPP_RATES = (6, 12, 18)
ASPP_SMALL_RATES = (1, 2, 4)
# below this spatial extent the large rates would reach past the feature map
ASPP_MIN_EXTENT = 24


@dataclass
class FeaturePyramid:
    stages: List[torch.Tensor]
    strides: Tuple[int, ...]

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, k):
        return self.stages[k]


def _groups(channels: int, preferred: int = 4) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class ConvNormReLU(nn.Sequential):
    def __init__(self, in_ch, out_ch, stride=1, dilation=1):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
            nn.GroupNorm(_groups(out_ch), out_ch),
            nn.ReLU(inplace=False),
        )


class ASPP(nn.Module):
    """Atrous spatial pyramid pooling.

    Five branches (1x1 conv, three dilated 3x3 convs, image pooling) are
    concatenated and projected back with a 1x1 conv. Dilation is picked per
    call so that small feature maps use ``small_rates``.
    """

    def __init__(self, in_ch, out_ch, rates=ASPP_RATES, small_rates=ASPP_SMALL_RATES, min_extent=ASPP_MIN_EXTENT):
        super().__init__()
        self.rates = tuple(rates)
        self.small_rates = tuple(small_rates)
        self.min_extent = min_extent
        self.branch1 = nn.Conv2d(in_ch, out_ch, 1)
        self.atrous = nn.ModuleList(nn.Conv2d(in_ch, out_ch, 3) for _ in self.rates)
        self.pool = nn.Conv2d(in_ch, out_ch, 1)
        self.project = nn.Conv2d(5 * out_ch, out_ch, 1)

    def effective_rates(self, h, w):
        return self.small_rates if min(h, w) < self.min_extent else self.rates

    def forward(self, x):
        h, w = x.shape[-2:]
        outs = [F.relu(self.branch1(x))]
        for conv, r in zip(self.atrous, self.effective_rates(h, w)):
            outs.append(F.relu(F.conv2d(x, conv.weight, conv.bias, padding=r, dilation=r)))
        pooled = F.relu(self.pool(x.mean(dim=(2, 3), keepdim=True)))
        outs.append(pooled.expand(-1, -1, h, w))
        return F.relu(self.project(torch.cat(outs, dim=1)))


class Encoder(nn.Module):
    """Stage k downsamples by strides[k] / strides[k-1] in its first conv.

    A stage that keeps the previous resolution uses dilation 2 instead, which is
    how the last stage keeps the stage-3 stride.
    """

    def __init__(self, in_ch=3, channels: Sequence[int] = DESK_CHANNELS, strides: Sequence[int] = DESK_STRIDES,
                 aspp_rates=ASPP_RATES):
        super().__init__()
        if len(channels) != len(strides):
            raise ShapeError("channels and strides must have the same length")
        self.channels = tuple(channels)
        self.strides = tuple(strides)
        stages, prev_ch, prev_stride = [], in_ch, 1
        for k, (ch, st) in enumerate(zip(channels, strides)):
            if st % prev_stride:
                raise ShapeError(f"stride {st} is not a multiple of {prev_stride}")
            factor = st // prev_stride
            dilation = 2 if factor == 1 and k > 0 else 1
            stages.append(nn.Sequential(
                ConvNormReLU(prev_ch, ch, stride=factor, dilation=dilation),
                ConvNormReLU(ch, ch, dilation=dilation),
            ))
            prev_ch, prev_stride = ch, st
        self.stages = nn.ModuleList(stages)
        self.aspp = ASPP(channels[-1], channels[-1], rates=aspp_rates)

    def check_input(self, x):
        h, w = x.shape[-2:]
        s = max(self.strides)
        if h % s or w % s:
            raise ShapeError(f"input {h}x{w} is not divisible by the largest stride {s}")

    def forward(self, x) -> List[torch.Tensor]:
        self.check_input(x)
        feats = []
        for k, stage in enumerate(self.stages):
            x = stage(x)
            if k == len(self.stages) - 1:
                x = self.aspp(x)
            feats.append(x)
        return feats


class ResNet50Encoder(nn.Module):
    """Full-scale option: ResNet-50 whose last stage is dilated instead of strided (strides 4,8,16,16)."""

    def __init__(self, in_ch=3, aspp_rates=ASPP_RATES):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None, replace_stride_with_dilation=[False, False, True])
        if in_ch != 3:
            net.conv1 = nn.Conv2d(in_ch, 64, 7, 2, 3, bias=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.strides = RESNET_STRIDES
        self.aspp = ASPP(2048, 256, rates=aspp_rates)
        self.channels = (256, 512, 1024, 256)

    check_input = Encoder.check_input

    def forward(self, x):
        self.check_input(x)
        x = self.stem(x)
        feats = []
        for k, stage in enumerate(self.stages):
            x = stage(x)
            feats.append(self.aspp(x) if k == 3 else x)
        return feats


def build_encoder(backbone="tiny", channels=DESK_CHANNELS, strides=DESK_STRIDES, aspp_rates=ASPP_RATES):
    if backbone == "tiny":
        return Encoder(3, channels, strides, aspp_rates)
    if backbone == "resnet50":
        return ResNet50Encoder(3, aspp_rates)
    raise ValueError(f"unknown backbone {backbone!r}")


class TwoStreamEncoder(nn.Module):
    """Same topology for both modalities, separate parameter storage."""

    def __init__(self, with_motion=True, **kwargs):
        super().__init__()
        self.appearance = build_encoder(**kwargs)
        self.motion = build_encoder(**kwargs) if with_motion else None
        if self.motion is not None:
            # identical initial weights, independent storage
            self.motion.load_state_dict(self.appearance.state_dict())

    @property
    def strides(self):
        return self.appearance.strides

    @property
    def channels(self):
        return self.appearance.channels

    def encode(self, x, stream="appearance") -> FeaturePyramid:
        net = self.appearance if stream == "appearance" else self.motion
        if net is None:
            raise ValueError("this encoder has no motion stream")
        return FeaturePyramid(net(x), self.strides)
