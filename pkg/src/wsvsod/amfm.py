"""Appearance-motion fusion: gate, channel attention and spatial attention in residual form.

The ablation fusions (element-wise addition, concatenation) and the
appearance-only lateral used by the base model live here too, so every
stage-fusion module has the call signature ``fusion(f_r, f_m) -> g``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

FUSION_CHANNELS = 32


@dataclass
class FusionIntermediates:
    g_rm: torch.Tensor
    gates: tuple  # (G_r, G_m), each (N,)
    ca: tuple  # (c_r, c_m), each (N, C)
    sa: tuple  # (s_r, s_m), each (N, H, W)
    g_r: torch.Tensor
    g_m: torch.Tensor
    g_amfm: torch.Tensor


def _check_pair(f_r, f_m):
    if f_r.shape[-2:] != f_m.shape[-2:] or f_r.shape[0] != f_m.shape[0]:
        raise ShapeError(f"appearance {tuple(f_r.shape)} and motion {tuple(f_m.shape)} features do not align")


class Reduce(nn.Sequential):
    def __init__(self, in_ch, out_ch=FUSION_CHANNELS):
        super().__init__(nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=False))


def fuse(f_r, f_m, gates, ca, sa):
    """g = G*f*(1 + s (x) c) per modality, summed over modalities.

    ``s (x) c`` is the outer product of a spatial map (N,H,W) and a channel
    vector (N,C), giving an (N,C,H,W) modulation.
    """
    G_r, G_m = gates
    c_r, c_m = ca
    s_r, s_m = sa
    mod_r = s_r[:, None, :, :] * c_r[:, :, None, None]
    mod_m = s_m[:, None, :, :] * c_m[:, :, None, None]
    g_r = G_r.view(-1, 1, 1, 1) * f_r * (1 + mod_r)
    g_m = G_m.view(-1, 1, 1, 1) * f_m * (1 + mod_m)
    return g_r, g_m, g_r + g_m


class AMFM(nn.Module):
    def __init__(self, in_r, in_m, channels=FUSION_CHANNELS, softmax_mode="within"):
        super().__init__()
        if softmax_mode not in ("within", "across"):
            raise ValueError(f"softmax_mode must be 'within' or 'across', got {softmax_mode!r}")
        C = channels
        self.channels = C
        self.softmax_mode = softmax_mode
        self.reduce_r = Reduce(in_r, C)
        self.reduce_m = Reduce(in_m, C)
        self.project = nn.Conv2d(2 * C, C, 1)
        self.gate_conv = nn.Conv2d(C, 2, 1)
        self.channel_fc = nn.Linear(C, 2 * C)
        self.spatial_conv = nn.Conv2d(C, 2, 1)

    def fuse_inputs(self, f_r, f_m):
        """Reduce both streams to C channels; returns (f_r', f_m', g_rm)."""
        _check_pair(f_r, f_m)
        r, m = self.reduce_r(f_r), self.reduce_m(f_m)
        return r, m, self.project(torch.cat([r, m], dim=1))

    def gate(self, g_rm):
        G = torch.sigmoid(self.gate_conv(g_rm)).mean(dim=(2, 3))
        return G[:, 0], G[:, 1]

    def channel_attention(self, g_rm):
        pooled = g_rm.amax(dim=(2, 3))
        logits = self.channel_fc(pooled).view(-1, 2, self.channels)
        if self.softmax_mode == "within":
            ca = torch.softmax(logits, dim=2)
        else:
            ca = torch.softmax(logits, dim=1)
        return ca[:, 0], ca[:, 1]

    def spatial_attention(self, g_rm):
        sa = torch.sigmoid(self.spatial_conv(g_rm))
        return sa[:, 0], sa[:, 1]

    def forward(self, f_r, f_m, return_intermediates=False):
        r, m, g_rm = self.fuse_inputs(f_r, f_m)
        gates = self.gate(g_rm)
        ca = self.channel_attention(g_rm)
        sa = self.spatial_attention(g_rm)
        g_r, g_m, out = fuse(r, m, gates, ca, sa)
        if return_intermediates:
            return out, FusionIntermediates(g_rm, gates, ca, sa, g_r, g_m, out)
        return out


class AddFusion(nn.Module):
    def __init__(self, in_r, in_m, channels=FUSION_CHANNELS):
        super().__init__()
        self.reduce_r = Reduce(in_r, channels)
        self.reduce_m = Reduce(in_m, channels)

    def forward(self, f_r, f_m):
        _check_pair(f_r, f_m)
        return self.reduce_r(f_r) + self.reduce_m(f_m)


class ConcatFusion(nn.Module):
    def __init__(self, in_r, in_m, channels=FUSION_CHANNELS):
        super().__init__()
        self.reduce_r = Reduce(in_r, channels)
        self.reduce_m = Reduce(in_m, channels)
        self.project = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, f_r, f_m):
        _check_pair(f_r, f_m)
        return self.project(torch.cat([self.reduce_r(f_r), self.reduce_m(f_m)], dim=1))


class AppearanceLateral(nn.Module):
    """Base-model stand-in for fusion: a conv on the appearance feature only."""

    def __init__(self, in_r, in_m=None, channels=FUSION_CHANNELS):
        super().__init__()
        self.reduce_r = Reduce(in_r, channels)

    def forward(self, f_r, f_m: Optional[torch.Tensor] = None):
        return self.reduce_r(f_r)
