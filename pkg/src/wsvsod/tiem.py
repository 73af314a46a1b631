"""Temporal enhancement with a cascaded bidirectional ConvLSTM."""
from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn as nn


class RecurrentState(NamedTuple):
    h: torch.Tensor
    c: torch.Tensor

    @classmethod
    def zeros_like(cls, x, channels=None):
        n, c, hh, ww = x.shape
        z = x.new_zeros(n, channels or c, hh, ww)
        return cls(z, z.clone())


class ConvLSTMCell(nn.Module):
    def __init__(self, in_ch, hidden_ch, kernel_size=3):
        super().__init__()
        self.hidden_ch = hidden_ch
        self.conv = nn.Conv2d(in_ch + hidden_ch, 4 * hidden_ch, kernel_size, padding=kernel_size // 2)

    def forward(self, x, state: Optional[RecurrentState] = None) -> RecurrentState:
        if state is None:
            state = RecurrentState.zeros_like(x, self.hidden_ch)
        z = self.conv(torch.cat([x, state.h], dim=1))
        i, f, o, g = torch.split(z, self.hidden_ch, dim=1)
        i, f, o, g = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o), torch.tanh(g)
        c = f * state.c + i * g
        return RecurrentState(o * torch.tanh(c), c)


class TIEM(nn.Module):
    """Input (T,C,H,W) with time on the leading axis; output has the same shape.

    With ``cascade=True`` the backward cell reads the forward hidden states,
    otherwise it reads the input sequence like a conventional BiConvLSTM.
    """

    def __init__(self, channels=32, kernel_size=3, cascade=True):
        super().__init__()
        self.cascade = cascade
        self.fwd = ConvLSTMCell(channels, channels, kernel_size)
        self.bwd = ConvLSTMCell(channels, channels, kernel_size)
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, g_seq, return_states=False):
        if g_seq.shape[0] < 1:
            raise ValueError("TIEM needs at least one time step")
        T = g_seq.shape[0]
        frames = g_seq.unsqueeze(1)  # (T, 1, C, H, W)
        state, h_fwd = None, []
        for t in range(T):
            state = self.fwd(frames[t], state)
            h_fwd.append(state.h)
        back_in = h_fwd if self.cascade else list(frames)
        state, h_bwd = None, [None] * T
        for t in reversed(range(T)):
            state = self.bwd(back_in[t], state)
            h_bwd[t] = state.h
        Hf, Hb = torch.cat(h_fwd), torch.cat(h_bwd)
        out = self.proj(torch.cat([Hf, Hb], dim=1))
        if return_states:
            return out, Hf, Hb
        return out
