"""Degradation score predictor over segmentation latents.

A spatial branch (3x3 depthwise conv) and a frequency branch (3x3 conv over
the per-channel FFT amplitude) are summed, squeezed to one channel and turned
into a spatial softmax attention map. The map pools both branches into two
C-vectors which an MLP with a sigmoid output turns into a score in (0, 1).
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from . import nn
from .params import ParamStore

PREFIX = "dpm/"


def init_dpm(channels: int, seed: int, aggregate: str = "concat") -> ParamStore:
    if aggregate not in ("concat", "add"):
        raise ValueError("aggregate must be 'concat' or 'add'")
    gen = torch.Generator().manual_seed(int(seed))
    p = ParamStore()
    nn.add_conv(p, gen, PREFIX + "spatial", channels, channels, 3, groups=channels)
    nn.add_conv(p, gen, PREFIX + "freq", channels, channels, 3)
    nn.add_conv(p, gen, PREFIX + "squeeze", 1, channels, 1)
    din = 2 * channels if aggregate == "concat" else channels
    nn.add_linear(p, gen, PREFIX + "mlp1", channels, din)
    nn.add_linear(p, gen, PREFIX + "mlp2", 1, channels)
    return p


def amplitude_spectrum(z: torch.Tensor) -> torch.Tensor:
    """Per-channel magnitude of the unnormalised 2-D DFT, same shape as ``z``."""
    return torch.fft.fft2(z, dim=(-2, -1)).abs()


def spatial_softmax(m: torch.Tensor) -> torch.Tensor:
    """Softmax over all spatial positions of a (B, 1, H, W) map."""
    if m.ndim != 4 or m.shape[1] != 1:
        raise ValueError(f"expected (B, 1, H, W) map, got {tuple(m.shape)}")
    b, _, h, w = m.shape
    return torch.softmax(m.reshape(b, h * w), dim=1).reshape(b, 1, h, w)


def dpm_features(p: ParamStore, z: torch.Tensor):
    channels = p[PREFIX + "spatial.w"].shape[0]
    if z.ndim != 4 or z.shape[1] != channels:
        raise ValueError(f"expected (B, {channels}, H, W) latent, got {tuple(z.shape)}")
    f_sp = nn.conv(p, PREFIX + "spatial", z, groups=channels)
    f_fr = nn.conv(p, PREFIX + "freq", amplitude_spectrum(z))
    attn = spatial_softmax(nn.conv(p, PREFIX + "squeeze", f_sp + f_fr))
    d_sp = (attn * f_sp).sum(dim=(-2, -1))
    d_fr = (attn * f_fr).sum(dim=(-2, -1))
    return attn, d_sp, d_fr


def predict_score(p: ParamStore, z: torch.Tensor) -> torch.Tensor:
    """Degradation score per batch item, shape (B,), strictly inside (0, 1)."""
    _, d_sp, d_fr = dpm_features(p, z)
    din = p[PREFIX + "mlp1.w"].shape[1]
    d = torch.cat([d_sp, d_fr], dim=1) if din == 2 * d_sp.shape[1] else d_sp + d_fr
    h = F.relu(nn.linear(p, PREFIX + "mlp1", d))
    return torch.sigmoid(nn.linear(p, PREFIX + "mlp2", h)).squeeze(1)
