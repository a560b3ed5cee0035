#!/usr/bin/env python3
"""
Mask-conditioned denoiser
Encoder-decoder over images; decoder blocks normalize features with
scale/shift predicted per pixel from the one-hot label map
"""

import math
from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from semantic_masks import NUM_CLASSES


def _groups(channels: int) -> int:
    for g in (32, 16, 8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)"""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class SpatialModulation(nn.Module):
    """Parameter-free group norm followed by label-map predicted scale and shift"""

    def __init__(self, channels: int, label_nc: int = NUM_CLASSES, hidden: int = 64):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(label_nc, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, segmap: torch.Tensor) -> torch.Tensor:
        segmap = F.interpolate(segmap, size=x.shape[2:], mode="nearest")
        actv = self.shared(segmap)
        return self.norm(x) * (1 + self.gamma(actv)) + self.beta(actv)


class ResBlock(nn.Module):
    """Residual block with timestep injection; decoder variant uses spatial modulation"""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, semantic: bool = False,
                 label_nc: int = NUM_CLASSES, spade_hidden: int = 64):
        super().__init__()
        self.semantic = semantic
        if semantic:
            self.norm1 = SpatialModulation(in_ch, label_nc, spade_hidden)
            self.norm2 = SpatialModulation(out_ch, label_nc, spade_hidden)
        else:
            self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
            self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def _norm(self, norm: nn.Module, x: torch.Tensor, segmap: torch.Tensor) -> torch.Tensor:
        return norm(x, segmap) if self.semantic else norm(x)

    def forward(self, x: torch.Tensor, emb: torch.Tensor, segmap: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self._norm(self.norm1, x, segmap)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self._norm(self.norm2, h, segmap)))
        return h + self.skip(x)


class SemanticDenoiser(nn.Module):
    """
    Predicts the noise in x_t given the timestep and a one-hot label map

    With learned_variance the output carries a second channel that
    interpolates the log variance between beta and the posterior variance.
    """

    def __init__(self, in_channels: int = 1, label_nc: int = NUM_CLASSES, base_channels: int = 64,
                 channel_mults: Sequence[int] = (1, 2, 4, 4), learned_variance: bool = False,
                 spade_hidden: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.label_nc = label_nc
        self.learned_variance = learned_variance
        emb_dim = base_channels * 4
        self.base_channels = base_channels
        # spatial sizes are padded up to a multiple of this before the encoder
        self.size_multiple = 2 ** (len(channel_mults) - 1)

        self.time_mlp = nn.Sequential(
            nn.Linear(base_channels, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(in_channels, base_channels, 3, padding=1)

        widths = [base_channels * m for m in channel_mults]
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = base_channels
        skip_channels: List[int] = []
        for level, width in enumerate(widths):
            self.down_blocks.append(ResBlock(ch, width, emb_dim))
            ch = width
            skip_channels.append(ch)
            last = level == len(widths) - 1
            self.downsamples.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.mid = ResBlock(ch, ch, emb_dim, semantic=True, label_nc=label_nc, spade_hidden=spade_hidden)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level, width in reversed(list(enumerate(widths))):
            self.up_blocks.append(ResBlock(ch + skip_channels[level], width, emb_dim, semantic=True,
                                           label_nc=label_nc, spade_hidden=spade_hidden))
            ch = width
            self.upsamples.append(nn.Identity() if level == 0 else nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, ch, 3, padding=1)))

        out_channels = in_channels * 2 if learned_variance else in_channels
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, segmap: torch.Tensor) -> torch.Tensor:
        height, width = x.shape[-2:]
        pad_h, pad_w = -height % self.size_multiple, -width % self.size_multiple
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
            segmap = F.pad(segmap, (0, pad_w, 0, pad_h), mode="replicate")

        emb = self.time_mlp(timestep_embedding(t, self.base_channels))
        h = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, emb, segmap)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb, segmap)
        for block, up in zip(self.up_blocks, self.upsamples):
            h = block(torch.cat([h, skips.pop()], dim=1), emb, segmap)
            h = up(h)
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out[..., :height, :width]


def build_denoiser(cfg) -> SemanticDenoiser:
    """SemanticDenoiser from a DiffusionTrainConfig"""
    return SemanticDenoiser(
        in_channels=1,
        label_nc=NUM_CLASSES,
        base_channels=cfg.base_channels,
        channel_mults=tuple(cfg.channel_mults),
        learned_variance=cfg.learned_variance,
    )
