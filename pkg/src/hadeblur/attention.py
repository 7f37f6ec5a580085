"""Supervised human-aware attention: soft foreground mask prediction and feature gating."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn


class AttentionNet(nn.Module):
    """Small hourglass predicting a per-pixel foreground probability.

    Three 3x3 conv + ReLU + 2x2 max-pool stages reduce resolution by 8,
    three stride-2 4x4 transposed convs restore it, and a 1x1 conv gives
    the logits. Output resolution equals the input resolution.
    """

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (32, 64, 128)):
        super().__init__()
        w1, w2, w3 = widths
        self.down = nn.ModuleList(
            [
                nn.Conv2d(in_channels, w1, 3, padding=1),
                nn.Conv2d(w1, w2, 3, padding=1),
                nn.Conv2d(w2, w3, 3, padding=1),
            ]
        )
        self.up = nn.ModuleList(
            [
                nn.ConvTranspose2d(w3, w2, 4, stride=2, padding=1),
                nn.ConvTranspose2d(w2, w1, 4, stride=2, padding=1),
                nn.ConvTranspose2d(w1, w1, 4, stride=2, padding=1),
            ]
        )
        self.head = nn.Conv2d(w1, 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"attention input {w}x{h} must have sides divisible by 8")
        for conv in self.down:
            x = F.max_pool2d(F.relu(conv(x)), 2)
        for deconv in self.up:
            x = F.relu(deconv(x))
        return self.head(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


def attention_loss(attn: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared residual between the attention map and the binary mask."""
    if attn.shape != mask.shape:
        raise ValueError(f"attention {tuple(attn.shape)} and mask {tuple(mask.shape)} differ")
    return torch.mean((mask.to(attn.dtype) - attn) ** 2)


def resample_attention(attn: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-average an (N, 1, H, W) map down to ``size``."""
    h, w = attn.shape[-2:]
    th, tw = size
    if (h, w) == (th, tw):
        return attn
    if h % th or w % tw or h // th != w // tw:
        raise ValueError(f"cannot resample attention {w}x{h} onto features {tw}x{th}")
    return F.avg_pool2d(attn, h // th)


def gate_features(feat: torch.Tensor, attn: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split ``feat`` into foreground (``A * H``) and background (``(1 - A) * H``) streams."""
    attn = resample_attention(attn, feat.shape[-2:])
    fg = attn * feat
    # feat - fg rather than (1 - A) * feat keeps fg + bg == feat to rounding.
    bg = feat - fg
    return fg, bg
