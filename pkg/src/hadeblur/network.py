"""Encoder, three-branch decoder with deep fusion, and the weight-shared multi-scale model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .attention import AttentionNet, gate_features

BRANCHES = ("fg", "bg")
N_LEVELS = 3
RESIDUAL_INIT_SCALE = 0.1


@dataclass
class NetworkConfig:
    base_channels: int = 32
    n_residual_units: int = 9
    decoder_blocks: int = N_LEVELS
    scales: int = 3
    input_channels: int = 6
    attention: bool = True
    branches: tuple[str, ...] = BRANCHES
    attention_widths: tuple[int, int, int] = (32, 64, 128)
    # encoder shortcuts into the fg/bg decoders as well as the primary one
    branch_shortcuts: bool = True
    global_residual: bool = False

    def __post_init__(self):
        self.branches = tuple(self.branches)
        self.attention_widths = tuple(int(w) for w in self.attention_widths)
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.n_residual_units < 3 or self.n_residual_units % 3:
            raise ValueError("n_residual_units must be a positive multiple of 3")
        if self.decoder_blocks != N_LEVELS:
            raise ValueError(f"decoder_blocks must equal the encoder depth ({N_LEVELS})")
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.input_channels != 6:
            raise ValueError("input_channels must be 6 (image plus previous-scale estimate)")
        if len(self.attention_widths) != 3:
            raise ValueError("attention_widths needs three entries")
        unknown = set(self.branches) - set(BRANCHES)
        if unknown or len(set(self.branches)) != len(self.branches):
            raise ValueError(f"branches must be a subset of {BRANCHES}, got {self.branches}")
        if self.branches and not self.attention:
            raise ValueError("fg/bg branches need the attention module; use branches=() without it")

    @property
    def divisor(self) -> int:
        """Required divisor of input height and width for :meth:`DeblurNet.forward`."""
        return 2 ** (self.scales - 1) * 8

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branches"] = list(self.branches)
        d["attention_widths"] = list(self.attention_widths)
        return d


class ScaleOutput(NamedTuple):
    sharp: torch.Tensor
    fg: torch.Tensor | None
    bg: torch.Tensor | None
    attention: torch.Tensor | None


class ResidualUnit(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def _units(channels: int, n: int) -> list[nn.Module]:
    return [ResidualUnit(channels) for _ in range(n)]


class Encoder(nn.Module):
    """Three resolution levels of residual units separated by stride-2 5x5 convs."""

    def __init__(self, in_channels: int, base: int, units_per_level: int):
        super().__init__()
        c = [base, base * 2, base * 4]
        self.stem = nn.Conv2d(in_channels, c[0], 5, padding=2)
        self.reduce = nn.ModuleList(
            [nn.Conv2d(c[i], c[i + 1], 5, stride=2, padding=2) for i in range(N_LEVELS - 1)]
        )
        self.levels = nn.ModuleList([nn.Sequential(*_units(ch, units_per_level)) for ch in c])

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"encoder input {w}x{h} must have sides divisible by 4")
        if x.shape[1] != self.stem.in_channels:
            raise ValueError(f"encoder expects {self.stem.in_channels} channels, got {x.shape[1]}")
        skips = []
        x = self.levels[0](F.relu(self.stem(x)))
        skips.append(x)
        for reduce, level in zip(self.reduce, self.levels[1:]):
            x = level(F.relu(reduce(x)))
            skips.append(x)
        return x, skips


def _decoder_blocks(base: int, units_per_level: int) -> nn.ModuleList:
    c = [base * 4, base * 2, base]
    blocks = []
    for l, ch in enumerate(c):
        if l < N_LEVELS - 1:
            tail = [nn.ConvTranspose2d(ch, c[l + 1], 4, stride=2, padding=1), nn.ReLU()]
        else:
            tail = [nn.Conv2d(ch, 3, 5, padding=2)]
        blocks.append(nn.Sequential(*_units(ch, units_per_level), *tail))
    return nn.ModuleList(blocks)


def _shortcut(x: torch.Tensor, skips: list[torch.Tensor], level: int) -> torch.Tensor:
    # the coarsest skip is the encoder output itself, already the decoder input
    if level == 0:
        return x
    skip = skips[N_LEVELS - 1 - level]
    if skip.shape != x.shape:
        raise ValueError(f"shortcut {tuple(skip.shape)} does not match decoder feature {tuple(x.shape)}")
    return x + skip


class DomainDecoder(nn.Module):
    """Mirror of the encoder; returns the image and every block output ``D^0..D^L``."""

    def __init__(self, base: int, units_per_level: int, shortcuts: bool = True):
        super().__init__()
        self.blocks = _decoder_blocks(base, units_per_level)
        self.shortcuts = shortcuts

    def forward(self, feat, skips):
        inter = [feat]
        x = feat
        for l, block in enumerate(self.blocks):
            if self.shortcuts:
                x = _shortcut(x, skips, l)
            x = block(x)
            inter.append(x)
        return x, inter


class PrimaryDecoder(nn.Module):
    """Decoder whose block ``l`` reads the 1x1-compressed concatenation
    of the previous-level features of every domain branch and its own."""

    def __init__(self, base: int, units_per_level: int, n_branches: int):
        super().__init__()
        self.blocks = _decoder_blocks(base, units_per_level)
        self.n_branches = n_branches
        if n_branches:
            c = [base * 4, base * 2, base]
            self.compress = nn.ModuleList([nn.Conv2d(ch * (n_branches + 1), ch, 1) for ch in c])

    def forward(self, feat, branch_inters, skips):
        if len(branch_inters) != self.n_branches:
            raise ValueError(f"expected {self.n_branches} branch feature lists, got {len(branch_inters)}")
        for inter in branch_inters:
            if len(inter) != len(self.blocks) + 1:
                raise ValueError("branch intermediates are not level-aligned with the primary decoder")
        x = feat
        for l, block in enumerate(self.blocks):
            if self.n_branches:
                parts = [inter[l] for inter in branch_inters] + [x]
                if any(p.shape[-2:] != x.shape[-2:] for p in parts):
                    raise ValueError(f"branch features at level {l} are misaligned")
                x = self.compress[l](torch.cat(parts, dim=1))
            x = _shortcut(x, skips, l)
            x = block(x)
        return x


class DeblurNet(nn.Module):
    """Human-aware multi-scale deblurring model.

    One parameter set serves every scale. Ablations are configured with
    ``attention=False, branches=()`` (plain encoder-decoder), a single entry
    in ``branches``, or ``scales=1``.
    """

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config = config or NetworkConfig()
        units = config.n_residual_units // 3
        self.attention = AttentionNet(3, config.attention_widths) if config.attention else None
        self.encoder = Encoder(config.input_channels, config.base_channels, units)
        self.branch_decoders = nn.ModuleDict(
            {
                name: DomainDecoder(config.base_channels, units, config.branch_shortcuts)
                for name in config.branches
            }
        )
        self.primary = PrimaryDecoder(config.base_channels, units, len(config.branches))
        # lifts the previous scale's estimate onto the next scale
        self.upsample = nn.ConvTranspose2d(3, 3, 4, stride=2, padding=1)

    def forward_scale(self, blurred: torch.Tensor, previous: torch.Tensor) -> ScaleOutput:
        """Single-scale pass on ``blurred`` with the 3-channel estimate ``previous``."""
        feat, skips = self.encoder(torch.cat([blurred, previous], dim=1))
        attn = None
        outs: dict[str, torch.Tensor] = {}
        inters = []
        if self.attention is not None:
            attn = self.attention(blurred)
            gated = dict(zip(BRANCHES, gate_features(feat, attn)))
            for name, dec in self.branch_decoders.items():
                outs[name], inter = dec(gated[name], skips)
                inters.append(inter)
        sharp = self.primary(feat, inters, skips)
        if self.config.global_residual:
            sharp = sharp + blurred
            outs = {k: v + blurred for k, v in outs.items()}
        return ScaleOutput(sharp, outs.get("fg"), outs.get("bg"), attn)

    def forward(self, blurred: torch.Tensor, scales: int | None = None) -> list[ScaleOutput]:
        """Coarse-to-fine pass; returns one :class:`ScaleOutput` per scale, coarsest first."""
        scales = self.config.scales if scales is None else scales
        div = 2 ** (scales - 1) * 8
        h, w = blurred.shape[-2:]
        if h % div or w % div:
            raise ValueError(f"input {w}x{h} must have sides divisible by {div} for {scales} scales")
        pyramid = [
            F.avg_pool2d(blurred, 2 ** (scales - 1 - s)) if s < scales - 1 else blurred
            for s in range(scales)
        ]
        outputs = []
        previous = pyramid[0]
        for s, level in enumerate(pyramid):
            if s > 0:
                previous = self.upsample(outputs[-1].sharp)
            outputs.append(self.forward_scale(level, previous))
        return outputs


def init_parameters(model: nn.Module, mode: str = "normal", seed: int = 0) -> None:
    """Fan-in scaled normal kernels with zero biases, or all zeros (``mode="zeros"``).

    Kernels get std ``1/sqrt(fan_in)``; the closing conv of each residual
    unit is scaled down by ``RESIDUAL_INIT_SCALE`` so the unnormalized
    residual stacks start near identity. Parameters are visited in sorted
    name order from a private generator, so the result depends only on
    parameter names, shapes and the seed.
    """
    if mode not in ("normal", "zeros"):
        raise ValueError(f"unknown init mode {mode!r}")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if mode == "zeros" or name.endswith("bias"):
                p.zero_()
                continue
            module = model.get_submodule(name.rsplit(".", 1)[0])
            # Conv2d weight: (out, in, k, k); ConvTranspose2d weight: (in, out, k, k)
            if isinstance(module, nn.ConvTranspose2d):
                stride = module.stride[0]
                fan_in = max(1, p.shape[0] * p.shape[2] * p.shape[3] // (stride * stride))
            else:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            std = 1.0 / math.sqrt(fan_in)
            if name.endswith("conv2.weight"):
                std *= RESIDUAL_INIT_SCALE
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def build_model(config: NetworkConfig | None = None, init: str = "normal", seed: int = 0) -> DeblurNet:
    model = DeblurNet(config)
    init_parameters(model, init, seed)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
