"""Masked reconstruction losses and their per-scale combination."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from .attention import attention_loss
from .network import ScaleOutput


def _check(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None):
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if mask is not None:
        if mask.dim() == pred.dim() - 1:
            mask = mask.unsqueeze(-3)
        if mask.shape[-2:] != pred.shape[-2:] or mask.shape[0] != pred.shape[0]:
            raise ValueError(f"mask {tuple(mask.shape)} does not match prediction {tuple(pred.shape)}")
        return mask.to(pred.dtype)
    return None


def _masked_mse(pred, target, weight, normalization):
    sq = weight * (target - pred) ** 2
    if normalization == "pixels":
        return sq.mean()
    if normalization == "mask":
        # mean over masked pixels only; an empty mask contributes nothing
        denom = weight.expand_as(sq).sum()
        return sq.sum() / denom.clamp_min(1.0)
    raise ValueError(f"unknown normalization {normalization!r}")


def fg_loss(pred, target, mask, normalization: str = "pixels") -> torch.Tensor:
    """Squared error restricted to foreground pixels (``mask == 1``).

    Normalized by the total pixel count by default, so an all-background
    mask gives exactly zero loss and zero gradient.
    """
    mask = _check(pred, target, mask)
    return _masked_mse(pred, target, mask, normalization)


def bg_loss(pred, target, mask, normalization: str = "pixels") -> torch.Tensor:
    mask = _check(pred, target, mask)
    return _masked_mse(pred, target, 1.0 - mask, normalization)


def primary_loss(pred, target) -> torch.Tensor:
    _check(pred, target)
    return torch.mean((target - pred) ** 2)


@dataclass(frozen=True)
class LossWeights:
    attention: float = 1.0
    fg: float = 1.0
    bg: float = 1.0
    primary: float = 1.0

    def scaled(self, k: float) -> LossWeights:
        return LossWeights(self.attention * k, self.fg * k, self.bg * k, self.primary * k)


@dataclass
class LossBreakdown:
    """Per-scale loss terms (coarsest first) and the weighted total."""

    attention: list[torch.Tensor] = field(default_factory=list)
    fg: list[torch.Tensor] = field(default_factory=list)
    bg: list[torch.Tensor] = field(default_factory=list)
    primary: list[torch.Tensor] = field(default_factory=list)
    total: torch.Tensor | None = None

    def summary(self) -> dict[str, float]:
        """Scale-summed unweighted terms plus the total, as plain floats."""
        out = {
            f"l_{name}": float(sum(t.item() for t in getattr(self, name)))
            for name in ("attention", "fg", "bg", "primary")
        }
        out["total"] = float(self.total.item())
        return out


def total_loss(
    outputs: Sequence[ScaleOutput],
    sharp_pyramid: Sequence[torch.Tensor],
    mask_pyramid: Sequence[torch.Tensor],
    weights: LossWeights = LossWeights(),
    normalization: str = "pixels",
) -> LossBreakdown:
    """Sum every weighted term over every scale.

    ``mask_pyramid`` entries are (N, 1, H, W) binary tensors. Terms of
    branches a model does not have (no attention, single branch) are zero.
    """
    if not (len(outputs) == len(sharp_pyramid) == len(mask_pyramid)):
        raise ValueError("outputs, sharp pyramid and mask pyramid must have one entry per scale")
    br = LossBreakdown()
    total = None
    for out, sharp, mask in zip(outputs, sharp_pyramid, mask_pyramid):
        zero = out.sharp.new_zeros(())
        la = attention_loss(out.attention, mask) if out.attention is not None else zero
        lf = fg_loss(out.fg, sharp, mask, normalization) if out.fg is not None else zero
        lb = bg_loss(out.bg, sharp, mask, normalization) if out.bg is not None else zero
        lp = primary_loss(out.sharp, sharp)
        br.attention.append(la)
        br.fg.append(lf)
        br.bg.append(lb)
        br.primary.append(lp)
        term = weights.attention * la + weights.fg * lf + weights.bg * lb + weights.primary * lp
        total = term if total is None else total + term
    br.total = total
    return br
