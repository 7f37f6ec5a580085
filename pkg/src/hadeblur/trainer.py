"""Attention pretraining, the main training loop, and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence, TextIO

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .attention import AttentionNet, attention_loss
from .checkpoint import (
    apply_optimizer_state,
    apply_parameters,
    load_checkpoint,
    load_model,
    save_checkpoint,
)
from .config import TrainConfig
from .data import AnnotatedSample, sample_patch
from .errors import CheckpointError, ConfigError, DataError
from .losses import LossBreakdown, total_loss
from .network import DeblurNet, NetworkConfig, build_model, init_parameters

log = logging.getLogger(__name__)


def set_deterministic(seed: int | None = None) -> None:
    """Strict-deterministic mode: deterministic kernels and a fixed global seed."""
    torch.use_deterministic_algorithms(True)
    torch.backends.cudnn.benchmark = False
    if seed is not None:
        torch.manual_seed(seed)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """(H, W, C) or (H, W) array -> (1, C, H, W) float32 tensor."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def to_image(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) tensor -> (H, W, C) array."""
    return t[0].detach().cpu().numpy().transpose(1, 2, 0)


def image_pyramid(img: torch.Tensor, scales: int) -> list[torch.Tensor]:
    return [
        F.avg_pool2d(img, 2 ** (scales - 1 - s)) if s < scales - 1 else img for s in range(scales)
    ]


def mask_pyramid(mask: torch.Tensor, scales: int) -> list[torch.Tensor]:
    """Binary pyramid: a coarse pixel is foreground iff >= half of its block is."""
    return [
        (F.avg_pool2d(mask, 2 ** (scales - 1 - s)) >= 0.5).to(mask.dtype) if s < scales - 1 else mask
        for s in range(scales)
    ]


def draw_batch(
    samples: Sequence[AnnotatedSample],
    batch_size: int,
    crop: int,
    fg_fraction: float,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Sample a mini-batch in which ``fg_fraction`` of the patches contain foreground.

    Foreground patches come from samples with boxes; when there are none
    every patch is an unconstrained crop.
    """
    fg_pool = [s for s in samples if s.boxes]
    n_fg = int(round(fg_fraction * batch_size)) if fg_pool else 0
    blur, sharp, mask = [], [], []
    for i in range(batch_size):
        if i < n_fg:
            s = fg_pool[int(rng.integers(len(fg_pool)))]
        else:
            s = samples[int(rng.integers(len(samples)))]
        b, sh, m = sample_patch(s, crop, rng, require_fg=i < n_fg)
        blur.append(to_tensor(b))
        sharp.append(to_tensor(sh))
        mask.append(to_tensor(m))
    return torch.cat(blur), torch.cat(sharp), torch.cat(mask)


def _check_dataset(samples: Sequence[AnnotatedSample], crop: int, divisor: int) -> None:
    if not samples:
        raise DataError("dataset is empty")
    if crop % divisor:
        raise ConfigError(f"crop {crop} must be divisible by {divisor} for this network configuration")
    small = [s.source_id for s in samples if min(s.height, s.width) < crop]
    if small:
        raise DataError(f"images smaller than crop {crop}: {small[:5]}")


def _format_step(step: int, summary: dict[str, float]) -> str:
    terms = " ".join(f"{k}={v:.6g}" for k, v in summary.items())
    return f"step={step} {terms}"


# --- attention pretraining ----------------------------------------------


def pretrain_attention(
    samples: Sequence[AnnotatedSample],
    config: TrainConfig,
    attention: AttentionNet | None = None,
    widths: Sequence[int] = (32, 64, 128),
    out_dir: str | Path | None = None,
    log_file: TextIO | None = None,
    history: list[float] | None = None,
) -> AttentionNet:
    """Fit the attention subnetwork alone to the annotation masks with Adam.

    Runs ``config.pretrain_iters`` iterations on balanced patches. The
    per-iteration loss is appended to ``history`` when given.
    """
    _check_dataset(samples, config.crop, 8)
    if attention is None:
        attention = AttentionNet(3, widths)
        init_parameters(attention, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(attention.parameters(), lr=config.learning_rate)
    attn_config = NetworkConfig(attention_widths=tuple(c.out_channels for c in attention.down))
    for it in range(1, config.pretrain_iters + 1):
        blur, _, mask = draw_batch(samples, config.batch_size, config.crop, config.fg_batch_fraction, rng)
        loss = attention_loss(attention(blur), mask)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        value = float(loss.item())
        if history is not None:
            history.append(value)
        if log_file is not None:
            log_file.write(_format_step(it, {"l_attention": value}) + "\n")
        if out_dir is not None and (it % config.checkpoint_every == 0 or it == config.pretrain_iters):
            save_checkpoint(Path(out_dir) / f"attention_{it:07d}.ckpt", attention, attn_config,
                            kind="attention", iteration=it, extra={"loss": value})
    return attention


def save_attention(path: str | Path, attention: AttentionNet, iteration: int = 0) -> Path:
    widths = tuple(conv.out_channels for conv in attention.down)
    return save_checkpoint(path, attention, NetworkConfig(attention_widths=widths),
                           kind="attention", iteration=iteration)


def load_attention(path: str | Path) -> AttentionNet:
    ckpt = load_checkpoint(path)
    if ckpt.kind == "attention":
        attention = AttentionNet(3, ckpt.network_config.attention_widths)
        apply_parameters(attention, ckpt.params)
        return attention
    if ckpt.kind == "model":
        model, _ = load_model(path)
        if model.attention is None:
            raise CheckpointError(f"{path}: model has no attention module")
        return model.attention
    raise CheckpointError(f"{path}: unknown checkpoint kind {ckpt.kind!r}")


# --- main training --------------------------------------------------------


class Trainer:
    """Owns a model, its Adam optimizer and the patch sampler state.

    ``save``/``resume`` round-trip everything needed to continue a run
    exactly: parameters, optimizer moments, step counter and sampler RNG.
    """

    def __init__(
        self,
        model: DeblurNet,
        samples: Sequence[AnnotatedSample],
        config: TrainConfig,
        *,
        val_samples: Sequence[AnnotatedSample] | None = None,
        out_dir: str | Path | None = None,
        log_file: TextIO | None = None,
    ):
        _check_dataset(samples, config.crop, model.config.divisor)
        self.model = model
        self.samples = list(samples)
        self.config = config
        self.val_samples = list(val_samples) if val_samples is not None else self.samples
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log_file = log_file
        self.rng = np.random.default_rng(config.seed)
        if config.freeze_attention and model.attention is not None:
            model.attention.requires_grad_(False)
        params = [p for p in model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(params, lr=config.learning_rate)
        self.step_count = 0
        self.history: list[dict[str, float]] = []
        self.checkpoints: list[Path] = []

    @property
    def total_steps(self) -> int:
        if self.config.max_steps:
            return self.config.max_steps
        return self.config.epochs * math.ceil(len(self.samples) / self.config.batch_size)

    def losses(self, blur, sharp, mask) -> LossBreakdown:
        scales = self.model.config.scales
        outputs = self.model(blur, scales)
        return total_loss(
            outputs,
            image_pyramid(sharp, scales),
            mask_pyramid(mask, scales),
            self.config.weights,
            self.config.fg_normalization,
        )

    def step(self) -> dict[str, float]:
        cfg = self.config
        blur, sharp, mask = draw_batch(self.samples, cfg.batch_size, cfg.crop, cfg.fg_batch_fraction, self.rng)
        self.model.train()
        br = self.losses(blur, sharp, mask)
        self.optimizer.zero_grad(set_to_none=True)
        br.total.backward()
        self.optimizer.step()
        self.step_count += 1
        summary = br.summary()
        self.history.append(summary)
        if self.log_file is not None:
            self.log_file.write(_format_step(self.step_count, summary) + "\n")
            self.log_file.flush()
        return summary

    def run(
        self,
        n_steps: int | None = None,
        stop: Callable[[Trainer], bool] | None = None,
    ) -> list[dict[str, float]]:
        """Train ``n_steps`` more steps (default: up to ``total_steps``).

        ``stop`` is polled after every step and ends the run early when it
        returns True. A checkpoint is written every ``checkpoint_every``
        steps and at the end when ``out_dir`` is set.
        """
        end = self.total_steps if n_steps is None else self.step_count + n_steps
        while self.step_count < end:
            self.step()
            due = self.step_count % self.config.checkpoint_every == 0 or self.step_count == end
            if self.out_dir is not None and due:
                self.checkpoint()
            if stop is not None and stop(self):
                if self.out_dir is not None and not due:
                    self.checkpoint()
                break
        return self.history

    def validate(self) -> float:
        """Mean finest-scale PSNR over centre crops of the first ``val_images`` samples."""
        if not self.config.val_images:
            return math.nan
        scores = []
        crop = self.config.crop
        for s in self.val_samples[: self.config.val_images]:
            y, x = (s.height - crop) // 2, (s.width - crop) // 2
            pred = predict(self.model, s.blurred[y : y + crop, x : x + crop])[0]
            scores.append(metrics.psnr(np.clip(pred, 0, 1), s.sharp[y : y + crop, x : x + crop]))
        return float(np.mean(scores))

    def checkpoint(self) -> Path:
        val = self.validate()
        log.info("step %d: validation PSNR %.3f dB", self.step_count, val)
        path = self.save(self.out_dir / f"model_{self.step_count:07d}.ckpt", val_psnr=val)
        self.checkpoints.append(path)
        return path

    def save(self, path: str | Path, **extra) -> Path:
        meta = {
            "loss": self.history[-1]["total"] if self.history else None,
            "train_config": _jsonable(self.config),
            "rng_state": self.rng.bit_generator.state,
        }
        meta.update(extra)
        return save_checkpoint(path, self.model, self.model.config, kind="model",
                               iteration=self.step_count, optimizer=self.optimizer, extra=meta)

    @classmethod
    def resume(
        cls,
        path: str | Path,
        samples: Sequence[AnnotatedSample],
        config: TrainConfig | None = None,
        expected: NetworkConfig | None = None,
        **kwargs,
    ) -> Trainer:
        model, ckpt = load_model(path, expected)
        if config is None:
            config = TrainConfig(**ckpt.meta["train_config"])
        trainer = cls(model, samples, config, **kwargs)
        apply_optimizer_state(trainer.optimizer, model, ckpt.optim)
        trainer.step_count = int(ckpt.meta["iteration"])
        if ckpt.meta.get("rng_state"):
            trainer.rng.bit_generator.state = ckpt.meta["rng_state"]
        return trainer


def _jsonable(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


@dataclass
class TrainResult:
    model: DeblurNet
    history: list[dict[str, float]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def train(
    samples: Sequence[AnnotatedSample],
    config: TrainConfig,
    net_config: NetworkConfig | None = None,
    *,
    attention: AttentionNet | str | Path | None = None,
    from_scratch: bool = False,
    resume: str | Path | None = None,
    out_dir: str | Path | None = None,
    val_samples: Sequence[AnnotatedSample] | None = None,
    log_file: TextIO | None = None,
    stop: Callable[[Trainer], bool] | None = None,
) -> TrainResult:
    """Train the deblurring network.

    A model with attention starts from pretrained attention weights
    (``attention``) unless ``from_scratch`` is set. Samples without boxes
    have an all-zero mask, so they only ever feed the background and
    primary losses.
    """
    net_config = net_config or NetworkConfig()
    kwargs = dict(val_samples=val_samples, out_dir=out_dir, log_file=log_file)
    if resume is not None:
        trainer = Trainer.resume(resume, samples, config, expected=net_config, **kwargs)
    else:
        model = build_model(net_config, seed=config.seed)
        if net_config.attention:
            if attention is None and not from_scratch:
                raise ConfigError("pretrained attention weights are required (or request from_scratch)")
            if attention is not None:
                if not isinstance(attention, AttentionNet):
                    attention = load_attention(attention)
                apply_parameters(model.attention, dict(
                    (n, p.detach().numpy()) for n, p in attention.named_parameters()))
        trainer = Trainer(model, samples, config, **kwargs)
    trainer.run(stop=stop)
    return TrainResult(trainer.model, trainer.history, trainer.checkpoints)


# --- inference and evaluation -------------------------------------------


@torch.no_grad()
def predict(model: DeblurNet, blurred: np.ndarray, scales: int | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Deblur one (H, W, 3) image; returns the finest-scale output and its attention map.

    Inputs are edge-padded up to the network's size divisor and cropped back.
    The output is not clipped.
    """
    model.eval()
    scales = model.config.scales if scales is None else scales
    div = 2 ** (scales - 1) * 8
    h, w = blurred.shape[:2]
    ph, pw = (-h) % div, (-w) % div
    x = to_tensor(blurred)
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    out = model(x, scales)[-1]
    sharp = to_image(out.sharp)[:h, :w]
    attn = to_image(out.attention)[:h, :w, 0] if out.attention is not None else None
    return sharp, attn


def score(
    image_id: str, prediction: np.ndarray, sample: AnnotatedSample, luma: bool = True
) -> list[tuple[str, metrics.MetricReport]]:
    pred = np.clip(prediction, 0.0, 1.0)
    fg, bg, glob = metrics.region_metrics(pred, sample.sharp, sample.mask, luma=luma)
    return [(image_id, r) for r in (glob, fg, bg) if r is not None]


def evaluate(
    samples: Sequence[AnnotatedSample],
    model: DeblurNet | None = None,
    predictions: dict[str, np.ndarray] | None = None,
    report: str | Path | None = None,
    luma: bool = True,
) -> list[tuple[str, metrics.MetricReport]]:
    """Per-image global/fg/bg rows followed by their ``mean`` rows.

    Scores either ``model``'s finest-scale output or precomputed
    ``predictions`` keyed by source id. Optionally writes the CSV report.
    """
    if (model is None) == (predictions is None):
        raise ValueError("pass exactly one of model or predictions")
    if not samples:
        raise DataError("no samples to evaluate")
    rows = []
    for s in samples:
        if model is not None:
            pred = predict(model, s.blurred)[0]
        else:
            if s.source_id not in predictions:
                raise DataError(f"no prediction for {s.source_id}")
            pred = predictions[s.source_id]
        rows.extend(score(s.source_id, pred, s, luma))
    rows.extend(metrics.aggregate(rows))
    if report is not None:
        metrics.write_report(report, rows)
    return rows
