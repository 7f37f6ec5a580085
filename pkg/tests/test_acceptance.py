"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary. Criteria 8 and 9 train small networks on the CPU and
take a few minutes each.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE, make_dataset
from hadeblur.attention import AttentionNet, attention_loss, gate_features
from hadeblur.checkpoint import load_checkpoint, load_model, save_checkpoint
from hadeblur.config import TrainConfig
from hadeblur.data import (
    AnnotatedSample,
    BoundingBox,
    area_downsample,
    make_rectangle_sample,
    motion_blur_pair,
    synthesize_blur,
)
from hadeblur.losses import bg_loss, fg_loss, primary_loss
from hadeblur.metrics import psnr, ssim
from hadeblur.network import NetworkConfig, build_model
from hadeblur.trainer import Trainer, predict, pretrain_attention, set_deterministic, to_tensor


def report(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {name} ({detail})"
    ACCEPTANCE.append(line)
    print(line)


def central_difference(fn, x, eps=1e-6):
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn(x).item()
        flat[i] = orig - eps
        lo = fn(x).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def analytic(fn, x):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    return x.grad


def test_1_gating_partition():
    g = torch.Generator().manual_seed(1)
    worst = 0.0
    for _ in range(100):
        h = torch.randn(2, 8, 16, 16, generator=g)
        a = torch.rand(2, 1, 16, 16, generator=g)
        fg, bg = gate_features(h, a)
        worst = max(worst, (fg + bg - h).abs().max().item())
    ok = worst <= 1e-6
    report(1, "gating partition", ok, f"max residual {worst:.3g}")
    assert ok


def test_2_attention_range_and_supervision():
    torch.manual_seed(0)
    net = AttentionNet(3, (8, 8, 8))
    with torch.no_grad():
        a = net(torch.rand(4, 3, 32, 32) * 4 - 2)
    in_range = bool(((a > 0) & (a < 1)).all())
    gt = (torch.rand(2, 1, 16, 16) > 0.5).float()
    half = attention_loss(torch.full_like(gt, 0.5), gt).item()
    flipped = attention_loss(1 - gt, gt).item()
    ok = in_range and abs(half - 0.25) <= 1e-7 and abs(flipped - 1.0) <= 1e-7
    report(2, "attention range and supervision", ok,
           f"open interval {in_range}, loss(0.5)={half:.9f}, loss(1-G)={flipped:.9f}")
    assert ok


def test_3_gradient_audit():
    g = torch.Generator().manual_seed(0)
    pred = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
    target = torch.rand(1, 3, 32, 32, generator=g, dtype=torch.float64)
    mask = (torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64) > 0.6).double()
    attn = torch.rand(1, 1, 32, 32, generator=g, dtype=torch.float64)
    cases = {
        "attention": (lambda x: attention_loss(x, mask), attn),
        "fg": (lambda x: fg_loss(x, target, mask), pred),
        "bg": (lambda x: bg_loss(x, target, mask), pred),
        "primary": (lambda x: primary_loss(x, target), pred),
    }
    errs = {}
    for name, (fn, x) in cases.items():
        num = central_difference(fn, x.clone())
        ana = analytic(fn, x)
        errs[name] = (torch.linalg.norm(ana - num) / torch.linalg.norm(num)).item()
    grad_fg = analytic(lambda x: fg_loss(x, target, mask), pred)
    zero_outside = bool((grad_fg[(mask == 0).expand_as(grad_fg)] == 0).all())
    ok = max(errs.values()) < 1e-4 and zero_outside
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errs.items())
    report(3, "gradient audit", ok, f"relative errors {detail}; fg grad exactly 0 off-mask {zero_outside}")
    assert ok


def test_4_mask_partition_identity():
    g = torch.Generator().manual_seed(4)
    worst = 0.0
    for _ in range(50):
        p = torch.rand(2, 3, 24, 24, generator=g)
        t = torch.rand(2, 3, 24, 24, generator=g)
        m = (torch.rand(2, 1, 24, 24, generator=g) > torch.rand(1, generator=g)).float()
        worst = max(worst, abs((fg_loss(p, t, m) + bg_loss(p, t, m) - primary_loss(p, t)).item()))
    ok = worst <= 1e-6
    report(4, "mask partition identity", ok, f"max deviation {worst:.3g}")
    assert ok


def test_5_metric_oracles():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 1 - 16 / 255, size=(32, 32, 3))
    p = psnr(a, a + 16 / 255)
    x = rng.uniform(size=(32, 32, 3))
    s_self = ssim(x, x)
    s_const = ssim(np.full((32, 32, 3), 0.5), np.full((32, 32, 3), 0.25))
    ok = abs(p - 24.0484) <= 1e-3 and abs(s_self - 1) <= 1e-6 and abs(s_const - 0.8001) <= 1e-3
    report(5, "metric oracles", ok, f"PSNR {p:.4f} dB, SSIM(x,x) {s_self:.8f}, SSIM(0.5,0.25) {s_const:.4f}")
    assert ok


def test_6_synthesis_oracles():
    rng = np.random.default_rng(6)
    frame = rng.uniform(size=(8, 8, 3)).astype(np.float32)
    blur, sharp = synthesize_blur([frame] * 11)
    identical = np.array_equal(blur, sharp)
    frames = [np.zeros((4, 4, 3), np.float32)] * 10 + [np.ones((4, 4, 3), np.float32)]
    blur2, sharp2 = synthesize_blur(frames)
    dev = float(np.abs(blur2 - 1 / 11).max())
    ok = identical and dev <= 1e-7 and not sharp2.any()
    report(6, "synthesis oracles", ok, f"identical window exact {identical}, mean deviation {dev:.2e}, sharp zero {not sharp2.any()}")
    assert ok


def test_7_weight_sharing(tmp_path):
    one = build_model(NetworkConfig(scales=1), seed=7)
    three = build_model(NetworkConfig(scales=3), seed=7)
    p1 = load_checkpoint(save_checkpoint(tmp_path / "1.ckpt", one, one.config)).params
    p3 = load_checkpoint(save_checkpoint(tmp_path / "3.ckpt", three, three.config)).params
    same = p1.keys() == p3.keys() and all(p1[k].tobytes() == p3[k].tobytes() for k in p1)
    report(7, "weight sharing across scales", same, f"{len(p1)} tensors, identical bytes {same}")
    assert same


def _iou(pred: np.ndarray, gt: np.ndarray) -> float:
    return (pred & gt).sum() / max(1, (pred | gt).sum())


@pytest.mark.slow
def test_8_attention_pretraining():
    set_deterministic(0)
    rng = np.random.default_rng(0)
    train = [make_rectangle_sample(rng, 64) for _ in range(200)]
    rng = np.random.default_rng(1)
    held_out = [make_rectangle_sample(rng, 64) for _ in range(50)]
    cfg = TrainConfig(learning_rate=1e-4, batch_size=8, crop=64, pretrain_iters=2000, fg_batch_fraction=1.0)
    start = time.time()
    att = pretrain_attention(train, cfg, widths=(16, 32, 64))
    elapsed = time.time() - start
    x = torch.cat([to_tensor(s.blurred) for s in held_out])
    with torch.no_grad():
        a = att(x)[:, 0].numpy() > 0.5
    mean_iou = float(np.mean([_iou(a[i], held_out[i].mask.astype(bool)) for i in range(len(held_out))]))
    ok = mean_iou >= 0.9 and elapsed <= 600
    report(8, "attention pretraining", ok, f"mean IoU {mean_iou:.4f} on 50 held-out images, {elapsed:.0f} s")
    assert ok


def _real_pair(name: str, box: tuple[int, int, int, int], size: int = 64) -> AnnotatedSample:
    skdata = pytest.importorskip("skimage.data")
    img = getattr(skdata, name)().astype(np.float32) / 255
    h, w = img.shape[:2]
    s = min(h, w)
    img = img[(h - s) // 2 : (h - s) // 2 + s, (w - s) // 2 : (w - s) // 2 + s]
    f = s // size
    img = area_downsample(img[: f * size, : f * size], f).astype(np.float32)
    blur, sharp = motion_blur_pair(img, (0, 1), 11)
    return AnnotatedSample(blur.astype(np.float32), sharp, [BoundingBox(*box)], source_id=name)


@pytest.mark.slow
def test_9_overfit_smoke():
    set_deterministic(0)
    samples = [
        _real_pair("astronaut", (10, 5, 45, 64)),
        _real_pair("coffee", (15, 10, 50, 45)),
        _real_pair("chelsea", (5, 5, 55, 55)),
        _real_pair("rocket", (25, 0, 40, 64)),
    ]
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, crop=64, max_steps=2000, val_images=0)
    model = build_model(NetworkConfig(base_channels=16, n_residual_units=3, attention_widths=(16, 32, 64)), seed=0)
    trainer = Trainer(model, samples, cfg)

    def scores() -> list[float]:
        return [psnr(np.clip(predict(model, s.blurred)[0], 0, 1), s.sharp) for s in samples]

    def drop() -> float:
        recent = np.mean([h["total"] for h in trainer.history[-10:]])
        return 1 - recent / trainer.history[0]["total"]

    def done(t: Trainer) -> bool:
        return t.step_count % 50 == 0 and drop() >= 0.9 and min(scores()) >= 28.0

    start = time.time()
    trainer.run(stop=done)
    elapsed = time.time() - start
    final = scores()
    ok = drop() >= 0.9 and min(final) >= 28.0 and elapsed <= 1800
    report(9, "overfit smoke", ok,
           f"{trainer.step_count} steps, loss drop {drop():.1%}, PSNR {', '.join(f'{p:.2f}' for p in final)} dB, "
           f"{elapsed:.0f} s")
    assert ok


def test_10_ablation_wiring():
    variants = {
        "w/o attention": dict(attention=False, branches=()),
        "single-scale": dict(scales=1),
        "fg branch only": dict(branches=("fg",)),
        "bg branch only": dict(branches=("bg",)),
    }
    g = torch.Generator().manual_seed(10)
    blur = torch.rand(2, 3, 32, 32, generator=g)
    sharp = torch.rand(2, 3, 32, 32, generator=g)
    mask = (torch.rand(2, 1, 32, 32, generator=g) > 0.5).float()
    results = {}
    for name, kw in variants.items():
        config = NetworkConfig(base_channels=4, n_residual_units=3, attention_widths=(4, 4, 4), **kw)
        model = build_model(config, seed=0)
        samples = [AnnotatedSample(blur[0].permute(1, 2, 0).numpy(), sharp[0].permute(1, 2, 0).numpy(),
                                   [BoundingBox(0, 0, 16, 16)], source_id="x")]
        trainer = Trainer(model, samples, TrainConfig(batch_size=1, crop=32, max_steps=1))
        loss = trainer.step()["total"]
        outs = model(blur)
        shapes_ok = len(outs) == config.scales and all(
            o.sharp.shape == (2, 3, 32 >> (config.scales - 1 - i), 32 >> (config.scales - 1 - i))
            for i, o in enumerate(outs)
        )
        has_attn = outs[-1].attention is not None
        branch_ok = all((getattr(outs[-1], b) is not None) == (b in config.branches) for b in ("fg", "bg"))
        results[name] = math.isfinite(loss) and shapes_ok and has_attn == config.attention and branch_ok
    ok = all(results.values())
    report(10, "ablation wiring", ok, ", ".join(f"{k} {'ok' if v else 'broken'}" for k, v in results.items()))
    assert ok


def test_11_checkpoint_round_trip(tmp_path):
    model = build_model(NetworkConfig(base_channels=8, n_residual_units=3, attention_widths=(8, 8, 8)), seed=11)
    path = save_checkpoint(tmp_path / "m.ckpt", model, model.config)
    back, _ = load_model(path)
    bitwise = all(
        torch.equal(a, b) and a.dtype == b.dtype for a, b in zip(model.state_dict().values(), back.state_dict().values())
    )
    data = make_dataset(tmp_path / "ds", "test", n=2, size=(40, 48))
    reports = []
    for k in range(2):
        out = tmp_path / f"eval{k}.csv"
        cmd = [sys.executable, "-m", "hadeblur.cli", "--deterministic", "eval",
               "--data", str(data), "--ckpt", str(path), "--out", str(out)]
        subprocess.run(cmd, check=True)
        reports.append(out.read_bytes())
    identical = reports[0] == reports[1] and len(reports[0]) > 0
    ok = bitwise and identical
    report(11, "checkpoint round trip", ok, f"bitwise parameters {bitwise}, eval CSV byte-identical {identical}")
    assert ok
