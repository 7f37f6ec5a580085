"""PSNR / SSIM for [0, 1] images, with foreground/background region variants."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CSV_COLUMNS = ("image_id", "region", "psnr_db", "ssim", "n_pixels")


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float | None
    region: str
    n_pixels: int


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _psnr_from_mse(mse: float, peak: float) -> float:
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _check_pair(a, b)
    return _psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ LUMA_WEIGHTS
    if img.ndim == 3 and img.shape[2] == 1:
        return img[..., 0]
    return img


def _gaussian_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def _ssim_plane(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, luma: bool = True, data_range: float = 1.0) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows (sigma 1.5).

    RGB inputs are converted to luma first; pass ``luma=False`` to average
    the per-channel scores instead.
    """
    a, b = _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if a.ndim == 2:
        return _ssim_plane(a, b, data_range)
    if luma:
        return _ssim_plane(to_luma(a), to_luma(b), data_range)
    return float(np.mean([_ssim_plane(a[..., c], b[..., c], data_range) for c in range(a.shape[2])]))


def region_metrics(
    a: np.ndarray, b: np.ndarray, mask: np.ndarray, luma: bool = True
) -> tuple[MetricReport | None, MetricReport | None, MetricReport]:
    """Return ``(fg, bg, global)`` reports; a region with no pixels yields None.

    Region PSNR restricts the squared error to masked (fg) or unmasked (bg)
    pixels. SSIM is only meaningful over whole windows, so it is global-only.
    """
    a, b = _check_pair(a, b)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != a.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {a.shape[:2]}")
    sq = (a - b) ** 2
    if sq.ndim == 3:
        sq = sq.mean(axis=2)

    def region(sel: np.ndarray, name: str) -> MetricReport | None:
        n = int(sel.sum())
        if n == 0:
            return None
        return MetricReport(_psnr_from_mse(float(sq[sel].mean()), 1.0), None, name, n)

    glob = MetricReport(psnr(a, b), ssim(a, b, luma=luma), "global", int(mask.size))
    return region(mask, "fg"), region(~mask, "bg"), glob


def _fmt(value: float | None) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


def aggregate(rows: Sequence[tuple[str, MetricReport]]) -> list[tuple[str, MetricReport]]:
    """Per-region arithmetic mean of the per-image rows, labelled ``mean``."""
    out = []
    for name in ("global", "fg", "bg"):
        reps = [r for _, r in rows if r.region == name]
        if not reps:
            continue
        ssims = [r.ssim for r in reps if r.ssim is not None]
        out.append(
            (
                "mean",
                MetricReport(
                    float(np.mean([r.psnr_db for r in reps])),
                    float(np.mean(ssims)) if ssims else None,
                    name,
                    int(round(np.mean([r.n_pixels for r in reps]))),
                ),
            )
        )
    return out


def write_report(path: str | Path, rows: Iterable[tuple[str, MetricReport]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for image_id, rep in rows:
            writer.writerow([image_id, rep.region, _fmt(rep.psnr_db), _fmt(rep.ssim), rep.n_pixels])


def read_report(path: str | Path) -> list[tuple[str, MetricReport]]:
    rows = []
    with Path(path).open(newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                (
                    rec["image_id"],
                    MetricReport(
                        float(rec["psnr_db"]),
                        float(rec["ssim"]) if rec["ssim"] else None,
                        rec["region"],
                        int(rec["n_pixels"]),
                    ),
                )
            )
    return rows
