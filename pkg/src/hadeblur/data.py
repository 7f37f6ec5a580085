"""Dataset ingestion, mask rasterization, blur synthesis and patch sampling.

Images are float32 arrays of shape (H, W, C) with intensities in [0, 1].
Masks are uint8 arrays of shape (H, W) holding only 0 and 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError

IMAGE_SUFFIX = ".png"
MAX_FG_RETRIES = 20


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    def clip(self, width: int, height: int) -> BoundingBox | None:
        """Clip to the image; returns None when nothing of the box remains."""
        x0, x1 = max(0, self.x0), min(width, self.x1)
        y0, y1 = max(0, self.y0), min(height, self.y1)
        if x0 >= x1 or y0 >= y1:
            return None
        return BoundingBox(x0, y0, x1, y1)

    @property
    def area(self) -> int:
        return max(0, self.x1 - self.x0) * max(0, self.y1 - self.y0)


@dataclass
class AnnotatedSample:
    blurred: np.ndarray
    sharp: np.ndarray
    boxes: list[BoundingBox] = field(default_factory=list)
    source_id: str = ""
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.blurred.shape != self.sharp.shape:
            raise DataError(
                f"{self.source_id}: blurred {self.blurred.shape} and sharp "
                f"{self.sharp.shape} differ in size"
            )
        h, w = self.blurred.shape[:2]
        if self.mask is None:
            self.mask = rasterize_mask(self.boxes, w, h)
        elif self.mask.shape != (h, w):
            raise DataError(f"{self.source_id}: mask shape {self.mask.shape} != {(h, w)}")

    @property
    def height(self) -> int:
        return self.blurred.shape[0]

    @property
    def width(self) -> int:
        return self.blurred.shape[1]


def rasterize_mask(boxes: Sequence[BoundingBox], width: int, height: int) -> np.ndarray:
    """Union of boxes as a binary (height, width) mask; boxes are clipped first."""
    if width <= 0 or height <= 0:
        raise ValueError(f"mask size must be positive, got {width}x{height}")
    mask = np.zeros((height, width), dtype=np.uint8)
    for box in boxes:
        clipped = box.clip(width, height)
        if clipped is not None:
            mask[clipped.y0 : clipped.y1, clipped.x0 : clipped.x1] = 1
    return mask


def synthesize_blur(frames: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Average a window of consecutive frames into a blurred image.

    Returns ``(blurred, sharp)`` where ``sharp`` is the central frame.
    Striding windows through a video is left to the caller.
    """
    n = len(frames)
    if n < 3 or n % 2 == 0:
        raise ValueError(f"frame window must be odd and >= 3, got {n}")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise ValueError(f"frame {i} has shape {f.shape}, expected {shape}")
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in frames])
    sharp = np.array(frames[n // 2], copy=True)
    out_dtype = sharp.dtype if sharp.dtype.kind == "f" else np.float64
    return stack.mean(axis=0).astype(out_dtype), sharp


def area_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling by an integer factor (first two axes)."""
    if factor == 1:
        return img
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"{w}x{h} is not divisible by {factor}")
    blocks = img.reshape(h // factor, factor, w // factor, factor, *img.shape[2:])
    return blocks.mean(axis=(1, 3))


def build_pyramid(img: np.ndarray, scales: int) -> list[np.ndarray]:
    """Area-averaged pyramid, coarsest first; the last element is ``img`` itself."""
    if scales < 1:
        raise ValueError("scales must be >= 1")
    divisor = 2 ** (scales - 1) * 4
    h, w = img.shape[:2]
    if h % divisor or w % divisor:
        raise ValueError(
            f"image {w}x{h} must have both sides divisible by {divisor} for {scales} scales"
        )
    return [
        area_downsample(img, 2 ** (scales - 1 - s)).astype(img.dtype, copy=False)
        for s in range(scales)
    ]


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Binary block downsampling: a block maps to 1 iff at least half of it is set."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {w}x{h} is not divisible by {factor}")
    means = area_downsample(mask.astype(np.float64), factor)
    return (means >= 0.5).astype(np.uint8)


def sample_patch(
    sample: AnnotatedSample,
    size: int,
    rng: np.random.Generator,
    require_fg: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cut aligned ``(blurred, sharp, mask)`` patches of ``size x size``.

    With ``require_fg`` the mask patch is guaranteed to contain foreground:
    random crops are tried first, then a crop centred on a random box.
    """
    h, w = sample.height, sample.width
    if h < size or w < size:
        raise DataError(f"{sample.source_id}: image {w}x{h} smaller than patch {size}")
    if require_fg and not sample.boxes:
        raise DataError(f"{sample.source_id}: foreground patch requested but sample has no boxes")

    mask = sample.mask
    y = x = 0
    for _ in range(MAX_FG_RETRIES if require_fg else 1):
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        if not require_fg or mask[y : y + size, x : x + size].any():
            break
    else:
        candidates = [c for c in (b.clip(w, h) for b in sample.boxes) if c is not None]
        if not candidates:
            raise DataError(f"{sample.source_id}: all boxes lie outside the image")
        box = candidates[int(rng.integers(0, len(candidates)))]
        cy, cx = (box.y0 + box.y1) // 2, (box.x0 + box.x1) // 2
        y = min(max(cy - size // 2, 0), h - size)
        x = min(max(cx - size // 2, 0), w - size)

    sl = (slice(y, y + size), slice(x, x + size))
    return sample.blurred[sl], sample.sharp[sl], mask[sl]


# --- file I/O ------------------------------------------------------------


def read_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit image as float32 RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write a [0, 1] float image (H, W[, C]) as 8-bit PNG, clipping out-of-range values."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def read_annotation(path: str | Path) -> tuple[str, int, int, list[BoundingBox]]:
    path = Path(path)
    try:
        record = json.loads(path.read_text())
        name = str(record["image"])
        width, height = int(record["width"]), int(record["height"])
        boxes = []
        for raw in record["boxes"]:
            if len(raw) != 4:
                raise ValueError(f"box {raw!r} does not have 4 coordinates")
            boxes.append(BoundingBox(*(int(v) for v in raw)))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed annotation {path}: {exc}") from exc
    return name, width, height, boxes


def write_annotation(path: str | Path, image: str, width: int, height: int,
                     boxes: Sequence[BoundingBox]) -> None:
    record = {
        "image": image,
        "width": width,
        "height": height,
        "boxes": [[b.x0, b.y0, b.x1, b.y1] for b in boxes],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(record))


def load_dataset(root: str | Path, split: str) -> list[AnnotatedSample]:
    """Load ``root/<split>/{blur,sharp,annotations}`` into samples in sorted-name order.

    Pairs without an annotation file get no boxes (all-background mask),
    which is how background-only data such as GoPro is fed in.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = Path(root) / split
    blur_dir, sharp_dir, ann_dir = base / "blur", base / "sharp", base / "annotations"
    for d in (blur_dir, sharp_dir):
        if not d.is_dir():
            raise DataError(f"missing directory {d}")

    blur_names = sorted(p.name for p in blur_dir.glob(f"*{IMAGE_SUFFIX}"))
    sharp_names = sorted(p.name for p in sharp_dir.glob(f"*{IMAGE_SUFFIX}"))
    if blur_names != sharp_names:
        missing = sorted(set(blur_names) ^ set(sharp_names))
        raise DataError(f"blur/sharp name mismatch under {base}: {missing[:5]}")

    samples = []
    for name in blur_names:
        blurred = read_image(blur_dir / name)
        sharp = read_image(sharp_dir / name)
        if blurred.shape != sharp.shape:
            raise DataError(f"{sharp_dir / name}: size {sharp.shape} != blurred {blurred.shape}")
        ann_path = ann_dir / (Path(name).stem + ".json")
        boxes: list[BoundingBox] = []
        if ann_path.is_file():
            ann_name, width, height, boxes = read_annotation(ann_path)
            if ann_name != name or (height, width) != blurred.shape[:2]:
                raise DataError(
                    f"malformed annotation {ann_path}: describes {ann_name} {width}x{height}, "
                    f"image is {name} {blurred.shape[1]}x{blurred.shape[0]}"
                )
        samples.append(AnnotatedSample(blurred, sharp, boxes, source_id=Path(name).stem))
    return samples


# --- synthetic data ------------------------------------------------------


def make_rectangle_sample(
    rng: np.random.Generator,
    size: int = 64,
    max_rects: int = 2,
    min_side: int | None = None,
    max_side: int | None = None,
) -> AnnotatedSample:
    """White rectangles on uniform noise, boxes annotated.

    Used as a controllable stand-in for human foreground when no
    annotated data is at hand. ``blurred`` and ``sharp`` are identical.
    """
    min_side = min_side or size // 5
    max_side = max_side or size // 2
    img = rng.uniform(0.0, 0.8, size=(size, size, 3)).astype(np.float32)
    boxes = []
    for _ in range(int(rng.integers(1, max_rects + 1))):
        bw, bh = (int(v) for v in rng.integers(min_side, max_side + 1, size=2))
        x0 = int(rng.integers(0, size - bw + 1))
        y0 = int(rng.integers(0, size - bh + 1))
        boxes.append(BoundingBox(x0, y0, x0 + bw, y0 + bh))
        img[y0 : y0 + bh, x0 : x0 + bw] = 1.0
    return AnnotatedSample(img, img.copy(), boxes, source_id="rect")


def motion_blur_pair(
    img: np.ndarray, shift: tuple[int, int] = (1, 0), window: int = 11
) -> tuple[np.ndarray, np.ndarray]:
    """Simulate a linear camera sweep over ``img`` and integrate it.

    Frame ``k`` is ``img`` rolled by ``(k - window // 2) * shift``; the pair
    comes from :func:`synthesize_blur`, so the sharp image equals ``img``.
    """
    dy, dx = shift
    half = window // 2
    frames = [np.roll(img, ((k - half) * dy, (k - half) * dx), axis=(0, 1)) for k in range(window)]
    return synthesize_blur(frames)
