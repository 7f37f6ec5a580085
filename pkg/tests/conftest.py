import numpy as np
import pytest
import torch

from hadeblur.data import BoundingBox, write_annotation, write_image
from hadeblur.network import NetworkConfig

torch.use_deterministic_algorithms(True)


def tiny_config(**overrides) -> NetworkConfig:
    kw = dict(base_channels=4, n_residual_units=3, attention_widths=(4, 4, 4))
    kw.update(overrides)
    return NetworkConfig(**kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(root, split="train", n=3, size=(64, 64), annotate=None, seed=0):
    """Write ``n`` random pairs under ``root/split``; ``annotate[i]`` is a box list or None."""
    r = np.random.default_rng(seed)
    h, w = size
    for i in range(n):
        name = f"img{i:02d}.png"
        sharp = r.uniform(size=(h, w, 3))
        blur = np.clip(sharp + r.normal(0, 0.05, size=sharp.shape), 0, 1)
        write_image(root / split / "blur" / name, blur)
        write_image(root / split / "sharp" / name, sharp)
        boxes = annotate[i] if annotate is not None else [BoundingBox(4, 4, 20, 24)]
        if boxes is not None:
            write_annotation(root / split / "annotations" / f"img{i:02d}.json", name, w, h, boxes)
    return root


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
