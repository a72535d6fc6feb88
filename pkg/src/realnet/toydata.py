"""Procedural benchmark: striped objects on a dark background with square and scratch defects."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .engine import Rng
from .imageio import save_mask_png, save_png

TINT = np.array([1.0, 0.85, 0.7], dtype=np.float32)
DEFECT_KINDS = ("square", "scratch")


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    return yy, xx


def object_support(size: int, rng: Rng) -> np.ndarray:
    yy, xx = _grid(size)
    cy = size / 2 + rng.uniform(-2, 2)
    cx = size / 2 + rng.uniform(-2, 2)
    ry = size * rng.uniform(0.34, 0.38)
    rx = size * rng.uniform(0.34, 0.38)
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float32)


def normal_image(size: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(image, object_support)``."""
    yy, xx = _grid(size)
    support = object_support(size, rng)
    theta = math.radians(30 + rng.uniform(-4, 4))
    period = 8.0 + rng.uniform(-0.5, 0.5)
    phase = rng.uniform(0, 2 * math.pi)
    stripes = 0.6 + 0.2 * np.sin(2 * math.pi * (xx * math.cos(theta) + yy * math.sin(theta)) / period + phase)
    for _ in range(int(rng.integers(2, 5))):
        by, bx = rng.uniform(12, size - 12, size=2)
        amp = rng.uniform(-0.08, 0.08)
        stripes += amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * 5.0 ** 2))
    obj = stripes[..., None] * TINT
    bg = 0.1 + 0.02 * rng.gen.standard_normal((size, size, 1)).astype(np.float32)
    img = support[..., None] * obj + (1 - support[..., None]) * bg
    img += 0.01 * rng.gen.standard_normal(img.shape)
    return np.clip(img, 0, 1).astype(np.float32), support


def add_defect(img: np.ndarray, support: np.ndarray, kind: str, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    size = img.shape[0]
    yy, xx = _grid(size)
    inside = np.argwhere(support > 0)
    cy, cx = inside[int(rng.integers(0, len(inside)))]
    if kind == "square":
        half = rng.uniform(3, 6)
        mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        colour = np.array(rng.uniform(0.15, 0.95, size=3), dtype=np.float32)
    elif kind == "scratch":
        ang = rng.uniform(0, math.pi)
        length = rng.uniform(14, 26)
        width = rng.uniform(0.8, 1.6)
        dy, dx = math.sin(ang), math.cos(ang)
        along = (yy - cy) * dy + (xx - cx) * dx
        across = -(yy - cy) * dx + (xx - cx) * dy
        mask = (np.abs(along) <= length / 2) & (np.abs(across) <= width)
        colour = np.full(3, 0.95 if rng.uniform() < 0.5 else 0.05, dtype=np.float32)
    else:
        raise ValueError(f"unknown defect kind {kind!r}")
    mask = mask & (support > 0)
    out = img.copy()
    out[mask] = colour
    return out, mask.astype(np.float32)


def write_benchmark(root: str | Path, seed: int = 0, n_train: int = 200, n_test: int = 100,
                    defect_fraction: float = 0.5, size: int = 64, category: str = "toy") -> Path:
    """Write an MVTec-style category under ``root`` and return its directory."""
    base = Path(root) / category
    rng = Rng(seed).split("toy-benchmark")
    for i in range(n_train):
        img, _ = normal_image(size, rng.split(f"train-{i}"))
        save_png(base / "train" / "good" / f"{i:03d}.png", img)
    n_bad = int(round(n_test * defect_fraction))
    for i in range(n_test - n_bad):
        img, _ = normal_image(size, rng.split(f"test-good-{i}"))
        save_png(base / "test" / "good" / f"{i:03d}.png", img)
    for i in range(n_bad):
        r = rng.split(f"test-bad-{i}")
        kind = DEFECT_KINDS[i % len(DEFECT_KINDS)]
        img, support = normal_image(size, r)
        img, mask = add_defect(img, support, kind, r)
        save_png(base / "test" / kind / f"{i:03d}.png", img)
        save_mask_png(base / "ground_truth" / kind / f"{i:03d}_mask.png", mask)
    return base
