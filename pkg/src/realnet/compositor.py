"""Local-anomaly synthesis: Perlin masks, foreground restriction, opacity blending.

Images here are float32 numpy arrays of shape (h, w, 3) in [0, 1]; masks are
(h, w) float32 arrays with values in {0, 1}.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from skimage.filters import threshold_otsu

from .engine import ContractError, Rng, ShapeError

PERLIN_GRIDS = (2, 4, 8, 16)


class DegenerateInputWarning(UserWarning):
    pass


@dataclass
class AnomalySample:
    A: np.ndarray
    I: np.ndarray
    M: np.ndarray
    delta: float
    donor_index: int = -1
    source_index: int = -1


@dataclass
class PerlinField:
    values: np.ndarray
    grid: tuple[int, int]


def fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def fade_derivative(t):
    return 30 * t * t * (t - 1) * (t - 1)


def perlin_noise(h: int, w: int, grid_x: int, grid_y: int, rng: Rng) -> PerlinField:
    """Gradient-lattice noise with ``grid_y`` x ``grid_x`` cells over an h x w field.

    Values are scaled by sqrt(2) so the theoretical range of 2-D gradient
    noise maps onto [-1, 1]. Pixel (0, 0) sits on a lattice corner, as does
    every pixel whose coordinate is a multiple of the cell size.
    """
    if h <= 0 or w <= 0:
        raise ShapeError(f"zero-size Perlin field {h}x{w}")
    if grid_x < 1 or grid_y < 1:
        raise ContractError("Perlin grid must be at least 1 per axis")
    angles = rng.uniform(0.0, 2 * math.pi, size=(grid_y + 1, grid_x + 1))
    gy, gx = np.sin(angles), np.cos(angles)

    ys = np.arange(h) * grid_y / h
    xs = np.arange(w) * grid_x / w
    yi = np.floor(ys).astype(int)
    xi = np.floor(xs).astype(int)
    fy = (ys - yi)[:, None]
    fx = (xs - xi)[None, :]
    Y0, X0 = yi[:, None], xi[None, :]

    def corner(dy, dx):
        gyc = gy[Y0 + dy, X0 + dx]
        gxc = gx[Y0 + dy, X0 + dx]
        return gyc * (fy - dy) + gxc * (fx - dx)

    u, v = fade(fx), fade(fy)
    top = corner(0, 0) * (1 - u) + corner(0, 1) * u
    bottom = corner(1, 0) * (1 - u) + corner(1, 1) * u
    values = (top * (1 - v) + bottom * v) * math.sqrt(2.0)
    return PerlinField(values=np.clip(values, -1.0, 1.0).astype(np.float32), grid=(grid_y, grid_x))


def random_perlin(h: int, w: int, rng: Rng, grids: Sequence[int] = PERLIN_GRIDS) -> PerlinField:
    gy = int(grids[rng.integers(0, len(grids))])
    gx = int(grids[rng.integers(0, len(grids))])
    return perlin_noise(h, w, gx, gy, rng)


def to_gray(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=-1) if img.ndim == 3 else img


def foreground_mask(img: np.ndarray) -> np.ndarray:
    """Otsu split of the grayscale image; the side touching the border less is foreground."""
    gray = to_gray(np.asarray(img, dtype=np.float64))
    if gray.max() - gray.min() < 1e-8:
        warnings.warn("constant image: whole frame treated as foreground", DegenerateInputWarning)
        return np.ones(gray.shape, dtype=np.float32)
    above = gray > threshold_otsu(gray)
    border = np.concatenate([above[0], above[-1], above[1:-1, 0], above[1:-1, -1]])
    occupancy = border.mean()
    fg = above if occupancy <= 1.0 - occupancy else ~above
    return fg.astype(np.float32)


def make_mask(field: PerlinField | np.ndarray, foreground: np.ndarray | None = None,
              threshold: float = 0.5) -> np.ndarray:
    values = field.values if isinstance(field, PerlinField) else np.asarray(field)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        warnings.warn("constant noise field: empty mask", DegenerateInputWarning)
        return np.zeros(values.shape, dtype=np.float32)
    mask = (values - lo) / (hi - lo) > threshold
    if foreground is not None:
        if foreground.shape != values.shape:
            raise ShapeError(f"foreground {foreground.shape} vs field {values.shape}")
        mask &= foreground > 0
    return mask.astype(np.float32)


def blend(I: np.ndarray, P: np.ndarray, M: np.ndarray, delta: float) -> np.ndarray:
    """``A = (1-M) I + (1-delta) M I + delta M P``, clamped to [0, 1]."""
    if I.shape != P.shape:
        raise ShapeError(f"image {I.shape} vs donor {P.shape}")
    if M.shape != I.shape[:2]:
        raise ShapeError(f"mask {M.shape} vs image {I.shape}")
    if not 0.0 <= delta <= 1.0:
        raise ContractError(f"opacity {delta} outside [0, 1]")
    m = M[..., None].astype(I.dtype)
    d = I.dtype.type(delta)
    A = (1 - m) * I + (1 - d) * (m * I) + d * (m * P)
    return np.clip(A, 0.0, 1.0)


@dataclass
class SynthConfig:
    delta_range: tuple[float, float] = (0.5, 1.0)
    anomaly_fraction: float = 0.5
    use_foreground: bool = True
    threshold: float = 0.5
    max_attempts: int = 8
    grids: tuple = PERLIN_GRIDS


def synth_sample(I: np.ndarray, donors: Sequence[np.ndarray], cfg: SynthConfig, rng: Rng,
                 foreground: np.ndarray | None = None) -> AnomalySample:
    """One anomaly triplet; falls back to the untouched image if every mask comes out empty."""
    h, w = I.shape[:2]
    if not donors:
        raise ContractError("empty donor source")
    if foreground is None and cfg.use_foreground:
        foreground = foreground_mask(I)
    for _ in range(cfg.max_attempts):
        M = make_mask(random_perlin(h, w, rng, cfg.grids), foreground if cfg.use_foreground else None,
                      cfg.threshold)
        if M.any():
            break
    else:
        return AnomalySample(A=I.copy(), I=I, M=np.zeros((h, w), np.float32), delta=0.0)
    j = int(rng.integers(0, len(donors)))
    delta = float(rng.uniform(*cfg.delta_range))
    return AnomalySample(A=blend(I, donors[j], M, delta), I=I, M=M, delta=delta, donor_index=j)


def synth_dataset(normals: Sequence[np.ndarray], donors: Sequence[np.ndarray], cfg: SynthConfig, rng: Rng,
                  count: int | None = None, foregrounds: Sequence[np.ndarray] | None = None
                  ) -> Iterator[AnomalySample]:
    """Stream of triplets mixing untouched normals and anomalies at ``anomaly_fraction``.

    Sample ``i`` depends only on ``(rng, i)``. With the default fraction of
    0.5 the stream alternates normal, anomaly, normal, ...
    """
    if len(normals) == 0:
        raise ContractError("no normal images")
    if cfg.anomaly_fraction > 0 and not donors:
        raise ContractError("empty donor source")
    i = 0
    while count is None or i < count:
        r = rng.split(i)
        k = int(r.integers(0, len(normals)))
        I = normals[k]
        # slot i is an anomaly when floor((i+1) f) advances
        is_anom = math.floor((i + 1) * cfg.anomaly_fraction) > math.floor(i * cfg.anomaly_fraction)
        if is_anom:
            fg = foregrounds[k] if foregrounds is not None else None
            sample = synth_sample(I, donors, cfg, r, fg)
        else:
            sample = AnomalySample(A=I.copy(), I=I, M=np.zeros(I.shape[:2], np.float32), delta=0.0)
        sample.source_index = k
        yield sample
        i += 1
