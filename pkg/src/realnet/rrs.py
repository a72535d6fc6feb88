"""Reconstruction residuals: assembly, standardisation, channel Top-K and the discriminator."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .engine import ContractError, ShapeError, concat_channels, global_avg_pool, global_max_pool, resize

MODES = ("max", "avg", "max_and_avg")
BCE_EPS = 1e-7


@dataclass
class RRSConfig:
    mode: str = "max_and_avg"
    P: float = 1.0 / 3.0

    def r(self, m_total: int) -> int:
        if self.mode not in MODES:
            raise ContractError(f"unknown RRS mode {self.mode!r}")
        if not 0.0 < self.P <= 1.0:
            raise ContractError(f"retention ratio {self.P} outside (0, 1]")
        if self.P == 1.0:
            return m_total
        r = math.floor(self.P * m_total + 0.5)
        if self.mode == "max_and_avg":
            r = 2 * math.floor(self.P * m_total / 2 + 0.5)
            r = max(2, r)
        return max(1, min(r, m_total))


def residuals(selected: Sequence[torch.Tensor], recons: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    return [(f - g) ** 2 for f, g in zip(selected, recons)]


def assemble_residuals(selected: Sequence[torch.Tensor], recons: Sequence[torch.Tensor],
                       standardizer: nn.Module | None = None) -> torch.Tensor:
    """Upsample every E_k to the finest grid, concatenate layer-major, standardise."""
    res = residuals(selected, recons)
    h = max(e.shape[-2] for e in res)
    w = max(e.shape[-1] for e in res)
    E = concat_channels([resize(e, (h, w), "bilinear") for e in res])
    if standardizer is not None:
        E = standardizer(E)
    return E


def make_standardizer(channels: int, momentum: float = 0.1) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, affine=False, momentum=momentum)


def _top(stat: torch.Tensor, k: int) -> torch.Tensor:
    # descending; stable sort keeps the lower channel index first among ties
    return torch.sort(stat, dim=1, descending=True, stable=True).indices[:, :k]


def rrs_indices(E: torch.Tensor, cfg: RRSConfig) -> torch.Tensor:
    """Per-sample channel indices (N, r) chosen from E (N, m', h', w')."""
    m_total = E.shape[1]
    r = cfg.r(m_total)
    if r > m_total:
        raise ContractError(f"r={r} exceeds {m_total} channels")
    gmp = global_max_pool(E)
    gap = global_avg_pool(E)
    if cfg.mode == "avg":
        return _top(gap, r)
    if cfg.mode == "max" or r == m_total:
        return _top(gmp, r)
    return torch.cat([_top(gmp, r // 2), _top(gap, r // 2)], dim=1)


def rrs_select(E: torch.Tensor, cfg: RRSConfig) -> tuple[torch.Tensor, torch.Tensor]:
    idx = rrs_indices(E.detach(), cfg)
    gathered = torch.gather(E, 1, idx[:, :, None, None].expand(-1, -1, *E.shape[-2:]))
    return gathered, idx


class Discriminator(nn.Module):
    """Per-pixel MLP (1x1 convs) producing logits at residual resolution."""

    def __init__(self, in_channels: int, hidden: int = 128, zero_init_out: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.fc1 = nn.Conv2d(in_channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, hidden, 1)
        self.out = nn.Conv2d(hidden, 1, 1)
        if zero_init_out:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"discriminator built for {self.in_channels} channels, got {x.shape[1]}")
        return self.out(F.silu(self.fc2(F.silu(self.fc1(x)))))[:, 0]


@dataclass
class ScoreMap:
    pixel: torch.Tensor
    image: torch.Tensor


def discriminate(D: Discriminator, E_rrs: torch.Tensor, image_size: tuple[int, int]) -> tuple[ScoreMap, torch.Tensor]:
    """Returns the image-resolution score map and the native-resolution probabilities."""
    native = torch.sigmoid(D(E_rrs))
    up = resize(native[:, None], image_size, "bilinear")[:, 0]
    return ScoreMap(pixel=up, image=up.flatten(1).amax(1)), native


def seg_loss(scores: torch.Tensor, M: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy; ``M`` is nearest-resized to the score resolution."""
    if M.shape[-2:] != scores.shape[-2:]:
        M = resize(M[:, None].float(), tuple(scores.shape[-2:]), "nearest")[:, 0]
    p = scores.clamp(eps, 1.0 - eps)
    return -(M * torch.log(p) + (1 - M) * torch.log(1 - p)).mean()
