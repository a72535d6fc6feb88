"""Per-scale feature reconstruction networks."""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .engine import ContractError, Rng, ShapeError, seeded_init

ARCHITECTURES = ("A_independent", "C_neighbor_aligned")


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        return self.skip(x) + self.conv2(F.silu(self.conv1(F.silu(x))))


class ReconUNet(nn.Module):
    """Encoder-decoder with skips; strided convs down, transposed convs up.

    Contains no interpolation, so nothing is ever resampled across scales.
    """

    def __init__(self, channels: int, width: int | None = None, depth: int = 2, mult: int = 2):
        super().__init__()
        width = width or channels
        self.inc = nn.Conv2d(channels, width, 3, padding=1)
        widths = [width * mult ** i for i in range(depth + 1)]
        self.enc = nn.ModuleList([ResidualBlock(widths[0], widths[0])])
        self.down = nn.ModuleList()
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(depth):
            self.down.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
            self.enc.append(ResidualBlock(widths[i + 1], widths[i + 1]))
        for i in reversed(range(depth)):
            self.up.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2))
            self.dec.append(ResidualBlock(2 * widths[i], widths[i]))
        self.out = nn.Conv2d(widths[0], channels, 3, padding=1)

    def forward(self, x):
        h = self.enc[0](self.inc(x))
        skips = [h]
        for down, block in zip(self.down, self.enc[1:]):
            h = block(down(F.silu(h)))
            skips.append(h)
        skips.pop()
        for up, block in zip(self.up, self.dec):
            s = skips.pop()
            h = up(F.silu(h))[..., : s.shape[-2], : s.shape[-1]]
            h = block(torch.cat([h, s], dim=1))
        return self.out(F.silu(h))


class Reconstructor(nn.Module):
    """G_1..G_K. Architecture A: one network per scale. Architecture C: one network
    per neighbouring pair, the coarser map upsampled x2 (nearest) and concatenated."""

    def __init__(self, dims: Sequence[int], arch: str = "A_independent", depth: int = 2, mult: int = 2):
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ContractError(f"unsupported architecture {arch!r}")
        if not dims or any(d < 1 for d in dims):
            raise ContractError(f"invalid feature dims {list(dims)}")
        self.dims = list(dims)
        self.arch = arch
        if arch == "A_independent" or len(dims) == 1:
            self.groups = [[k] for k in range(len(dims))]
        else:
            self.groups = [list(range(k, min(k + 2, len(dims)))) for k in range(0, len(dims), 2)]
        self.nets = nn.ModuleList(
            ReconUNet(sum(self.dims[k] for k in g), depth=depth, mult=mult) for g in self.groups)

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(feats) != len(self.dims):
            raise ShapeError(f"{len(feats)} scales given, {len(self.dims)} configured")
        for k, f in enumerate(feats):
            if f.shape[1] != self.dims[k]:
                raise ShapeError(f"scale {k}: {f.shape[1]} channels, expected {self.dims[k]}")
        out: list = [None] * len(feats)
        for g, net in zip(self.groups, self.nets):
            if len(g) == 1:
                out[g[0]] = net(feats[g[0]])
                continue
            hi, lo = feats[g[0]], feats[g[1]]
            if tuple(lo.shape[-2:]) != (math.ceil(hi.shape[-2] / 2), math.ceil(hi.shape[-1] / 2)):
                raise ShapeError("architecture C needs neighbouring scales at a factor of 2")
            lo_up = F.interpolate(lo, scale_factor=2, mode="nearest")[..., : hi.shape[-2], : hi.shape[-1]]
            y = net(torch.cat([hi, lo_up], dim=1))
            out[g[0]] = y[:, : self.dims[g[0]]]
            out[g[1]] = F.avg_pool2d(y[:, self.dims[g[0]]:], 2, ceil_mode=True)
        return out


def build_reconstructors(dims: Sequence[int], arch: str = "A_independent", depth: int = 2, mult: int = 2,
                         rng: Rng | None = None) -> Reconstructor:
    rec = Reconstructor(dims, arch, depth, mult)
    if rng is not None:
        for i, net in enumerate(rec.nets):
            seeded_init(net, rng.split(f"recon-{i}"))
    return rec


def recon_loss(recons: Sequence[torch.Tensor], targets: Sequence[torch.Tensor], reduction: str = "sum"):
    """Squared error summed over elements and scales, averaged over the batch only.

    ``reduction="mean"`` averages over elements instead of summing them.
    """
    if len(recons) != len(targets):
        raise ShapeError("scale count mismatch between reconstructions and targets")
    n = targets[0].shape[0]
    total = 0.0
    for r, t in zip(recons, targets):
        if r.shape != t.shape:
            raise ShapeError(f"reconstruction {tuple(r.shape)} vs target {tuple(t.shape)}")
        sq = (r - t) ** 2
        total = total + (sq.sum() / n if reduction == "sum" else sq.mean())
    return total
