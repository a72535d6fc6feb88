"""Multi-scale features and anomaly-aware channel selection.

Feature tensors are NCHW torch tensors. Files on disk store one layer per
image as an (h, w, c) RNTF tensor named ``<image-relpath>.layer<k>.rntf``.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .engine import ContractError, Rng, ShapeError, load_tensor, resize, save_tensor

# m_k presets: desk-scale default, the full-scale configuration and smaller variants
M_PRESETS = {
    "builtin": (16, 32, 32, 16),
    "wrn50_full": (256, 512, 512, 256),
    "wrn50_half": (128, 256, 256, 128),
    "resnet34": (64, 128, 256, 128),
    "efficientnet_b4": (24, 32, 56, 160),
}


class ProvenanceError(ValueError):
    pass


@dataclass
class FeatureStack:
    layers: list
    extractor_id: str
    refs: list | None = None

    @property
    def K(self) -> int:
        return len(self.layers)


@dataclass
class ExtractorConfig:
    widths: tuple = (32, 64, 64, 32)
    strides: tuple = (2, 2, 2, 2)
    convs_per_stage: int = 2
    init: str = "random"
    normalize_input: bool = True
    seed: int = 0


class PyramidNet(nn.Module):
    def __init__(self, cfg: ExtractorConfig, in_channels: int = 3):
        super().__init__()
        stages = []
        cin = in_channels
        for w, s in zip(cfg.widths, cfg.strides):
            convs = [nn.Conv2d(cin, w, 3, stride=s, padding=1)]
            convs += [nn.Conv2d(w, w, 3, padding=1) for _ in range(cfg.convs_per_stage - 1)]
            stages.append(nn.ModuleList(convs))
            cin = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        outs = []
        for convs in self.stages:
            for conv in convs:
                x = F.relu(conv(x))
            outs.append(x)
        return outs


class BuiltinExtractor:
    """Fixed, untrained convolutional pyramid standing in for a pre-trained backbone."""

    kind = "builtin_pyramid"

    def __init__(self, cfg: ExtractorConfig | None = None, in_channels: int = 3):
        self.cfg = cfg or ExtractorConfig()
        if len(self.cfg.widths) != len(self.cfg.strides) or not self.cfg.widths:
            raise ContractError("extractor needs matching, non-empty widths and strides")
        self.net = PyramidNet(self.cfg, in_channels)
        self._init_weights()
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        blob = json.dumps({"kind": self.kind, **asdict(self.cfg), "in": in_channels}, sort_keys=True)
        self.extractor_id = "builtin:" + hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _init_weights(self):
        gen = torch.Generator().manual_seed(Rng(self.cfg.seed).split("extractor").torch_seed())
        with torch.no_grad():
            for convs in self.net.stages:
                for conv in convs:
                    conv.bias.zero_()
                    if self.cfg.init == "identity":
                        # channel mean at the centre tap
                        conv.weight.zero_()
                        conv.weight[:, :, 1, 1] = 1.0 / conv.weight.shape[1]
                    elif self.cfg.init == "random":
                        nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=gen)
                    else:
                        raise ContractError(f"unknown extractor init {self.cfg.init!r}")

    @torch.no_grad()
    def extract(self, images: torch.Tensor, refs: Sequence[str] | None = None) -> FeatureStack:
        x = images.float()
        if self.cfg.normalize_input:
            x = (x - 0.5) / 0.25
        return FeatureStack(layers=self.net(x), extractor_id=self.extractor_id,
                            refs=list(refs) if refs is not None else None)


class FileExtractor:
    """Serves precomputed features from ``<root>/<image-relpath>.layer<k>.rntf`` files."""

    kind = "file_ingest"

    def __init__(self, root: str | Path, K: int, channels: Sequence[int] | None = None,
                 extractor_id: str | None = None):
        self.root = Path(root)
        self.K = K
        self.channels = tuple(channels) if channels is not None else None
        self.extractor_id = extractor_id or f"file:{self.root.resolve()}"

    def extract(self, images, refs: Sequence[str] | None = None) -> FeatureStack:
        if refs is None:
            raise ContractError("file-backed extraction needs image references")
        layers = []
        for k in range(self.K):
            maps = []
            for ref in refs:
                path = self.root / f"{ref}.layer{k}.rntf"
                if not path.exists():
                    raise FileNotFoundError(f"missing feature file {path}")
                t = load_tensor(path)
                if t.dim() != 3:
                    raise ShapeError(f"{path}: expected (h, w, c), got {tuple(t.shape)}")
                if self.channels is not None and t.shape[-1] != self.channels[k]:
                    raise ShapeError(f"{path}: {t.shape[-1]} channels, expected {self.channels[k]}")
                maps.append(t.permute(2, 0, 1))
            shapes = {tuple(m.shape) for m in maps}
            if len(shapes) != 1:
                raise ShapeError(f"layer {k}: inconsistent feature shapes {sorted(shapes)}")
            layers.append(torch.stack(maps))
        return FeatureStack(layers=layers, extractor_id=self.extractor_id, refs=list(refs))


def save_feature_stack(stack: FeatureStack, root: str | Path, refs: Sequence[str] | None = None) -> None:
    refs = refs if refs is not None else stack.refs
    if refs is None:
        raise ContractError("need image references to save features")
    root = Path(root)
    for k, layer in enumerate(stack.layers):
        for n, ref in enumerate(refs):
            path = root / f"{ref}.layer{k}.rntf"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_tensor(path, layer[n].permute(1, 2, 0))


# --------------------------------------------------------------------------
# anomaly-aware feature selection
# --------------------------------------------------------------------------


def normalize_maps(x: torch.Tensor, kind: str = "minmax", eps: float = 1e-12) -> torch.Tensor:
    """Per-map normalisation over the last two dims; constant maps become zeros."""
    flat = x.flatten(-2)
    if kind == "minmax":
        lo = flat.amin(-1, keepdim=True)
        span = flat.amax(-1, keepdim=True) - lo
        out = torch.where(span > eps, (flat - lo) / torch.where(span > eps, span, torch.ones_like(span)),
                          torch.zeros_like(flat))
    elif kind == "standardize":
        mu = flat.mean(-1, keepdim=True)
        sd = flat.std(-1, unbiased=False, keepdim=True)
        out = torch.where(sd > eps, (flat - mu) / sd.clamp_min(eps), torch.zeros_like(flat))
    else:
        raise ValueError(f"unknown normalisation {kind!r}")
    return out.view_as(x)


def afs_map(feat_a: torch.Tensor, feat_i: torch.Tensor, size: tuple[int, int], norm: str = "minmax"):
    """Squared A-vs-I difference, resized to the mask resolution and normalised per map."""
    d = (feat_a - feat_i) ** 2
    return normalize_maps(resize(d, size, "bilinear"), norm)


def afs_loss_from_maps(fmaps: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Per-channel loss for normalised maps (N, c, H, W) against masks (N, H, W)."""
    return ((fmaps - masks[:, None]) ** 2).mean(dim=(0, 2, 3))


def afs_layer_scores(feat_a: torch.Tensor, feat_i: torch.Tensor, masks: torch.Tensor, norm: str = "minmax",
                     chunk: int = 32) -> torch.Tensor:
    if feat_a.shape != feat_i.shape:
        raise ShapeError(f"A features {tuple(feat_a.shape)} vs I features {tuple(feat_i.shape)}")
    size = tuple(masks.shape[-2:])
    total = torch.zeros(feat_a.shape[1], dtype=torch.float64)
    for s in range(0, feat_a.shape[0], chunk):
        fm = afs_map(feat_a[s:s + chunk], feat_i[s:s + chunk], size, norm)
        total += ((fm - masks[s:s + chunk, None]) ** 2).double().sum(dim=(0, 2, 3))
    return total / (feat_a.shape[0] * size[0] * size[1])


def afs_score(layer: int, channel: int, stack_a: FeatureStack, stack_i: FeatureStack, masks: torch.Tensor,
              norm: str = "minmax") -> float:
    fa = stack_a.layers[layer][:, channel:channel + 1]
    fi = stack_i.layers[layer][:, channel:channel + 1]
    return float(afs_layer_scores(fa, fi, masks, norm)[0])


@dataclass
class AFSIndexCache:
    extractor_id: str
    digest: str
    m: list
    indices: list
    losses: list = field(default_factory=list)

    def validate(self, channels: Sequence[int] | None = None) -> None:
        if len(self.m) != len(self.indices):
            raise ValueError("per-layer counts and index lists differ in length")
        for k, (mk, idx) in enumerate(zip(self.m, self.indices)):
            if len(idx) != mk or len(set(idx)) != mk or mk < 1:
                raise ValueError(f"layer {k}: malformed index list")
            if channels is not None and (mk > channels[k] or max(idx) >= channels[k] or min(idx) < 0):
                raise ValueError(f"layer {k}: indices outside {channels[k]} channels")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "AFSIndexCache":
        raw = json.loads(text)
        cache = cls(extractor_id=raw["extractor_id"], digest=raw["digest"], m=list(raw["m"]),
                    indices=[list(map(int, i)) for i in raw["indices"]], losses=raw.get("losses", []))
        cache.validate()
        return cache

    def save(self, path: str | Path) -> None:
        atomic_write(Path(path), self.to_json().encode())

    @classmethod
    def load(cls, path: str | Path) -> "AFSIndexCache":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def select_from_scores(scores: Sequence, m: Sequence[int]) -> list[list[int]]:
    """Ascending loss, ties to the lower channel index, first ``m_k`` per layer."""
    out = []
    for k, (sc, mk) in enumerate(zip(scores, m)):
        sc = np.asarray(sc, dtype=np.float64)
        if not 1 <= mk <= len(sc):
            raise ContractError(f"layer {k}: cannot keep {mk} of {len(sc)} channels")
        out.append(np.argsort(sc, kind="stable")[:mk].tolist())
    return out


def triplet_digest(A: torch.Tensor, I: torch.Tensor, M: torch.Tensor) -> str:
    h = hashlib.sha256()
    for t in (A, I, M):
        h.update(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())
    return h.hexdigest()


def afs_select(extractor, A: torch.Tensor, I: torch.Tensor, M: torch.Tensor, m: Sequence[int],
               cache_path: str | Path | None = None, norm: str = "minmax", batch: int = 64,
               refs_a=None, refs_i=None) -> tuple[AFSIndexCache, bool]:
    """Rank every channel of every layer by its AFS loss and keep the best ``m_k``.

    ``A``, ``I`` are (N, 3, H, W) images and ``M`` the (N, H, W) masks. Returns
    ``(cache, hit)``; ``hit`` is true when a cache file with the same extractor
    and triplet digest was reused without recomputation.
    """
    digest = triplet_digest(A, I, M)
    if cache_path is not None and Path(cache_path).exists():
        cached = AFSIndexCache.load(cache_path)
        if cached.extractor_id == extractor.extractor_id and cached.digest == digest and list(cached.m) == list(m):
            return cached, True
    totals = None
    n = A.shape[0]
    for s in range(0, n, batch):
        sa = extractor.extract(A[s:s + batch], refs_a[s:s + batch] if refs_a else None)
        si = extractor.extract(I[s:s + batch], refs_i[s:s + batch] if refs_i else None)
        if len(m) != sa.K:
            raise ContractError(f"{len(m)} selection counts for {sa.K} layers")
        part = [afs_layer_scores(fa, fi, M[s:s + batch], norm) * fa.shape[0] for fa, fi in zip(sa.layers, si.layers)]
        totals = part if totals is None else [t + p for t, p in zip(totals, part)]
    scores = [t / n for t in totals]
    cache = AFSIndexCache(extractor_id=extractor.extractor_id, digest=digest, m=list(m),
                          indices=select_from_scores(scores, m), losses=[sc.tolist() for sc in scores])
    if cache_path is not None:
        cache.save(cache_path)
    return cache, False


def apply_selection(stack: FeatureStack, cache: AFSIndexCache) -> list[torch.Tensor]:
    if stack.extractor_id != cache.extractor_id:
        raise ProvenanceError(f"features from {stack.extractor_id!r} but cache built for {cache.extractor_id!r}")
    if len(cache.indices) != stack.K:
        raise ShapeError(f"cache has {len(cache.indices)} layers, stack has {stack.K}")
    return [layer.index_select(1, torch.as_tensor(idx, dtype=torch.long))
            for layer, idx in zip(stack.layers, cache.indices)]
