"""The trainable part of the detector: reconstructors, residual standardiser, discriminator."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .engine import Rng, check_finite, resize, seeded_init, sgd_adaptive_step
from .features import AFSIndexCache, apply_selection
from .reconstruction import build_reconstructors, recon_loss
from .rrs import (Discriminator, RRSConfig, ScoreMap, assemble_residuals, discriminate, make_standardizer,
                  rrs_select, seg_loss)


class RealNetHead(nn.Module):
    def __init__(self, dims, rrs: RRSConfig, arch: str = "A_independent", depth: int = 2, hidden: int = 128,
                 momentum: float = 0.1, rng: Rng | None = None):
        super().__init__()
        rng = rng or Rng(0)
        self.rrs = rrs
        self.G = build_reconstructors(dims, arch, depth, rng=rng.split("G"))
        m_total = sum(dims)
        self.standardizer = make_standardizer(m_total, momentum)
        self.D = seeded_init(Discriminator(rrs.r(m_total), hidden), rng.split("D"))

    def forward(self, selected, image_size):
        recons = self.G(selected)
        E = assemble_residuals(selected, recons, self.standardizer)
        E_rrs, idx = rrs_select(E, self.rrs)
        scores, native = discriminate(self.D, E_rrs, image_size)
        return {"recons": recons, "E": E, "indices": idx, "scores": scores, "native": native}


@dataclass
class StepResult:
    recon: float
    seg: float


def train_pipeline_step(head: RealNetHead, optimizer, sel_a, sel_i, masks: torch.Tensor, image_size,
                        recon_reduction: str = "sum", seg_at: str = "native") -> StepResult:
    """One joint update on L_recon + L_seg."""
    head.train()
    out = head(sel_a, image_size)
    l_recon = recon_loss(out["recons"], sel_i, recon_reduction)
    if seg_at == "native":
        l_seg = seg_loss(out["native"], masks)
    else:
        l_seg = seg_loss(out["scores"].pixel, masks)
    loss = check_finite(l_recon + l_seg, "training loss")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    sgd_adaptive_step(optimizer)
    return StepResult(recon=l_recon.item(), seg=l_seg.item())


@torch.no_grad()
def predict(head: RealNetHead, extractor, cache: AFSIndexCache, images: torch.Tensor, refs=None,
            batch: int = 32) -> ScoreMap:
    head.eval()
    size = tuple(images.shape[-2:])
    pixels, image_scores = [], []
    for s in range(0, images.shape[0], batch):
        stack = extractor.extract(images[s:s + batch], refs[s:s + batch] if refs else None)
        out = head(apply_selection(stack, cache), size)
        pixels.append(out["scores"].pixel)
        image_scores.append(out["scores"].image)
    return ScoreMap(pixel=torch.cat(pixels), image=torch.cat(image_scores))
