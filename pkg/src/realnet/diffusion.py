"""Diffusion model with learned reverse variance and strength-controllable sampling.

Images live in [-1, 1] inside this module. Timesteps are 1-based: index ``t``
of a schedule refers to ``beta[t - 1]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .engine import (
    ContractError,
    Rng,
    check_finite,
    make_optimizer,
    param_set,
    sample_standard_normal,
    seeded_init,
    sgd_adaptive_step,
)

log = logging.getLogger(__name__)

L0_BIN_WIDTH = 2.0 / 255.0


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    # model timestep fed to the denoiser for each schedule index (differs after respacing)
    timesteps: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def beta_tilde(self) -> np.ndarray:
        ab, abp = self.alpha_bar, self.alpha_bar_prev
        bt = (1.0 - abp) / (1.0 - ab) * self.beta
        # the posterior variance vanishes at t=1; use beta_1 so log-space interpolation stays finite
        bt[0] = self.beta[0]
        return bt

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep {t} outside 1..{self.T}")


def _cosine_alpha_bar(T: int, offset: float = 0.008) -> np.ndarray:
    ts = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((ts + offset) / (1 + offset) * math.pi / 2) ** 2
    return f / f[0]


def build_schedule(T: int, kind: str = "cosine", beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise ContractError(f"need at least 2 diffusion steps, got {T}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        ab = _cosine_alpha_bar(T)
        beta = np.minimum(1.0 - ab[1:] / ab[:-1], 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return DiffusionSchedule(beta=beta, timesteps=np.arange(1, T + 1))


def spaced_steps(T: int, n: int) -> list[int]:
    """``n`` roughly evenly spaced timesteps in ``1..T``, descending and ending at 1."""
    n = max(1, min(n, T))
    picks = np.unique(np.round(np.linspace(1, T, n)).astype(int))
    return sorted(picks.tolist(), reverse=True)


def respace(sched: DiffusionSchedule, steps: list[int]) -> DiffusionSchedule:
    """Keep the cumulative products at ``steps`` and recompute beta from them."""
    validate_steps(steps, sched.T)
    keep = sorted(steps)
    ab = sched.alpha_bar[np.array(keep) - 1]
    prev = np.concatenate([[1.0], ab[:-1]])
    beta = 1.0 - ab / prev
    return DiffusionSchedule(beta=beta, timesteps=sched.timesteps[np.array(keep) - 1])


def validate_steps(steps, T: int) -> None:
    if not steps:
        raise ContractError("empty step list")
    if any(a <= b for a, b in zip(steps, steps[1:])):
        raise ContractError("step list must be strictly descending")
    if steps[-1] != 1 or steps[0] > T:
        raise ContractError(f"step list must lie in 1..{T} and end at 1")


def _coef(values: np.ndarray, t: int, like: torch.Tensor) -> torch.Tensor:
    return torch.tensor(values[t - 1], dtype=like.dtype)


def _coef_batch(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = torch.as_tensor(values, dtype=like.dtype)[t - 1]
    return out.reshape(-1, *([1] * (like.dim() - 1)))


# --------------------------------------------------------------------------
# forward process and the reverse-step Gaussian
# --------------------------------------------------------------------------


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    if isinstance(t, int):
        sched.check_t(t)
        ab = _coef(sched.alpha_bar, t, x0)
    else:
        if int(t.min()) < 1 or int(t.max()) > sched.T:
            raise ContractError("timestep out of range")
        ab = _coef_batch(sched.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def q_step(x_prev: torch.Tensor, t: int, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """One forward transition q(x_t | x_{t-1})."""
    sched.check_t(t)
    b = _coef(sched.beta, t, x_prev)
    return (1.0 - b).sqrt() * x_prev + b.sqrt() * eps


def q_posterior(x0, x_t, t: torch.Tensor, sched: DiffusionSchedule):
    """Mean and log-variance of q(x_{t-1} | x_t, x_0); only meaningful for t > 1."""
    ab = _coef_batch(sched.alpha_bar, t, x_t)
    abp = _coef_batch(sched.alpha_bar_prev, t, x_t)
    b = _coef_batch(sched.beta, t, x_t)
    a = 1.0 - b
    mean = (b * abp.sqrt() / (1 - ab)) * x0 + ((1 - abp) * a.sqrt() / (1 - ab)) * x_t
    var = (1 - abp) / (1 - ab) * b
    return mean, var.clamp_min(1e-20).log().expand_as(x_t)


def _mean_and_logvar(sched, x_t, t, eps_hat, v):
    b = _coef_batch(sched.beta, t, x_t)
    ab = _coef_batch(sched.alpha_bar, t, x_t)
    mu = (x_t - b / (1.0 - ab).sqrt() * eps_hat) / (1.0 - b).sqrt()
    log_b = b.log()
    log_bt = _coef_batch(sched.beta_tilde, t, x_t).log()
    logvar = v * log_b + (1.0 - v) * log_bt
    return mu, logvar


def posterior_mean_variance(sched: DiffusionSchedule, x_t: torch.Tensor, t: int, eps_hat: torch.Tensor,
                            v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Reverse-step mean and variance from the denoiser outputs at timestep ``t``."""
    sched.check_t(t)
    tt = torch.full((x_t.shape[0],), t, dtype=torch.long)
    mu, logvar = _mean_and_logvar(sched, x_t, tt, eps_hat, v)
    # exp(log b) need not round-trip, so the endpoints take the table values directly
    b = _coef(sched.beta, t, x_t)
    bt = _coef(sched.beta_tilde, t, x_t)
    var = torch.where(v == 1, b, torch.where(v == 0, bt, logvar.exp()))
    return mu, var


def normal_kl(mean1, logvar1, mean2, logvar2):
    """KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))), elementwise."""
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2)
                  + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def discretized_gaussian_nll(x0, mean, logvar, bin_width: float = L0_BIN_WIDTH):
    """-log of the Gaussian density at ``x0`` times the bin width."""
    return 0.5 * (math.log(2 * math.pi) + logvar + (x0 - mean) ** 2 * torch.exp(-logvar)) - math.log(bin_width)


# --------------------------------------------------------------------------
# denoisers: forward(x_t, t) -> (eps_hat, v)
# --------------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class MLPDenoiser(nn.Module):
    """Denoiser for flat vectors; separate heads so the mean path can be isolated."""

    def __init__(self, dim: int, hidden: int = 64, emb: int = 32):
        super().__init__()
        self.emb = emb
        self.trunk = nn.Sequential(nn.Linear(dim + emb, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU())
        self.eps_head = nn.Linear(hidden, dim)
        self.v_head = nn.Linear(hidden, dim)

    def forward(self, x, t):
        e = timestep_embedding(t, self.emb).to(x.dtype)
        h = self.trunk(torch.cat([x, e], dim=-1))
        return self.eps_head(h), self.v_head(h)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(emb, cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, e):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(e)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNetDenoiser(nn.Module):
    """Residual blocks with stride-2 downsampling, mirrored upsampling and skips."""

    def __init__(self, channels: int = 3, base: int = 32, mults=(1, 2, 2), emb: int = 64):
        super().__init__()
        self.channels = channels
        self.emb = emb
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.inc = nn.Conv2d(channels, base, 3, padding=1)
        widths = [base * m for m in mults]
        self.down_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        cin = base
        for i, w in enumerate(widths):
            self.down_blocks.append(ResBlock(cin, w, emb))
            cin = w
            if i < len(widths) - 1:
                self.downs.append(nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.mid = ResBlock(cin, cin, emb)
        self.up_blocks = nn.ModuleList()
        for w in reversed(widths):
            self.up_blocks.append(ResBlock(cin + w, w, emb))
            cin = w
        self.out_norm = nn.GroupNorm(min(8, cin), cin)
        self.out = nn.Conv2d(cin, 2 * channels, 3, padding=1)

    def forward(self, x, t):
        e = self.time_mlp(timestep_embedding(t, self.emb).to(x.dtype))
        h = self.inc(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, e)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid(h, e)
        for block in self.up_blocks:
            s = skips.pop()
            if h.shape[-2:] != s.shape[-2:]:
                h = F.interpolate(h, size=s.shape[-2:], mode="nearest")
            h = block(torch.cat([h, s], dim=1), e)
        out = self.out(F.silu(self.out_norm(h)))
        eps_hat, v = out.split(self.channels, dim=1)
        return eps_hat, v


# --------------------------------------------------------------------------
# training objective
# --------------------------------------------------------------------------


def loss_hybrid(x0: torch.Tensor, sched: DiffusionSchedule, denoiser: nn.Module, gamma: float, rng: Rng,
                t: torch.Tensor | None = None):
    """Returns ``(loss, parts)`` with ``loss = L_simple + gamma * L_vlb``.

    ``L_vlb`` is estimated as ``T`` times the mean per-timestep term for the
    sampled ``t`` (uniform over 1..T). Its mean path sees the denoiser output
    through a stop-gradient, so only the variance head learns from it.
    """
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    n = x0.shape[0]
    if t is None:
        t = torch.from_numpy(rng.integers(1, sched.T + 1, size=n)).long()
    eps = sample_standard_normal(rng, x0.shape, x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    eps_hat, v = denoiser(x_t, torch.as_tensor(sched.timesteps)[t - 1])
    l_simple = ((eps - eps_hat) ** 2).mean()
    parts = {"simple": l_simple}
    if gamma == 0:
        return l_simple, parts
    l_vlb = vlb_terms(sched, x0, x_t, t, eps_hat.detach(), v).mean() * sched.T
    parts["vlb"] = l_vlb
    return l_simple + gamma * l_vlb, parts


def vlb_terms(sched, x0, x_t, t, eps_hat, v) -> torch.Tensor:
    """Per-sample variational-bound term: KL for t > 1, decoder NLL for t = 1 (nats, mean over dims)."""
    mu, logvar = _mean_and_logvar(sched, x_t, t, eps_hat, v)
    true_mean, true_logvar = q_posterior(x0, x_t, t, sched)
    dims = list(range(1, x0.dim()))
    kl = normal_kl(true_mean, true_logvar, mu, logvar).mean(dim=dims)
    nll = discretized_gaussian_nll(x0, mu, logvar).mean(dim=dims)
    return torch.where(t == 1, nll, kl)


@dataclass
class DiffusionTrainConfig:
    T: int = 200
    schedule: str = "cosine"
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    gamma: float = 0.001
    base: int = 32
    mults: tuple = (1, 2, 2)
    log_every: int = 50


def build_denoiser(cfg: DiffusionTrainConfig, channels: int, rng: Rng) -> UNetDenoiser:
    model = UNetDenoiser(channels=channels, base=cfg.base, mults=tuple(cfg.mults))
    return seeded_init(model, rng.split("denoiser-init"))


def train_diffusion(images: torch.Tensor, cfg: DiffusionTrainConfig, rng: Rng, model: nn.Module | None = None):
    """Fit a denoiser to ``images`` (N, C, H, W) in [0, 1].

    Returns ``(model, params, losses)`` where ``losses`` holds the per-step
    ``L_simple`` values.
    """
    if images.shape[0] == 0:
        raise ContractError("empty diffusion training set")
    sched = build_schedule(cfg.T, cfg.schedule)
    if model is None:
        model = build_denoiser(cfg, images.shape[1], rng)
    data = images.float() * 2.0 - 1.0
    opt = make_optimizer(model.parameters(), lr=cfg.lr)
    batch_rng = rng.split("batches")
    noise_rng = rng.split("noise")
    losses = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.from_numpy(batch_rng.integers(0, data.shape[0], size=min(cfg.batch_size, data.shape[0])))
        loss, parts = loss_hybrid(data[idx], sched, model, cfg.gamma, noise_rng)
        check_finite(loss, "diffusion loss")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        sgd_adaptive_step(opt)
        losses.append(parts["simple"].item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("diffusion step %d  L_simple %.5f", step, losses[-1])
    model.eval()
    return model, param_set(model), losses


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


@dataclass
class SamplerConfig:
    kind: str = "ddpm"
    s: float = 0.0
    ddim_sigma_choice: str = "learned"
    steps: list = field(default_factory=lambda: spaced_steps(200, 20))

    def validate(self, T: int) -> None:
        if self.kind not in ("ddpm", "ddim"):
            raise ContractError(f"unknown sampler kind {self.kind!r}")
        if self.s < 0:
            raise ContractError("anomaly strength must be non-negative")
        if self.ddim_sigma_choice not in ("beta", "beta_tilde", "learned"):
            raise ContractError(f"unknown ddim variance choice {self.ddim_sigma_choice!r}")
        validate_steps(self.steps, T)


def perturbed_step(mu: torch.Tensor, var: torch.Tensor, s: float, rng: Rng) -> torch.Tensor:
    """Draw from N(mu, (1 + s) var)."""
    z = sample_standard_normal(rng, mu.shape, mu.dtype)
    return mu + ((1.0 + s) * var).sqrt() * z


def _model_out(denoiser, sched, x, i):
    tt = torch.full((x.shape[0],), int(sched.timesteps[i]), dtype=torch.long)
    return denoiser(x, tt)


def ddpm_step(denoiser, sched: DiffusionSchedule, x: torch.Tensor, t: int, s: float, rng: Rng) -> torch.Tensor:
    eps_hat, v = _model_out(denoiser, sched, x, t - 1)
    mu, var = posterior_mean_variance(sched, x, t, eps_hat, v)
    return perturbed_step(mu, var, s, rng)


def ddim_step(denoiser, sched: DiffusionSchedule, x: torch.Tensor, t: int, s: float, sigma_choice: str,
              rng: Rng) -> torch.Tensor:
    eps_hat, v = _model_out(denoiser, sched, x, t - 1)
    ab = _coef(sched.alpha_bar, t, x)
    abp = _coef(sched.alpha_bar_prev, t, x)
    x0_pred = (x - (1 - ab).sqrt() * eps_hat) / ab.sqrt()
    out = abp.sqrt() * x0_pred + (1 - abp).sqrt() * eps_hat
    if s == 0:
        return out
    if sigma_choice == "beta":
        var = _coef(sched.beta, t, x).expand_as(x)
    elif sigma_choice == "beta_tilde":
        var = _coef(sched.beta_tilde, t, x).expand_as(x)
    else:
        _, var = posterior_mean_variance(sched, x, t, eps_hat, v)
    z = sample_standard_normal(rng, x.shape, x.dtype)
    return out + (s * var).sqrt() * z


@torch.no_grad()
def sdas_sample(denoiser, base_sched: DiffusionSchedule, cfg: SamplerConfig, rng: Rng, shape) -> torch.Tensor:
    """Reverse chain with the transition variance scaled by ``1 + s`` (ddpm) or
    deterministic DDIM steps plus noise of variance ``s * Sigma`` (ddim)."""
    cfg.validate(base_sched.T)
    sched = respace(base_sched, cfg.steps)
    x = sample_standard_normal(rng, shape)
    for t in range(sched.T, 0, -1):
        if cfg.kind == "ddpm":
            x = ddpm_step(denoiser, sched, x, t, cfg.s, rng)
        else:
            x = ddim_step(denoiser, sched, x, t, cfg.s, cfg.ddim_sigma_choice, rng)
    return check_finite(x, "diffusion sample")


@torch.no_grad()
def reference_ddpm_sample(denoiser, base_sched: DiffusionSchedule, steps, rng: Rng, shape) -> torch.Tensor:
    """Plain ancestral sampling x_{t-1} ~ N(mu, Sigma) with no strength term."""
    sched = respace(base_sched, steps)
    x = sample_standard_normal(rng, shape)
    for t in range(sched.T, 0, -1):
        eps_hat, v = _model_out(denoiser, sched, x, t - 1)
        mu, var = posterior_mean_variance(sched, x, t, eps_hat, v)
        z = sample_standard_normal(rng, x.shape, x.dtype)
        x = mu + var.sqrt() * z
    return check_finite(x, "diffusion sample")


def to_unit_range(x: torch.Tensor) -> torch.Tensor:
    return ((x.clamp(-1.0, 1.0) + 1.0) / 2.0)
