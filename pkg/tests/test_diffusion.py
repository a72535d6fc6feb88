import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from realnet.diffusion import (
    DiffusionTrainConfig,
    MLPDenoiser,
    SamplerConfig,
    UNetDenoiser,
    build_denoiser,
    build_schedule,
    ddpm_step,
    discretized_gaussian_nll,
    loss_hybrid,
    normal_kl,
    posterior_mean_variance,
    q_sample,
    q_step,
    reference_ddpm_sample,
    respace,
    sdas_sample,
    spaced_steps,
    train_diffusion,
)
from realnet.engine import ContractError, Rng, param_set, sample_standard_normal, seeded_init


class FixedDenoiser(nn.Module):
    """Ignores its input; returns constant (eps_hat, v)."""

    def __init__(self, eps=0.0, v=0.5):
        super().__init__()
        self.eps, self.v = eps, v

    def forward(self, x, t):
        return torch.full_like(x, self.eps), torch.full_like(x, self.v)


def tiny_mlp(dim=4, seed=0):
    return seeded_init(MLPDenoiser(dim, hidden=16, emb=8), Rng(seed))


class Bounded(nn.Module):
    """Squashes an untrained denoiser so long sampling chains stay finite."""

    def __init__(self, inner):
        super().__init__()
        self.inner = inner

    def forward(self, x, t):
        eps, v = self.inner(x, t)
        return 0.5 * torch.tanh(eps), torch.sigmoid(v)


class TestSchedule:
    def test_linear_two_steps(self):
        s = build_schedule(2, "linear")
        np.testing.assert_allclose(s.beta, [1e-4, 0.02])
        np.testing.assert_allclose(s.alpha_bar, [0.9999, 0.9999 * 0.98], rtol=1e-15)

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    @pytest.mark.parametrize("T", [2, 10, 200, 1000])
    def test_invariants(self, kind, T):
        s = build_schedule(T, kind)
        assert len(s.beta) == T
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert np.all(s.beta_tilde <= s.beta)
        assert s.beta_tilde[0] == s.beta[0]

    def test_too_short(self):
        with pytest.raises(ContractError):
            build_schedule(1)

    def test_respace_keeps_alpha_bar(self):
        base = build_schedule(200)
        steps = spaced_steps(200, 20)
        assert steps[0] == 200 and steps[-1] == 1 and len(steps) == 20
        r = respace(base, steps)
        np.testing.assert_allclose(r.alpha_bar, base.alpha_bar[np.array(sorted(steps)) - 1], rtol=1e-10, atol=1e-15)
        assert r.timesteps.tolist() == sorted(steps)

    def test_bad_step_lists(self):
        base = build_schedule(10)
        for steps in ([], [5, 5, 1], [1, 5], [11, 1], [5, 2]):
            with pytest.raises(ContractError):
                respace(base, steps)


class TestForward:
    def test_zero_noise(self):
        s = build_schedule(50)
        x0 = torch.randn(3, 4, dtype=torch.float64)
        out = q_sample(x0, 10, torch.zeros_like(x0), s)
        assert torch.allclose(out, math.sqrt(s.alpha_bar[9]) * x0, rtol=0, atol=1e-15)

    def test_identity_when_alpha_bar_is_one(self):
        from realnet.diffusion import DiffusionSchedule

        s = DiffusionSchedule(beta=np.array([0.0, 0.5]), timesteps=np.array([1, 2]))
        x0 = torch.randn(5, dtype=torch.float64)
        assert torch.equal(q_sample(x0, 1, torch.randn(5, dtype=torch.float64), s), x0)

    def test_out_of_range(self):
        s = build_schedule(10)
        with pytest.raises(ContractError):
            q_sample(torch.zeros(2), 0, torch.zeros(2), s)
        with pytest.raises(ContractError):
            q_sample(torch.zeros(2), 11, torch.zeros(2), s)

    def test_iterated_matches_closed_form(self):
        n, T, x0 = 100_000, 30, 0.7
        s = build_schedule(T, "linear", 1e-3, 0.05)
        rng = Rng(11)
        x = torch.full((n,), x0, dtype=torch.float64)
        for t in range(1, T + 1):
            x = q_step(x, t, sample_standard_normal(rng, (n,), torch.float64), s)
        ab = s.alpha_bar[-1]
        mean, var = math.sqrt(ab) * x0, 1 - ab
        assert abs(x.mean().item() - mean) < 3 * math.sqrt(var / n)
        assert abs(x.var().item() / var - 1) < 0.02
        closed = q_sample(torch.full((n,), x0, dtype=torch.float64), T,
                          sample_standard_normal(rng, (n,), torch.float64), s)
        assert abs(closed.var().item() / x.var().item() - 1) < 0.02


class TestReverse:
    @pytest.mark.parametrize("t", [1, 2, 7, 20])
    def test_variance_endpoints_exact(self, t):
        s = build_schedule(20)
        x = torch.randn(2, 3)
        _, var1 = posterior_mean_variance(s, x, t, torch.zeros_like(x), torch.ones_like(x))
        _, var0 = posterior_mean_variance(s, x, t, torch.zeros_like(x), torch.zeros_like(x))
        assert torch.equal(var1, torch.full_like(x, float(np.float32(s.beta[t - 1]))))
        assert torch.equal(var0, torch.full_like(x, float(np.float32(s.beta_tilde[t - 1]))))

    def test_interpolation_is_geometric(self):
        s = build_schedule(20)
        x = torch.randn(4, dtype=torch.float64)
        _, var = posterior_mean_variance(s, x, 5, torch.zeros_like(x), torch.full_like(x, 0.25))
        expect = math.exp(0.25 * math.log(s.beta[4]) + 0.75 * math.log(s.beta_tilde[4]))
        assert torch.allclose(var, torch.full_like(x, expect), rtol=1e-12)

    def test_zero_eps_mean(self):
        s = build_schedule(20)
        x = torch.randn(3, 2, dtype=torch.float64)
        mu, _ = posterior_mean_variance(s, x, 4, torch.zeros_like(x), torch.zeros_like(x))
        assert torch.allclose(mu, x / math.sqrt(s.alpha[3]), rtol=1e-14)

    def test_scalar_kl_closed_form(self):
        kl = normal_kl(torch.tensor(0.0, dtype=torch.float64), torch.tensor(0.0, dtype=torch.float64),
                       torch.tensor(1.0, dtype=torch.float64), torch.tensor(math.log(4.0), dtype=torch.float64))
        hand = math.log(2.0 / 1.0) + (1.0 + 1.0) / (2 * 4.0) - 0.5
        assert abs(kl.item() - hand) < 1e-12
        assert abs(kl.item() - 0.4431) < 1e-4

    def test_kl_identical_is_zero(self):
        m, lv = torch.randn(10, dtype=torch.float64), torch.randn(10, dtype=torch.float64)
        assert torch.allclose(normal_kl(m, lv, m, lv), torch.zeros(10, dtype=torch.float64), atol=1e-15)

    def test_discretized_nll_is_bin_mass(self):
        # density at the bin centre times the bin width
        x = torch.tensor([0.1], dtype=torch.float64)
        nll = discretized_gaussian_nll(x, torch.tensor([0.0], dtype=torch.float64),
                                       torch.tensor([math.log(0.04)], dtype=torch.float64))
        density = math.exp(-0.1 ** 2 / (2 * 0.04)) / math.sqrt(2 * math.pi * 0.04)
        assert abs(nll.item() + math.log(density * 2 / 255)) < 1e-12


class TestLoss:
    def test_gamma_zero_is_simple(self):
        s = build_schedule(20)
        x0 = torch.randn(6, 4)
        den = tiny_mlp()
        loss, parts = loss_hybrid(x0, s, den, 0.0, Rng(1))
        assert loss is parts["simple"]
        loss2, parts2 = loss_hybrid(x0, s, den, 0.001, Rng(1))
        assert torch.equal(parts2["simple"], loss)
        assert torch.allclose(loss2, loss + 0.001 * parts2["vlb"])

    def test_negative_gamma(self):
        with pytest.raises(ContractError):
            loss_hybrid(torch.zeros(2, 4), build_schedule(10), tiny_mlp(), -1.0, Rng(0))

    def test_vlb_gradient_reaches_only_variance(self):
        s = build_schedule(20)
        den = tiny_mlp()
        x0 = torch.randn(16, 4)
        t = torch.arange(1, 17)
        _, parts = loss_hybrid(x0, s, den, 1.0, Rng(2), t=t)
        parts["vlb"].backward()
        assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in den.eps_head.parameters())
        assert den.v_head.weight.grad is not None and den.v_head.weight.grad.abs().sum() > 0


class TestSampling:
    def test_s_zero_matches_reference(self):
        base = build_schedule(50)
        steps = spaced_steps(50, 10)
        den = Bounded(tiny_mlp())
        ref = reference_ddpm_sample(den, base, steps, Rng(5), (8, 4))
        out = sdas_sample(den, base, SamplerConfig("ddpm", 0.0, steps=steps), Rng(5), (8, 4))
        assert torch.equal(ref, out)

    def test_ddim_s_zero_repeatable(self):
        base = build_schedule(50)
        cfg = SamplerConfig("ddim", 0.0, steps=spaced_steps(50, 10))
        den = Bounded(tiny_mlp())
        assert torch.equal(sdas_sample(den, base, cfg, Rng(9), (8, 4)), sdas_sample(den, base, cfg, Rng(9), (8, 4)))

    @pytest.mark.parametrize("s", [0.0, 0.5])
    def test_one_step_variance(self, s):
        sched = build_schedule(10)
        den = FixedDenoiser(eps=0.3, v=0.4)
        x = torch.full((100_000,), 0.2, dtype=torch.float64)
        mu, var = posterior_mean_variance(sched, x, 6, *den(x, None))
        out = ddpm_step(den, sched, x, 6, s, Rng(3))
        assert abs(out.var().item() / ((1 + s) * var[0].item()) - 1) < 0.05
        assert abs(out.mean().item() - mu[0].item()) < 4 * math.sqrt((1 + s) * var[0].item() / x.numel())

    @pytest.mark.parametrize("choice", ["beta", "beta_tilde", "learned"])
    def test_ddim_noise_variance(self, choice):
        base = build_schedule(10)
        den = FixedDenoiser(eps=0.0, v=0.4)
        x = torch.zeros(100_000, dtype=torch.float64)
        from realnet.diffusion import ddim_step

        clean = ddim_step(den, base, x, 4, 0.0, choice, Rng(0))
        noisy = ddim_step(den, base, x, 4, 0.5, choice, Rng(0))
        _, learned = posterior_mean_variance(base, x[:1], 4, torch.zeros(1, dtype=torch.float64),
                                             torch.full((1,), 0.4, dtype=torch.float64))
        sigma = {"beta": base.beta[3], "beta_tilde": base.beta_tilde[3], "learned": learned.item()}[choice]
        assert abs((noisy - clean).var().item() / (0.5 * sigma) - 1) < 0.05

    def test_invalid_config(self):
        base = build_schedule(10)
        with pytest.raises(ContractError):
            sdas_sample(tiny_mlp(), base, SamplerConfig("ddpm", -0.1, steps=[10, 1]), Rng(0), (1, 4))
        with pytest.raises(ContractError):
            sdas_sample(tiny_mlp(), base, SamplerConfig("ddpm", 0.1, steps=[10, 3]), Rng(0), (1, 4))
        with pytest.raises(ContractError):
            sdas_sample(tiny_mlp(), base, SamplerConfig("euler", 0.1, steps=[10, 1]), Rng(0), (1, 4))


class TestTraining:
    def cfg(self, steps):
        return DiffusionTrainConfig(T=50, steps=steps, batch_size=8, base=8, mults=(1, 2), log_every=0)

    def test_constant_image_loss_halves(self):
        images = torch.full((4, 1, 8, 8), 0.6)
        _, _, losses = train_diffusion(images, self.cfg(500), Rng(0))
        assert np.mean(losses[-10:]) <= 0.5 * np.mean(losses[:10])

    def test_seeded_runs_identical(self):
        images = torch.rand(4, 1, 8, 8, generator=torch.Generator().manual_seed(0))
        _, p1, l1 = train_diffusion(images, self.cfg(5), Rng(4))
        _, p2, l2 = train_diffusion(images, self.cfg(5), Rng(4))
        assert l1 == l2
        assert all(torch.equal(p1[k], p2[k]) for k in p1)

    def test_zero_steps_returns_init(self):
        images = torch.rand(2, 1, 8, 8)
        _, params, losses = train_diffusion(images, self.cfg(0), Rng(4))
        init = param_set(build_denoiser(self.cfg(0), 1, Rng(4)))
        assert losses == []
        assert all(torch.equal(params[k], init[k]) for k in init)

    def test_empty_dataset(self):
        with pytest.raises(ContractError):
            train_diffusion(torch.zeros(0, 1, 8, 8), self.cfg(1), Rng(0))

    def test_unet_shapes(self):
        net = UNetDenoiser(channels=3, base=8, mults=(1, 2, 2))
        eps, v = net(torch.randn(2, 3, 16, 16), torch.tensor([1, 5]))
        assert eps.shape == v.shape == (2, 3, 16, 16)
