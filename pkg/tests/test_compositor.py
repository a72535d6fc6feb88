import warnings

import numpy as np
import pytest

from realnet.compositor import (
    DegenerateInputWarning,
    SynthConfig,
    blend,
    fade,
    fade_derivative,
    foreground_mask,
    make_mask,
    perlin_noise,
    synth_dataset,
)
from realnet.engine import ContractError, Rng, ShapeError


def rand_img(rng, h=16, w=16):
    return rng.uniform(size=(h, w, 3)).astype(np.float32)


class TestPerlin:
    def test_fade(self):
        assert fade(0.0) == 0.0 and fade(1.0) == 1.0 and fade(0.5) == 0.5
        assert fade_derivative(0.0) == 0.0 and fade_derivative(1.0) == 0.0
        ts = np.linspace(0, 1, 101)
        np.testing.assert_allclose(fade_derivative(ts), np.gradient(fade(ts), ts), atol=2e-3)

    @pytest.mark.parametrize("gx,gy", [(2, 2), (4, 8), (16, 1)])
    def test_lattice_corners_zero(self, gx, gy):
        f = perlin_noise(32, 32, gx, gy, Rng(1)).values
        assert np.all(f[:: 32 // gy, :: 32 // gx] == 0.0)

    def test_deterministic_and_bounded(self):
        a = perlin_noise(24, 40, 4, 2, Rng(5)).values
        b = perlin_noise(24, 40, 4, 2, Rng(5)).values
        assert np.array_equal(a, b)
        assert a.min() >= -1 and a.max() <= 1 and a.std() > 0
        assert not np.array_equal(a, perlin_noise(24, 40, 4, 2, Rng(6)).values)

    def test_errors(self):
        with pytest.raises(ShapeError):
            perlin_noise(0, 8, 2, 2, Rng(0))
        with pytest.raises(ContractError):
            perlin_noise(8, 8, 0, 2, Rng(0))


class TestForeground:
    def test_two_level(self):
        img = np.full((20, 20, 3), 0.1, np.float32)
        img[5:12, 6:15] = 0.9
        fg = foreground_mask(img)
        expect = np.zeros((20, 20), np.float32)
        expect[5:12, 6:15] = 1
        assert np.array_equal(fg, expect)

    def test_polarity_dark_object(self):
        img = np.full((20, 20, 3), 0.9, np.float32)
        img[5:12, 6:15] = 0.1
        assert foreground_mask(img)[8, 8] == 1 and foreground_mask(img)[0, 0] == 0

    def test_constant_image(self):
        with pytest.warns(DegenerateInputWarning):
            fg = foreground_mask(np.full((8, 8, 3), 0.4, np.float32))
        assert np.all(fg == 1)

    def test_noisy_disc_iou(self):
        rng = np.random.default_rng(0)
        yy, xx = np.mgrid[:64, :64]
        disc = (yy - 30) ** 2 + (xx - 34) ** 2 < 18 ** 2
        img = np.where(disc, 0.8, 0.15)[..., None].repeat(3, -1) + rng.normal(0, 0.02, (64, 64, 3))
        fg = foreground_mask(img) > 0
        assert (fg & disc).sum() / (fg | disc).sum() >= 0.95


class TestMask:
    def test_constant_field(self):
        with pytest.warns(DegenerateInputWarning):
            m = make_mask(np.full((8, 8), 0.3))
        assert not m.any()

    def test_threshold_monotone(self):
        f = perlin_noise(32, 32, 4, 4, Rng(2))
        prev = None
        for th in np.linspace(0.05, 0.95, 10):
            m = make_mask(f, threshold=th)
            if prev is not None:
                assert np.all(m <= prev)
            prev = m

    def test_empty_foreground(self):
        f = perlin_noise(16, 16, 2, 2, Rng(3))
        assert not make_mask(f, np.zeros((16, 16))).any()

    def test_binary_and_thresholded(self):
        v = perlin_noise(16, 16, 2, 2, Rng(3)).values
        m = make_mask(v)
        norm = (v - v.min()) / (v.max() - v.min())
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert np.array_equal(m > 0, norm > 0.5)


class TestBlend:
    def test_identities(self):
        rng = np.random.default_rng(1)
        I, P = rand_img(rng), rand_img(rng)
        M = (rng.uniform(size=(16, 16)) > 0.5).astype(np.float32)
        assert np.array_equal(blend(I, P, M, 0.0), I)
        assert np.array_equal(blend(I, P, np.zeros_like(M), 0.8), I)
        assert np.array_equal(blend(I, P, np.ones_like(M), 1.0), P)

    def test_scalar_case(self):
        I = np.full((1, 1, 3), 0.2)
        P = np.full((1, 1, 3), 0.8)
        np.testing.assert_allclose(blend(I, P, np.ones((1, 1)), 0.5), 0.5, rtol=0, atol=1e-15)

    def test_monotone_in_delta(self):
        rng = np.random.default_rng(2)
        I, P = rand_img(rng).astype(np.float64), rand_img(rng).astype(np.float64)
        M = np.ones((16, 16))
        prev = None
        for d in np.linspace(0, 1, 11):
            dist = np.abs(blend(I, P, M, d) - P)
            if prev is not None:
                assert np.all(dist <= prev + 1e-15)
            prev = dist

    def test_errors(self):
        I = np.zeros((4, 4, 3))
        with pytest.raises(ShapeError):
            blend(I, np.zeros((4, 5, 3)), np.zeros((4, 4)), 0.5)
        with pytest.raises(ShapeError):
            blend(I, I, np.zeros((3, 4)), 0.5)
        with pytest.raises(ContractError):
            blend(I, I, np.zeros((4, 4)), 1.5)


def toy_normals(n=6, size=32, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        img = np.full((size, size, 3), 0.1, np.float32) + rng.uniform(0, 0.02, (size, size, 3)).astype(np.float32)
        img[6:26, 4:28] = rng.uniform(0.6, 0.9, (20, 24, 3))
        out.append(img)
    return out


class TestSynth:
    def test_outside_mask_equal_and_inside_foreground(self):
        normals = toy_normals()
        donors = [rand_img(np.random.default_rng(9), 32, 32)]
        samples = list(synth_dataset(normals, donors, SynthConfig(anomaly_fraction=1.0), Rng(0), count=200))
        n_anom = 0
        for s in samples:
            outside = s.M == 0
            assert np.array_equal(s.A[outside], s.I[outside])
            assert np.all(s.M <= foreground_mask(s.I))
            n_anom += bool(s.M.any())
        assert n_anom > 150

    def test_alternation_and_zero_fraction(self):
        normals = toy_normals()
        donors = [rand_img(np.random.default_rng(9), 32, 32)]
        half = list(synth_dataset(normals, donors, SynthConfig(), Rng(0), count=10))
        assert [s.delta > 0 for s in half] == [False, True] * 5
        pure = list(synth_dataset(normals, [], SynthConfig(anomaly_fraction=0.0), Rng(0), count=10))
        assert all(not s.M.any() and np.array_equal(s.A, s.I) for s in pure)

    def test_deterministic(self):
        normals = toy_normals()
        donors = [rand_img(np.random.default_rng(9), 32, 32)]
        a = list(synth_dataset(normals, donors, SynthConfig(), Rng(4), count=12))
        b = list(synth_dataset(normals, donors, SynthConfig(), Rng(4), count=12))
        for x, y in zip(a, b):
            assert np.array_equal(x.A, y.A) and np.array_equal(x.M, y.M) and x.delta == y.delta

    def test_delta_mean(self):
        normals = toy_normals()
        donors = [rand_img(np.random.default_rng(9), 32, 32)]
        deltas = [s.delta for s in synth_dataset(normals, donors, SynthConfig(anomaly_fraction=1.0), Rng(1),
                                                 count=1000) if s.M.any()]
        assert len(deltas) > 900
        assert all(0.5 <= d <= 1.0 for d in deltas)
        assert 0.73 <= np.mean(deltas) <= 0.77

    def test_empty_donors(self):
        with pytest.raises(ContractError):
            next(synth_dataset(toy_normals(), [], SynthConfig(), Rng(0)))
        with pytest.raises(ContractError):
            next(synth_dataset([], [np.zeros((4, 4, 3))], SynthConfig(), Rng(0)))
