import pytest
import torch
from hypothesis import given, settings, strategies as st

from drwkv.retinex import (GER_EPS, GERParams, LightPreprocess, estimate_components, ger_recompose,
                           ger_reflectance, gray_world, luma, reflectance_restore)
from drwkv.tensor_core import finite_diff_check


def _img(*means):
    return torch.stack([torch.full((4, 4), m) for m in means])


class TestGrayWorld:
    def test_uniform_gray_unchanged(self):
        x = torch.full((3, 5, 5), 0.4)
        torch.testing.assert_close(gray_world(x), x)

    def test_gains(self):
        x = _img(0.2, 0.4, 0.6).double()
        out = gray_world(x)
        torch.testing.assert_close(out[:, 0, 0], torch.tensor([0.4, 0.4, 0.4], dtype=torch.float64))
        # gains (2, 1, 2/3)
        torch.testing.assert_close(out / x, torch.stack([torch.full((4, 4), g) for g in (2.0, 1.0, 2 / 3)]).double())

    def test_black_image(self):
        out = gray_world(torch.zeros(3, 4, 4))
        assert torch.equal(out, torch.zeros(3, 4, 4))

    def test_one_black_channel_is_finite(self):
        out = gray_world(_img(0.0, 0.5, 0.5))
        assert torch.isfinite(out).all()

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), r=st.floats(0.05, 1), g=st.floats(0.05, 1), b=st.floats(0.05, 1))
    def test_equal_channel_means(self, seed, r, g, b):
        gen = torch.Generator().manual_seed(seed)
        x = torch.rand(3, 8, 8, generator=gen) * torch.tensor([r, g, b]).view(3, 1, 1)
        m = gray_world(x).double().mean(dim=(-2, -1))
        assert float(m.max() - m.min()) < 1e-6

    def test_batched(self, gen):
        x = torch.rand(2, 3, 4, 4, generator=gen)
        torch.testing.assert_close(gray_world(x)[1], gray_world(x[1]))


class TestEstimateComponents:
    def test_zero_heads(self, gen):
        p = LightPreprocess()
        p.zero_heads()
        s, l_, n = estimate_components(torch.rand(3, 8, 8, generator=gen), p)
        assert torch.equal(s, torch.full((3, 8, 8), 0.5))
        assert torch.equal(l_, torch.ones(1, 8, 8))
        assert torch.equal(n, torch.zeros(3, 8, 8))

    def test_ranges_over_random_weights(self):
        for trial in range(100):
            torch.manual_seed(trial)
            p = LightPreprocess()
            for m in p.modules():
                if isinstance(m, torch.nn.Conv2d):
                    torch.nn.init.normal_(m.weight, std=1.0)
            s, l_, n = estimate_components(torch.rand(1, 3, 6, 6), p)
            assert s.shape == (1, 3, 6, 6) and l_.shape == (1, 1, 6, 6) and n.shape == (1, 3, 6, 6)
            assert torch.all((s >= 0) & (s <= 1))
            assert torch.all((l_ >= 0) & (l_ <= 2))
            assert torch.all((n >= -1) & (n <= 1))

    def test_seven_channel_input(self):
        p = LightPreprocess(8)
        assert p.backbone[0].depthwise.in_channels == 7

    def test_luma(self):
        torch.testing.assert_close(luma(_img(0.3, 0.6, 0.9)), torch.full((1, 4, 4), 0.6))


class TestReflectanceRestore:
    def test_square_of_input(self):
        x = torch.full((3, 2, 2), 0.5, dtype=torch.float64)
        out = reflectance_restore(x, torch.zeros_like(x), torch.ones(1, 2, 2, dtype=torch.float64))
        torch.testing.assert_close(out, torch.full_like(x, 0.25 / (1 + GER_EPS)))
        assert abs(float(out[0, 0, 0]) - 0.25) < 1e-4

    def test_noise_equal_input_gives_zero(self, gen):
        x = torch.rand(3, 4, 4, generator=gen)
        assert torch.equal(reflectance_restore(x, x, torch.ones(1, 4, 4)), torch.zeros_like(x))

    def test_output_in_unit_range(self, gen):
        x = torch.rand(3, 8, 8, generator=gen)
        n = torch.rand(3, 8, 8, generator=gen) * 2 - 1
        l_ = torch.rand(1, 8, 8, generator=gen) * 0.01
        out = reflectance_restore(x, n, l_)
        assert out.min() >= 0 and out.max() <= 1


class TestGER:
    def test_round_trip_identity(self, gen):
        x = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64)
        z = torch.zeros_like(x)
        out = ger_recompose(x, z, z, torch.ones(2, 1, 8, 8, dtype=torch.float64), z, GERParams(0.0).double())
        torch.testing.assert_close(out, x, rtol=0, atol=1e-15)

    def test_round_trip_clamps(self):
        x = torch.tensor([-0.5, 0.3, 1.7]).view(3, 1, 1)
        z = torch.zeros_like(x)
        out = ger_recompose(x, z, z, torch.ones(1, 1, 1), z, GERParams(0.0))
        torch.testing.assert_close(out, x.clamp(0, 1))

    def test_edge_term(self):
        p = GERParams(0.0)
        with torch.no_grad():
            p.alpha.fill_(1.0)
        x = torch.full((3, 2, 2), 0.5, dtype=torch.float64)
        z = torch.zeros_like(x)
        out = ger_recompose(x, torch.full_like(x, 0.1), z, torch.ones(1, 2, 2, dtype=torch.float64), z, p.double())
        # (0.5/(1+eps) + 0.1) * (1+eps)
        torch.testing.assert_close(out, torch.full_like(x, 0.5 + 0.1 * (1 + GER_EPS)))
        assert abs(float(out[0, 0, 0].detach()) - 0.6) < 1e-4

    def test_gamma_monotone(self, gen):
        x = torch.rand(3, 6, 6, generator=gen) * 0.5
        e = torch.rand(3, 6, 6, generator=gen) * 0.2 - 0.1
        n = torch.rand(3, 6, 6, generator=gen) * 0.2 - 0.1
        s = torch.rand(3, 6, 6, generator=gen)
        l_ = torch.rand(1, 6, 6, generator=gen) + 0.5
        prev = None
        for g in (0.0, 0.1, 0.5, 1.0):
            p = GERParams(0.2)
            with torch.no_grad():
                p.gamma.fill_(g)
            out = ger_recompose(x, e, n, l_, s, p)
            if prev is not None:
                assert torch.all(out >= prev)
            prev = out

    def test_return_reflectance(self, gen):
        x = torch.rand(3, 4, 4, generator=gen)
        n = torch.zeros_like(x)
        l_ = torch.full((1, 4, 4), 0.5)
        _, refl = ger_recompose(x, n, n, l_, n, GERParams(), return_reflectance=True)
        torch.testing.assert_close(refl, ger_reflectance(x, n, l_))
        assert refl.min() >= 0 and refl.max() <= 1

    def test_gradients_wrt_scalars(self, gen):
        p = GERParams(0.3).double()
        x = torch.rand(3, 5, 5, generator=gen, dtype=torch.float64) * 0.4 + 0.1
        e, n, s = (torch.rand(3, 5, 5, generator=gen, dtype=torch.float64) * 0.1 for _ in range(3))
        l_ = torch.rand(1, 5, 5, generator=gen, dtype=torch.float64) + 0.5
        err = finite_diff_check(lambda: ger_recompose(x, e, n, l_, s, p).sum(), [p.alpha, p.beta, p.gamma])
        assert err < 1e-5

    def test_invalid_eps(self):
        with pytest.raises(ValueError):
            GERParams(eps=0.0)
