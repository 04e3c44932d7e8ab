import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from surgvid.diffusion import (
    NoiseSchedule,
    ddim_step,
    ddpm_step,
    diffusion_loss,
    forward_diffuse,
    make_noise_schedule,
    posterior_mean,
    predict_x0,
    strided_timesteps,
)
from surgvid.errors import ConfigError, NumericError, ShapeError

# prod_{i<1000} (1 - beta_i) for the default linear schedule, evaluated with
# mpmath at 50 significant digits (independent of torch.cumprod)
ALPHA_BAR_LAST = 4.0358297653756833148e-05


def hand_schedule(betas):
    betas = torch.tensor(betas, dtype=torch.float64)
    alphas = 1 - betas
    return NoiseSchedule("linear", len(betas), betas, alphas, torch.cumprod(alphas, 0))


@pytest.fixture(scope="module")
def sched():
    return make_noise_schedule("linear", 1000, 1e-4, 0.02)


class TestSchedule:
    def test_default_endpoints(self, sched):
        assert sched.betas[0].item() == pytest.approx(1e-4, abs=1e-15)
        assert sched.betas[999].item() == pytest.approx(0.02, abs=1e-15)
        assert sched.alpha_bars[0].item() == pytest.approx(0.9999, abs=1e-15)

    def test_last_alpha_bar_matches_high_precision_product(self, sched):
        assert sched.alpha_bars[-1].item() == pytest.approx(ALPHA_BAR_LAST, rel=1e-9)
        assert sched.alpha_bars[-1].item() < 1e-3

    def test_single_step(self):
        s = make_noise_schedule("linear", 1, 0.5, 0.5)
        assert s.betas.tolist() == [0.5]
        assert s.alpha_bars.tolist() == [0.5]

    def test_monotone_and_recursive(self, sched):
        assert bool((sched.betas[1:] >= sched.betas[:-1]).all())
        assert bool((sched.alpha_bars[1:] < sched.alpha_bars[:-1]).all())
        assert torch.equal(sched.alpha_bars[1:], sched.alpha_bars[:-1] * sched.alphas[1:])
        assert torch.equal(sched.alphas, 1 - sched.betas)

    @pytest.mark.parametrize(
        "kwargs",
        [dict(T=0), dict(T=-3), dict(beta_min=0.0), dict(beta_min=0.03, beta_max=0.02), dict(beta_max=1.0)],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            make_noise_schedule(**kwargs)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            make_noise_schedule("cosine")


class TestForward:
    def test_closed_form_example(self):
        s = hand_schedule([0.75])  # abar_0 = 0.25
        out = forward_diffuse(torch.tensor([1.0], dtype=torch.float64), 0, torch.tensor([1.0], dtype=torch.float64), s)
        assert out.item() == pytest.approx(1.3660254037844386, abs=1e-12)

    def test_noise_free_limit(self):
        s = hand_schedule([1e-300, 0.5])
        x0 = torch.randn(3, 4, dtype=torch.float64)
        out = forward_diffuse(x0, 0, torch.randn(3, 4, dtype=torch.float64), s)
        torch.testing.assert_close(out, x0, rtol=0, atol=1e-12)

    def test_zero_in_zero_out(self, sched):
        z = torch.zeros(2, 5, 4, 6, 8)
        assert torch.equal(forward_diffuse(z, 500, z, sched), z)

    def test_shape_mismatch(self, sched):
        with pytest.raises(ShapeError):
            forward_diffuse(torch.zeros(2, 3), 0, torch.zeros(3, 2), sched)

    def test_timestep_range(self, sched):
        with pytest.raises(ConfigError):
            forward_diffuse(torch.zeros(2), 1000, torch.zeros(2), sched)

    def test_per_sample_timesteps(self, sched):
        x0, eps = torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
        t = torch.tensor([0, 10, 999])
        batched = forward_diffuse(x0, t, eps, sched)
        for i in range(3):
            torch.testing.assert_close(batched[i], forward_diffuse(x0[i], int(t[i]), eps[i], sched))

    def test_variance_preserved(self, sched):
        g = torch.Generator().manual_seed(0)
        x0 = torch.randn(100_000, generator=g, dtype=torch.float64)
        eps = torch.randn(100_000, generator=g, dtype=torch.float64)
        for t in (0, 1, 250, 500, 999):
            assert forward_diffuse(x0, t, eps, sched).var().item() == pytest.approx(1.0, rel=0.05)


class TestPredictX0:
    def test_inverse_example(self):
        s = hand_schedule([0.75])
        out = predict_x0(torch.tensor([1.3660254037844386], dtype=torch.float64), 0,
                         torch.tensor([1.0], dtype=torch.float64), s)
        assert out.item() == pytest.approx(1.0, abs=1e-12)

    def test_all_noise_gives_zero(self, sched):
        xt = torch.randn(10, dtype=torch.float64)
        t = 300
        eps_hat = xt / (1 - sched.alpha_bars[t]).sqrt()
        torch.testing.assert_close(predict_x0(xt, t, eps_hat, sched), torch.zeros(10, dtype=torch.float64))

    def test_singular(self):
        s = hand_schedule([0.5, 0.5])
        s = NoiseSchedule("linear", 2, s.betas, s.alphas, torch.tensor([0.5, 0.0], dtype=torch.float64))
        with pytest.raises(NumericError):
            predict_x0(torch.ones(2), 1, torch.ones(2), s)

    @settings(max_examples=50, deadline=None)
    @given(t=st.integers(0, 999), seed=st.integers(0, 2**31 - 1))
    def test_round_trip(self, sched, t, seed):
        g = torch.Generator().manual_seed(seed)
        x0 = torch.randn(5, 4, 6, 8, generator=g, dtype=torch.float64)
        eps = torch.randn(5, 4, 6, 8, generator=g, dtype=torch.float64)
        back = predict_x0(forward_diffuse(x0, t, eps, sched), t, eps, sched)
        torch.testing.assert_close(back, x0, rtol=1e-6, atol=1e-6)


class TestReverse:
    def test_final_step_ignores_z(self, sched):
        xt, eps = torch.randn(4), torch.randn(4)
        a = ddpm_step(xt, 0, eps, torch.zeros(4), sched)
        b = ddpm_step(xt, 0, eps, torch.randn(4) * 100, sched)
        assert torch.equal(a, b)

    def test_update_rule_example(self):
        s = hand_schedule([0.5, 0.01])  # alpha_1 = 0.99, beta_1 = 0.01
        out = ddpm_step(torch.tensor([1.0], dtype=torch.float64), 1, torch.tensor([0.0], dtype=torch.float64),
                        torch.tensor([0.0], dtype=torch.float64), s)
        assert out.item() == pytest.approx(1.0050378152592121, abs=1e-12)

    def test_noise_free_part_is_posterior_mean(self, sched):
        g = torch.Generator().manual_seed(3)
        xt, eps = torch.randn(6, generator=g, dtype=torch.float64), torch.randn(6, generator=g, dtype=torch.float64)
        t = 417
        a, b, ab = sched.alphas[t].item(), sched.betas[t].item(), sched.alpha_bars[t].item()
        direct = (xt - b / math.sqrt(1 - ab) * eps) / math.sqrt(a)
        torch.testing.assert_close(ddpm_step(xt, t, eps, torch.zeros(6, dtype=torch.float64), sched), direct)
        torch.testing.assert_close(posterior_mean(xt, t, eps, sched), direct)

    def test_full_loop_with_zero_prediction(self):
        """Reference loop in plain Python floats: x <- x / sqrt(alpha_t) + sqrt(beta_t) z_t."""
        s = make_noise_schedule("linear", 50, 1e-3, 0.2)
        g = torch.Generator().manual_seed(11)
        x = torch.randn(8, generator=g, dtype=torch.float64)
        zs = [torch.randn(8, generator=g, dtype=torch.float64) for _ in range(50)]

        ref = x.tolist()
        betas = np.linspace(1e-3, 0.2, 50)
        for t in range(49, -1, -1):
            sigma = math.sqrt(betas[t]) if t > 0 else 0.0
            ref = [v / math.sqrt(1 - betas[t]) + sigma * zt for v, zt in zip(ref, zs[t].tolist())]

        for t in range(49, -1, -1):
            x = ddpm_step(x, t, torch.zeros_like(x), zs[t], s)
        np.testing.assert_allclose(x.numpy(), ref, rtol=1e-12)

    def test_ddim_final_jump_returns_x0_prediction(self, sched):
        xt, eps = torch.randn(4, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
        torch.testing.assert_close(ddim_step(xt, 20, -1, eps, sched), predict_x0(xt, 20, eps, sched))

    def test_ddim_exact_on_true_noise(self, sched):
        x0, eps = torch.randn(7, dtype=torch.float64), torch.randn(7, dtype=torch.float64)
        xt = forward_diffuse(x0, 800, eps, sched)
        torch.testing.assert_close(ddim_step(xt, 800, 300, eps, sched), forward_diffuse(x0, 300, eps, sched))

    @pytest.mark.parametrize("steps", [1, 2, 50, 999, 1000])
    def test_strided_timesteps(self, steps):
        ts = strided_timesteps(1000, steps)
        assert len(ts) == steps
        assert ts[0] == 999
        assert ts == sorted(ts, reverse=True)
        if steps > 1:
            assert ts[-1] == 0

    def test_strided_bounds(self):
        with pytest.raises(ConfigError):
            strided_timesteps(1000, 0)
        with pytest.raises(ConfigError):
            strided_timesteps(1000, 1001)


class TestLoss:
    def test_identity(self):
        e = torch.randn(3, 4)
        assert diffusion_loss(e, e).item() == 0.0

    def test_examples(self):
        assert diffusion_loss(torch.tensor([1.0, 1.0]), torch.tensor([0.0, 0.0])).item() == 1.0
        assert diffusion_loss(torch.tensor([3.0]), torch.tensor([1.0])).item() == 4.0

    def test_shape(self):
        with pytest.raises(ShapeError):
            diffusion_loss(torch.zeros(2), torch.zeros(3))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.integers(0, 1000))
    def test_properties(self, values, seed):
        a = torch.tensor(values, dtype=torch.float64)
        b = a + torch.randn(len(values), generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        assert diffusion_loss(a, b).item() >= 0
        assert diffusion_loss(a, b).item() == diffusion_loss(b, a).item()
        assert diffusion_loss(a, a).item() == 0
        assert diffusion_loss(a, b).item() > 0
