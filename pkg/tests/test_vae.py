import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import sampled_gradient_check
from surgvid.errors import NumericError, ShapeError
from surgvid.vae import (
    LatentDistribution,
    VaeConfig,
    VideoVAE,
    kl_standard_normal,
    latent_shape,
    sample_latent,
    vae_loss,
    video_shape,
)


@pytest.fixture(scope="module")
def vae():
    torch.manual_seed(0)
    return VideoVAE(VaeConfig()).eval()


@pytest.mark.parametrize(
    "video, latent",
    [((49, 480, 720), (13, 60, 90)), ((17, 32, 48), (5, 4, 6)), ((1, 8, 8), (1, 1, 1))],
)
def test_compression_contract(video, latent):
    assert latent_shape(*video) == latent
    assert video_shape(*latent) == video
    with torch.device("meta"):
        model = VideoVAE(VaeConfig(c_lat=16, width=64))
        dist = model.encode(torch.empty(1, *video, 3))
        assert tuple(dist.mean.shape) == (1, *latent, 16)
        assert tuple(model.decode(dist.mean).shape) == (1, *video, 3)


SMALL_VAE = VideoVAE(VaeConfig(width=4))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 3), st.integers(1, 3), st.integers(1, 3))
def test_shape_round_trip(k, hb, wb):
    t, h, w = 1 + 4 * k, 8 * hb, 8 * wb
    video = torch.rand(t, h, w, 3) * 2 - 1
    dist = SMALL_VAE.encode(video)
    assert tuple(dist.mean.shape) == (1 + k, hb, wb, 8)
    out = SMALL_VAE.decode(sample_latent(dist, torch.zeros_like(dist.mean)))
    assert out.shape == video.shape


@pytest.mark.parametrize("shape", [(16, 32, 48, 3), (17, 30, 48, 3), (17, 32, 44, 3), (17, 32, 48, 4)])
def test_illegal_shapes(vae, shape):
    with pytest.raises(ShapeError):
        vae.encode(torch.zeros(shape))


def test_encode_is_deterministic(vae):
    x = torch.rand(2, 17, 32, 48, 3) * 2 - 1
    a, b = vae.encode(x), vae.encode(x)
    assert torch.equal(a.mean, b.mean) and torch.equal(a.log_variance, b.log_variance)


def test_latent_frames_are_causal(vae):
    x = torch.rand(1, 17, 32, 48, 3) * 2 - 1
    y = x.clone()
    y[:, 9:] = 0
    torch.testing.assert_close(vae.encode(x).mean[:, :3], vae.encode(y).mean[:, :3], rtol=0, atol=0)


def test_decode_clamps_and_rejects_nan(vae):
    out = vae.decode(torch.randn(5, 4, 6, 8) * 100)
    assert out.min() >= -1 and out.max() <= 1
    bad = torch.zeros(5, 4, 6, 8)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError):
        vae.decode(bad)


def test_logvar_clamped():
    d = LatentDistribution(torch.zeros(3), torch.tensor([-100.0, 0.0, 100.0]))
    assert d.log_variance.tolist() == [-30.0, 0.0, 20.0]


class TestSampleLatent:
    def test_zero_noise_gives_mean(self):
        d = LatentDistribution(torch.randn(4), torch.randn(4))
        assert torch.equal(sample_latent(d, torch.zeros(4)), d.mean)

    def test_unit_variance(self):
        d = LatentDistribution(torch.randn(4), torch.zeros(4))
        n = torch.randn(4)
        assert torch.equal(sample_latent(d, n), d.mean + n)

    def test_scale_example(self):
        d = LatentDistribution(torch.zeros(1, dtype=torch.float64), torch.tensor([math.log(4)], dtype=torch.float64))
        assert sample_latent(d, torch.ones(1, dtype=torch.float64)).item() == pytest.approx(2.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sample_latent(LatentDistribution(torch.zeros(4), torch.zeros(4)), torch.zeros(5))


class TestLoss:
    def test_perfect_standard_normal(self):
        v = torch.randn(2, 3)
        assert vae_loss(v, v, LatentDistribution(torch.zeros(5), torch.zeros(5)), 1.0).item() == 0.0

    def test_kl_example(self):
        v = torch.zeros(3)
        d = LatentDistribution(torch.ones(1), torch.zeros(1))
        assert vae_loss(v, v, d, 1.0).item() == pytest.approx(0.5)

    def test_reconstruction_example(self):
        v = torch.zeros(10, dtype=torch.float64)
        d = LatentDistribution(torch.zeros(1), torch.zeros(1))
        assert vae_loss(v, v + 0.1, d, 1.0).item() == pytest.approx(0.01, abs=1e-15)

    def test_zero_weight_is_plain_mse(self):
        v, r = torch.randn(4, 5), torch.randn(4, 5)
        d = LatentDistribution(torch.randn(3) * 5, torch.randn(3))
        assert vae_loss(v, r, d, 0.0).item() == ((v - r) ** 2).mean().item()

    def test_kl_closed_form(self):
        mu, lv = torch.tensor([0.5, -2.0]), torch.tensor([0.3, -1.0])
        ref = sum(0.5 * (m**2 + math.exp(l) - l - 1) for m, l in zip(mu.tolist(), lv.tolist())) / 2
        assert kl_standard_normal(LatentDistribution(mu, lv)).item() == pytest.approx(ref, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            vae_loss(torch.zeros(3), torch.zeros(4), LatentDistribution(torch.zeros(1), torch.zeros(1)), 0.0)


def test_loss_gradient_check():
    torch.manual_seed(1)
    model = VideoVAE(VaeConfig(c_lat=4, width=4)).double()
    g = torch.Generator().manual_seed(2)
    video = torch.rand(1, 5, 16, 16, 3, generator=g, dtype=torch.float64) * 2 - 1
    noise = torch.randn(1, 2, 2, 2, 4, generator=g, dtype=torch.float64)

    def loss():
        recon, dist = model(video, noise)
        return vae_loss(video, recon, dist, kl_weight=1e-2)

    worst, checked = sampled_gradient_check(model, loss, n_params=150)
    assert checked >= 100
    assert worst < 1e-3
