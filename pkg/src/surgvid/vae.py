"""3D convolutional VAE: 8x spatial and 4x temporal compression.

Videos are channels-last ``[B, T, H, W, 3]`` (or unbatched ``[T, H, W, 3]``)
in ``[-1, 1]`` with ``T = 1 + 4k``. The first frame is encoded on its own
and the remaining frames in groups of four, giving ``T' = 1 + k`` latent
frames. Temporal convolutions are causal (front padding by frame
replication), so latent frame ``i`` only sees input frames up to ``4i``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ShapeError

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0
SPATIAL_FACTOR = 8
TEMPORAL_FACTOR = 4


@dataclass(frozen=True)
class VaeConfig:
    c_lat: int = 8
    width: int = 16  # channels at full resolution; doubled at each downsample, capped at 4x
    kl_weight: float = 1e-6


def latent_shape(frames: int, h: int, w: int) -> tuple[int, int, int]:
    if frames < 1 or (frames - 1) % TEMPORAL_FACTOR:
        raise ShapeError(f"frame count must be 1 + 4k, got {frames}")
    if h % SPATIAL_FACTOR or w % SPATIAL_FACTOR or h <= 0 or w <= 0:
        raise ShapeError(f"height and width must be multiples of 8, got {h}x{w}")
    return 1 + (frames - 1) // TEMPORAL_FACTOR, h // SPATIAL_FACTOR, w // SPATIAL_FACTOR


def video_shape(t_lat: int, h_lat: int, w_lat: int) -> tuple[int, int, int]:
    if min(t_lat, h_lat, w_lat) < 1:
        raise ShapeError(f"latent dims must be positive, got {(t_lat, h_lat, w_lat)}")
    return 1 + (t_lat - 1) * TEMPORAL_FACTOR, h_lat * SPATIAL_FACTOR, w_lat * SPATIAL_FACTOR


@dataclass
class LatentDistribution:
    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ShapeError("mean and log_variance shapes differ")
        self.log_variance = self.log_variance.clamp(LOGVAR_MIN, LOGVAR_MAX)


def sample_latent(dist: LatentDistribution, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != dist.mean.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(dist.mean.shape)}")
    return dist.mean + torch.exp(0.5 * dist.log_variance) * noise


def kl_standard_normal(dist: LatentDistribution) -> torch.Tensor:
    """Mean over elements of KL(N(mu, sigma^2) || N(0, 1))."""
    return 0.5 * (dist.mean**2 + dist.log_variance.exp() - dist.log_variance - 1.0).mean()


def vae_loss(video: torch.Tensor, recon: torch.Tensor, dist: LatentDistribution, kl_weight: float) -> torch.Tensor:
    if video.shape != recon.shape:
        raise ShapeError(f"video {tuple(video.shape)} vs recon {tuple(recon.shape)}")
    rec = ((recon - video) ** 2).mean()
    if kl_weight == 0:
        return rec
    return rec + kl_weight * kl_standard_normal(dist)


class CausalConv3d(nn.Module):
    """Conv3d that pads time only at the front (replicating the first frame)."""

    def __init__(self, cin, cout, kernel=(3, 3, 3), stride=(1, 1, 1), spatial_pad=1):
        super().__init__()
        self.t_pad = kernel[0] - 1
        self.conv = nn.Conv3d(cin, cout, kernel, stride=stride, padding=(0, spatial_pad, spatial_pad))

    def forward(self, x):
        if self.t_pad:
            x = torch.cat([x[:, :, :1].expand(-1, -1, self.t_pad, -1, -1), x], dim=2)
        return self.conv(x)


class FrameNorm(nn.Module):
    """GroupNorm followed by SiLU, with statistics taken per frame so time stays causal."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, channels // 2), channels)

    def forward(self, x):
        b, c, t, h, w = x.shape
        y = self.norm(x.transpose(1, 2).reshape(b * t, c, h, w))
        return F.silu(y.reshape(b, t, c, h, w).transpose(1, 2))


class Encoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.width
        self.stem = CausalConv3d(3, w)
        self.down = nn.ModuleList([
            CausalConv3d(w, 2 * w, (3, 4, 4), (1, 2, 2)),
            CausalConv3d(2 * w, 4 * w, (3, 4, 4), (1, 2, 2)),
            CausalConv3d(4 * w, 4 * w, (3, 4, 4), (1, 2, 2)),
        ])
        # first frame alone, then groups of four: front-pad 3 replicas, stride-4 kernel
        self.time_down = CausalConv3d(4 * w, 4 * w, (4, 1, 1), (4, 1, 1), spatial_pad=0)
        self.mid = CausalConv3d(4 * w, 4 * w)
        self.out = nn.Conv3d(4 * w, 2 * cfg.c_lat, 1)
        self.norms = nn.ModuleList([FrameNorm(c) for c in (w, 2 * w, 4 * w, 4 * w, 4 * w)])

    def forward(self, x):
        h = self.norms[0](self.stem(x))
        for layer, norm in zip(self.down, self.norms[1:4]):
            h = norm(layer(h))
        h = self.norms[4](self.time_down(h))
        h = h + F.silu(self.mid(h))
        return self.out(h)


class Decoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        w = cfg.width
        self.inp = nn.Conv3d(cfg.c_lat, 4 * w, 1)
        self.mid = CausalConv3d(4 * w, 4 * w)
        self.time_up = nn.ConvTranspose3d(4 * w, 4 * w, (4, 1, 1), stride=(4, 1, 1))
        self.up = nn.ModuleList([
            nn.ConvTranspose3d(4 * w, 4 * w, (3, 4, 4), stride=(1, 2, 2), padding=(1, 1, 1)),
            nn.ConvTranspose3d(4 * w, 2 * w, (3, 4, 4), stride=(1, 2, 2), padding=(1, 1, 1)),
            nn.ConvTranspose3d(2 * w, w, (3, 4, 4), stride=(1, 2, 2), padding=(1, 1, 1)),
        ])
        self.out = CausalConv3d(w, 3)
        self.norms = nn.ModuleList([FrameNorm(c) for c in (4 * w, 4 * w, 4 * w, 2 * w, w)])

    def forward(self, z):
        h = self.norms[0](self.inp(z))
        h = h + F.silu(self.mid(h))
        h = self.norms[1](self.time_up(h)[:, :, TEMPORAL_FACTOR - 1:])  # 4T' frames -> 1 + 4(T'-1)
        for layer, norm in zip(self.up, self.norms[2:]):
            h = norm(layer(h))
        return self.out(h)


def _batched(x: torch.Tensor, ndim: int = 5):
    if x.ndim == ndim - 1:
        return x.unsqueeze(0), True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}D or {ndim}D tensor, got shape {tuple(x.shape)}")
    return x, False


class VideoVAE(nn.Module):
    """Encoder/decoder pair plus per-channel latent standardization stats."""

    def __init__(self, cfg: VaeConfig = VaeConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.register_buffer("latent_mean", torch.zeros(cfg.c_lat))
        self.register_buffer("latent_std", torch.ones(cfg.c_lat))

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    def encode(self, video: torch.Tensor) -> LatentDistribution:
        x, single = _batched(video)
        _, t, h, w, c = x.shape
        if c != 3:
            raise ShapeError(f"expected 3 channels, got {c}")
        latent_shape(t, h, w)
        moments = self.encoder(x.permute(0, 4, 1, 2, 3))
        moments = moments.permute(0, 2, 3, 4, 1)  # channels-last
        mean, logvar = moments.chunk(2, dim=-1)
        if single:
            mean, logvar = mean[0], logvar[0]
        return LatentDistribution(mean.contiguous(), logvar.contiguous())

    def decode_raw(self, latent: torch.Tensor) -> torch.Tensor:
        z, single = _batched(latent)
        if z.shape[-1] != self.cfg.c_lat:
            raise ShapeError(f"expected {self.cfg.c_lat} latent channels, got {z.shape[-1]}")
        out = self.decoder(z.permute(0, 4, 1, 2, 3)).permute(0, 2, 3, 4, 1)
        return out[0] if single else out

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.device.type != "meta" and not bool(torch.isfinite(latent).all()):
            raise NumericError("non-finite latent passed to decode")
        return self.decode_raw(latent).clamp(-1.0, 1.0)

    def forward(self, video: torch.Tensor, noise: torch.Tensor | None = None):
        dist = self.encode(video)
        z = dist.mean if noise is None else sample_latent(dist, noise)
        return self.decode_raw(z), dist

    # diffusion runs on standardized latents
    def normalize(self, latent: torch.Tensor) -> torch.Tensor:
        return (latent - self.latent_mean.to(latent.dtype)) / self.latent_std.to(latent.dtype)

    def denormalize(self, latent: torch.Tensor) -> torch.Tensor:
        return latent * self.latent_std.to(latent.dtype) + self.latent_mean.to(latent.dtype)

    @torch.no_grad()
    def fit_latent_stats(self, latents: torch.Tensor) -> None:
        flat = latents.reshape(-1, self.cfg.c_lat).double()
        self.latent_mean.copy_(flat.mean(0).to(self.latent_mean.dtype))
        self.latent_std.copy_(flat.std(0).clamp_min(1e-6).to(self.latent_std.dtype))


def encode(video: torch.Tensor, params: VideoVAE) -> LatentDistribution:
    return params.encode(video)


def decode(latent: torch.Tensor, params: VideoVAE) -> torch.Tensor:
    return params.decode(latent)
