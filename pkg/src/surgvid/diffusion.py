"""DDPM noise-schedule algebra, forward noising and reverse steps.

Forward process (closed form for any timestep t):
    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps,    eps ~ N(0, I)

with beta_t the per-step variance, alpha_t = 1 - beta_t and
abar_t = prod_{s <= t} alpha_s. Timesteps are 0-based.

Everything here is a pure function of its inputs. Schedules are kept in
float64 and cast to the operand dtype at the point of use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError

DEFAULT_T = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def coef(self, values: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
        """Gather ``values[t]`` and shape it to broadcast against ``like``.

        ``t`` is either a Python int or a 1-D integer tensor holding one
        timestep per leading-axis entry of ``like``.
        """
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            if t.shape[0] != like.shape[0]:
                raise ShapeError(f"{t.shape[0]} timesteps for batch of {like.shape[0]}")
            if bool(((t < 0) | (t >= self.T)).any()):
                raise ConfigError(f"timestep outside [0, {self.T})")
            out = values[t.long()].to(like.dtype)
            return out.view(-1, *([1] * (like.ndim - 1)))
        t = int(t)
        if not 0 <= t < self.T:
            raise ConfigError(f"timestep {t} outside [0, {self.T})")
        return values[t].to(like.dtype)


@dataclass
class DiffusionState:
    latent: torch.Tensor
    t: int

    def __post_init__(self):
        if not bool(torch.isfinite(self.latent).all()):
            raise NumericError("non-finite latent in diffusion state")


def make_noise_schedule(
    kind: str = "linear",
    T: int = DEFAULT_T,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = torch.linspace(beta_min, beta_max, int(T), dtype=torch.float64)
    if T > 1:
        betas[-1] = beta_max  # linspace endpoint is exact, but make it explicit
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(kind, int(T), betas, alphas, alpha_bars)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(x0, eps, "forward_diffuse")
    abar = sched.coef(sched.alpha_bars, t, x0)
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * eps


def predict_x0(xt: torch.Tensor, t, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(xt, eps_hat, "predict_x0")
    abar = sched.coef(sched.alpha_bars, t, xt)
    if bool((abar <= 0).any()):
        raise NumericError("singular schedule: alpha_bar is zero")
    return (xt - (1.0 - abar).sqrt() * eps_hat) / abar.sqrt()


def posterior_mean(xt: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noise-free part of the ancestral update."""
    _check_same_shape(xt, eps_hat, "posterior_mean")
    alpha = sched.coef(sched.alphas, t, xt)
    beta = sched.coef(sched.betas, t, xt)
    abar = sched.coef(sched.alpha_bars, t, xt)
    return (xt - beta / (1.0 - abar).sqrt() * eps_hat) / alpha.sqrt()


def ddpm_step(
    xt: torch.Tensor, t: int, eps_hat: torch.Tensor, z: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """One ancestral step x_t -> x_{t-1} with sigma_t = sqrt(beta_t); the t=0 step adds no noise."""
    _check_same_shape(xt, z, "ddpm_step")
    mean = posterior_mean(xt, t, eps_hat, sched)
    if int(t) == 0:
        return mean
    sigma = sched.coef(sched.betas, t, xt).sqrt()
    return mean + sigma * z


def ddim_step(
    xt: torch.Tensor, t: int, t_prev: int, eps_hat: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Deterministic jump from t to t_prev (t_prev = -1 means clean data)."""
    x0 = predict_x0(xt, t, eps_hat, sched)
    if t_prev < 0:
        return x0
    abar_prev = sched.coef(sched.alpha_bars, t_prev, xt)
    return abar_prev.sqrt() * x0 + (1.0 - abar_prev).sqrt() * eps_hat


def strided_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending subset of ``range(T)`` that always starts at T-1 and ends at 0."""
    if not 1 <= steps <= T:
        raise ConfigError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return [T - 1]
    ts = np.round(np.linspace(0, T - 1, steps)).astype(int)
    return sorted(set(ts.tolist()), reverse=True)


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    _check_same_shape(eps_hat, eps, "diffusion_loss")
    return ((eps_hat - eps) ** 2).mean()


def sample_timesteps(batch: int, T: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(0, T, (batch,), generator=generator)
