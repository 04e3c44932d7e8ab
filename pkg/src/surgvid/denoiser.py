"""Text-conditional spatio-temporal transformer predicting diffusion noise.

Latents are cut into p x p spatial patches per latent frame. Projected text
tokens are prepended to the video tokens and every block runs one attention
over the whole joint sequence (no spatial/temporal factorization). The
timestep, plus a mean-pooled summary of the text tokens, enters through
per-block adaptive LayerNorm shift/scale.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 128
    n_heads: int = 4
    n_blocks: int = 6
    p: int = 2
    d_text: int = 64
    l_text: int = 8
    c_lat: int = 8
    max_grid: tuple[int, int, int] = (16, 32, 48)  # (T', H'/p, W'/p) upper bounds
    mlp_ratio: int = 4
    T: int = 1000

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the timestep embedding")
        object.__setattr__(self, "max_grid", tuple(int(g) for g in self.max_grid))


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # [..., N, D]
    grid: tuple[int, int, int]  # (T', H'/p, W'/p)
    p: int

    def __post_init__(self):
        n = self.grid[0] * self.grid[1] * self.grid[2]
        if self.tokens.shape[-2] != n:
            raise ShapeError(f"{self.tokens.shape[-2]} tokens for grid {self.grid} (expected {n})")


def patchify(latent: torch.Tensor, p: int, proj: nn.Module | None = None) -> TokenGrid:
    """Cut ``[..., T', H', W', C]`` into row-major (t, h, w) tokens of ``p*p*C`` values each."""
    *lead, t, h, w, c = latent.shape
    if h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide latent {h}x{w}")
    x = latent.reshape(*lead, t, h // p, p, w // p, p, c)
    n = len(lead)
    x = x.permute(*range(n), n, n + 1, n + 3, n + 2, n + 4, n + 5)
    x = x.reshape(*lead, t * (h // p) * (w // p), p * p * c)
    if proj is not None:
        x = proj(x)
    return TokenGrid(x, (t, h // p, w // p), p)


def unpatchify(tokens: TokenGrid, p: int, proj: nn.Module | None = None) -> torch.Tensor:
    if tokens.p != p:
        raise ShapeError(f"token grid was built with p={tokens.p}, asked to invert with p={p}")
    x = tokens.tokens if proj is None else proj(tokens.tokens)
    *lead, _, dim = x.shape
    if dim % (p * p):
        raise ShapeError(f"token width {dim} is not a multiple of p*p={p * p}")
    c = dim // (p * p)
    t, hp, wp = tokens.grid
    n = len(lead)
    x = x.reshape(*lead, t, hp, wp, p, p, c)
    x = x.permute(*range(n), n, n + 1, n + 3, n + 2, n + 4, n + 5)
    return x.reshape(*lead, t, hp * p, wp * p, c)


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding: ``[sin(t w_k) ..., cos(t w_k) ...]`` with ``w_k = 10000^(-2k/dim)``."""
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64)
    half = dim // 2
    freqs = torch.pow(10000.0, -2.0 * torch.arange(half, dtype=torch.float64) / dim)
    args = t[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.d_model
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = Attention(d, cfg.n_heads)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(d, cfg.mlp_ratio * d), nn.GELU(), nn.Linear(cfg.mlp_ratio * d, d))
        self.ada = nn.Linear(d, 4 * d)

    def forward(self, x, c):
        shift1, scale1, shift2, scale2 = self.ada(F.silu(c)).unsqueeze(1).chunk(4, dim=-1)
        x = x + self.attn(self.norm1(x) * (1 + scale1) + shift1)
        return x + self.mlp(self.norm2(x) * (1 + scale2) + shift2)


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        d, p = cfg.d_model, cfg.p
        self.patch_in = nn.Linear(p * p * cfg.c_lat, d)
        self.pos_t = nn.Parameter(torch.randn(cfg.max_grid[0], d) * 0.02)
        self.pos_h = nn.Parameter(torch.randn(cfg.max_grid[1], d) * 0.02)
        self.pos_w = nn.Parameter(torch.randn(cfg.max_grid[2], d) * 0.02)
        self.text_in = nn.Linear(cfg.d_text, d)
        self.text_pos = nn.Parameter(torch.randn(cfg.l_text, d) * 0.02)
        self.text_pool = nn.Linear(cfg.d_text, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_blocks))
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False)
        self.ada_out = nn.Linear(d, 2 * d)
        self.patch_out = nn.Linear(d, p * p * cfg.c_lat)

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    def positional(self, grid) -> torch.Tensor:
        t, h, w = grid
        mt, mh, mw = self.cfg.max_grid
        if t > mt or h > mh or w > mw:
            raise ShapeError(f"token grid {grid} exceeds configured maximum {self.cfg.max_grid}")
        pos = self.pos_t[:t, None, None] + self.pos_h[None, :h, None] + self.pos_w[None, None, :w]
        return pos.reshape(t * h * w, -1)

    def condition(self, t, batch: int, dtype) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(batch)
        if bool(((t < 0) | (t >= self.cfg.T)).any()):
            raise ConfigError(f"timestep outside [0, {self.cfg.T})")
        return self.time_mlp(timestep_embedding(t, self.cfg.d_model).to(dtype))

    def embed_text(self, text_emb: torch.Tensor, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns the projected text tokens and the pooled vector added to the adaLN input."""
        if text_emb.ndim == 2:
            text_emb = text_emb.unsqueeze(0).expand(batch, -1, -1)
        if text_emb.shape[-1] != self.cfg.d_text or text_emb.shape[-2] != self.cfg.l_text:
            raise ShapeError(
                f"text embedding {tuple(text_emb.shape[-2:])} != ({self.cfg.l_text}, {self.cfg.d_text})"
            )
        if text_emb.shape[0] != batch:
            raise ShapeError(f"text batch {text_emb.shape[0]} != latent batch {batch}")
        return self.text_in(text_emb) + self.text_pos, self.text_pool(text_emb.mean(1))

    def transformer(self, video_tokens, text_tokens, c) -> torch.Tensor:
        """Joint attention over ``[text; video]``; returns the video rows only."""
        n_text = text_tokens.shape[1]
        x = torch.cat([text_tokens, video_tokens], dim=1)
        for block in self.blocks:
            x = block(x, c)
        x = x[:, n_text:]
        shift, scale = self.ada_out(F.silu(c)).unsqueeze(1).chunk(2, dim=-1)
        return self.norm_out(x) * (1 + scale) + shift

    def forward(self, latent_t: torch.Tensor, t, text_emb: torch.Tensor) -> torch.Tensor:
        single = latent_t.ndim == 4
        x = latent_t.unsqueeze(0) if single else latent_t
        if x.ndim != 5 or x.shape[-1] != self.cfg.c_lat:
            raise ShapeError(f"expected latent [B, T', H', W', {self.cfg.c_lat}], got {tuple(latent_t.shape)}")
        if single and text_emb.ndim == 3:
            text_emb = text_emb[0] if text_emb.shape[0] == 1 else text_emb
        b = x.shape[0]
        grid = patchify(x, self.cfg.p, self.patch_in)
        video = grid.tokens + self.positional(grid.grid)
        text, pooled = self.embed_text(text_emb.to(x.dtype), b)
        c = self.condition(t, b, x.dtype) + pooled
        out = self.transformer(video, text, c)
        eps = unpatchify(TokenGrid(out, grid.grid, self.cfg.p), self.cfg.p, self.patch_out)
        if not bool(torch.isfinite(eps).all()):
            raise NumericError("non-finite activations in denoiser output")
        return eps[0] if single else eps


def denoise(latent_t: torch.Tensor, t, text_emb: torch.Tensor, params: Denoiser) -> torch.Tensor:
    return params(latent_t, t, text_emb)
