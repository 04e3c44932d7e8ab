"""Profiles: the large-scale ``full`` shapes and the desk-scale ``toy`` ones."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .data import SynthCorpusSpec
from .denoiser import DenoiserConfig
from .errors import ConfigError
from .vae import VaeConfig, latent_shape


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 2000
    micro_batch: int = 2
    accum: int = 2
    seed: int = 0
    profile: str = "toy"
    cond_dropout: float = 0.0  # classifier-free guidance training hook, off by default
    dtype: str = "float32"
    cache_latents: bool = True

    def __post_init__(self):
        for name in ("lr", "steps", "micro_batch", "accum"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.eps < 0 or self.weight_decay < 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ConfigError("eps and weight_decay must be >= 0 and betas in [0, 1)")
        if not 0 <= self.cond_dropout < 1:
            raise ConfigError("cond_dropout must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accum


@dataclass(frozen=True)
class EvalConfig:
    gen_per_phase: int = 100
    real_per_phase: int = 100  # real clips from the training split, for phase alignment
    classifier_per_phase: int = 100  # eval-split clips the classifier trains on
    reference_per_phase: int = 100  # eval-split clips FID/FVD compare against
    classifier_epochs: int = 15
    classifier_frames: int = 16
    fvd_frames: int = 16
    sample_steps: int = 50
    guidance: float = 1.0
    feature_dim: int = 32
    batch_size: int = 100
    seed: int = 1234


@dataclass(frozen=True)
class Profile:
    name: str
    frames: int
    height: int
    width: int
    stride: int
    vae: VaeConfig
    denoiser: DenoiserConfig
    vae_train: TrainConfig
    denoiser_train: TrainConfig
    corpus: SynthCorpusSpec
    train_per_phase: int
    eval_per_phase: int
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    schedule_T: int = 1000

    @property
    def latent_dims(self) -> tuple[int, int, int, int]:
        return (*latent_shape(self.frames, self.height, self.width), self.vae.c_lat)

    def replace(self, **overrides) -> "Profile":
        """Apply nested overrides, e.g. ``{"denoiser_train": {"steps": 10}}``."""
        changes = {}
        for key, value in overrides.items():
            current = getattr(self, key, None)
            if current is None and key not in {f.name for f in dataclasses.fields(self)}:
                raise ConfigError(f"unknown profile field {key!r}")
            if dataclasses.is_dataclass(current) and isinstance(value, dict):
                try:
                    changes[key] = dataclasses.replace(current, **value)
                except TypeError as exc:
                    raise ConfigError(f"bad override for {key}: {exc}") from exc
            else:
                changes[key] = value
        return dataclasses.replace(self, **changes)


def _toy() -> Profile:
    return Profile(
        name="toy",
        frames=17,
        height=32,
        width=48,
        stride=2,
        vae=VaeConfig(c_lat=8, width=16),
        denoiser=DenoiserConfig(d_model=128, n_heads=4, n_blocks=6, p=2, d_text=64, l_text=8, c_lat=8, max_grid=(5, 2, 3)),
        vae_train=TrainConfig(lr=1e-3, weight_decay=0.0, steps=1000, micro_batch=2, accum=2, seed=0),
        # guidance is off in the library defaults; the toy profile turns it on to get phase-faithful samples
        denoiser_train=TrainConfig(lr=1e-3, steps=2000, micro_batch=2, accum=2, seed=0, cond_dropout=0.1),
        corpus=SynthCorpusSpec(),
        train_per_phase=100,
        eval_per_phase=200,
        evaluation=EvalConfig(guidance=3.0),
    )


def _full() -> Profile:
    return Profile(
        name="full",
        frames=49,
        height=480,
        width=720,
        stride=2,
        vae=VaeConfig(c_lat=16, width=64),
        denoiser=DenoiserConfig(
            d_model=1024, n_heads=16, n_blocks=24, p=2, d_text=64, l_text=8, c_lat=16, max_grid=(13, 30, 45)
        ),
        vae_train=TrainConfig(lr=1e-4, weight_decay=0.0, steps=50_000, micro_batch=1, accum=4, profile="full", cache_latents=False),
        denoiser_train=TrainConfig(steps=50_000, micro_batch=1, accum=4, profile="full", cache_latents=False),
        corpus=SynthCorpusSpec(n_train_videos=40, n_eval_videos=40, height=480, width=720, min_segment=97, max_segment=401),
        train_per_phase=50_000,
        eval_per_phase=1_012,
        evaluation=EvalConfig(
            gen_per_phase=512, real_per_phase=100, classifier_per_phase=500, reference_per_phase=512,
            feature_dim=256, batch_size=4,
        ),
    )


PROFILES = {"toy": _toy, "full": _full}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
