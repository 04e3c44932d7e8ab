"""Parameter stores, the AdamW update, training loops, checkpoints and sampling."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import svt
from .config import TrainConfig
from .data import DatasetManifest, load_clip
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (
    NoiseSchedule,
    ddim_step,
    ddpm_step,
    diffusion_loss,
    forward_diffuse,
    make_noise_schedule,
    strided_timesteps,
)
from .errors import CheckpointError, ComponentTagError, ConfigError, NumericError, ShapeError
from .text import TokenizerTable, encode_text, parse_phase
from .vae import LatentDistribution, VaeConfig, VideoVAE, latent_shape, sample_latent, vae_loss

log = logging.getLogger(__name__)

COMPONENTS = ("vae", "denoiser", "text")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ParameterStore:
    """Named tensors of one component plus its optimizer state.

    For modules, ``params`` and ``buffers`` alias the module's live tensors,
    so an optimizer step on the store updates the module in place.
    """

    component: str
    params: dict[str, torch.Tensor]
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    frozen: bool = False

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ConfigError(f"unknown component tag {self.component!r}")

    @classmethod
    def from_module(cls, module: torch.nn.Module, component: str, config: dict | None = None) -> "ParameterStore":
        return cls(
            component,
            dict(module.named_parameters()),
            dict(module.named_buffers()),
            json.loads(json.dumps(config if config is not None else module.config_dict())),
        )

    def freeze(self) -> "ParameterStore":
        self.frozen = True
        self.exp_avg.clear()
        self.exp_avg_sq.clear()
        for p in self.params.values():
            p.requires_grad_(False)
        return self

    def tensors(self) -> dict[str, torch.Tensor]:
        return {**self.params, **self.buffers}

    def digest(self) -> str:
        h = hashlib.sha256(self.component.encode())
        for name, t in sorted(self.tensors().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def text_store(table: TokenizerTable) -> ParameterStore:
    return ParameterStore(
        "text",
        {"table": torch.from_numpy(np.array(table.table))},
        config={"vocab": list(table.vocab), "length": table.length},
    ).freeze()


def table_from_store(store: ParameterStore) -> TokenizerTable:
    _require(store, "text")
    return TokenizerTable(tuple(store.config["vocab"]), store.params["table"].numpy().astype(np.float32), int(store.config["length"]))


def vae_from_store(store: ParameterStore) -> VideoVAE:
    _require(store, "vae")
    model = VideoVAE(VaeConfig(**store.config))
    _load_into(model, store)
    return model


def denoiser_from_store(store: ParameterStore) -> Denoiser:
    _require(store, "denoiser")
    model = Denoiser(DenoiserConfig(**store.config))
    _load_into(model, store)
    return model


def _require(store: ParameterStore, component: str) -> None:
    if store.component != component:
        raise ComponentTagError(f"expected a {component} checkpoint, got {store.component!r}")


def _load_into(model: torch.nn.Module, store: ParameterStore) -> None:
    state = store.tensors()
    expected = dict(model.state_dict())
    if set(state) != set(expected):
        missing, extra = set(expected) - set(state), set(state) - set(expected)
        raise CheckpointError(f"parameter names differ: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, t in state.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"{name}: stored dims {tuple(t.shape)} != model dims {tuple(expected[name].shape)}")
    model.load_state_dict({k: v.to(expected[k].dtype) for k, v in state.items()})


# --- optimizer -------------------------------------------------------------------------

@torch.no_grad()
def optimizer_step(params: ParameterStore, grads: dict[str, torch.Tensor], cfg: TrainConfig) -> ParameterStore:
    """Decoupled-weight-decay Adam, in place on ``params``.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    if params.frozen:
        raise ConfigError(f"{params.component} parameters are frozen")
    if set(grads) != set(params.params):
        raise ConfigError(f"gradient names do not match trainable parameters of {params.component}")
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for parameter {name!r}")

    params.step += 1
    k = params.step
    bc1 = 1.0 - cfg.beta1**k
    bc2 = 1.0 - cfg.beta2**k
    for name, theta in params.params.items():
        g = grads[name].to(theta.dtype)
        m = params.exp_avg.get(name)
        if m is None:
            m = params.exp_avg[name] = torch.zeros_like(theta)
            params.exp_avg_sq[name] = torch.zeros_like(theta)
        v = params.exp_avg_sq[name]
        m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
        denom = (v / bc2).sqrt() + cfg.eps
        ratio = torch.where(denom > 0, (m / bc1) / torch.where(denom > 0, denom, 1.0), 0.0)
        theta.sub_(cfg.lr * (ratio + cfg.weight_decay * theta))
    return params


def _collect_grads(store: ParameterStore) -> dict[str, torch.Tensor]:
    return {
        name: (p.grad if p.grad is not None else torch.zeros_like(p))
        for name, p in store.params.items()
    }


def _zero_grads(store: ParameterStore) -> None:
    for p in store.params.values():
        p.grad = None


def seeded_module(factory: Callable[[], torch.nn.Module], seed: int, dtype: torch.dtype) -> torch.nn.Module:
    """Build ``factory()`` under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = factory()
    return module.to(dtype)


class TrainLog:
    """Line-delimited JSON training log: {step, loss, lr, wall_ms}."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w")
        self._t0 = time.perf_counter()

    def write(self, step: int, loss: float, lr: float, **extra) -> None:
        rec = {"step": step, "loss": loss, "lr": lr, "wall_ms": round((time.perf_counter() - self._t0) * 1000.0, 3)}
        rec.update(extra)
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


def _check_manifest(manifest: DatasetManifest) -> None:
    if not manifest.records:
        raise ConfigError("manifest has no records")


def _clip_batch(manifest, indices, dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack([load_clip(manifest, manifest.records[i]) for i in indices])).to(dtype)


# --- VAE training ---------------------------------------------------------------------

def train_vae(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    vae_cfg: VaeConfig = VaeConfig(),
    log_path=None,
    progress: Callable[[int, float], None] | None = None,
) -> ParameterStore:
    _check_manifest(manifest)
    dtype = DTYPES[cfg.dtype]
    latent_shape(manifest.length, *load_clip(manifest, manifest.records[0]).shape[1:3])

    model = seeded_module(lambda: VideoVAE(vae_cfg), cfg.seed, dtype)
    store = ParameterStore.from_module(model, "vae")
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    n = len(manifest.records)
    eff = cfg.effective_batch
    tlog = log_path if isinstance(log_path, TrainLog) else TrainLog(log_path)
    try:
        for step in range(1, cfg.steps + 1):
            idx = torch.randint(n, (eff,), generator=gen).tolist()
            total = 0.0
            for j in range(0, eff, cfg.micro_batch):
                video = _clip_batch(manifest, idx[j:j + cfg.micro_batch], dtype)
                dist = model.encode(video)
                noise = torch.randn(dist.mean.shape, generator=gen, dtype=dtype)
                recon = model.decode_raw(sample_latent(dist, noise))
                loss = vae_loss(video, recon, dist, vae_cfg.kl_weight) * (video.shape[0] / eff)
                loss.backward()
                total += loss.item()
            if not np.isfinite(total):
                raise NumericError(f"non-finite VAE loss at step {step}")
            optimizer_step(store, _collect_grads(store), cfg)
            _zero_grads(store)
            tlog.write(step, total, cfg.lr)
            if progress:
                progress(step, total)
    finally:
        tlog.close()

    with torch.no_grad():
        latents = encode_manifest(model, manifest, dtype=dtype).mean
    model.fit_latent_stats(latents)
    store.step = cfg.steps
    return store


@torch.no_grad()
def encode_manifest(vae: VideoVAE, manifest: DatasetManifest, batch: int = 16, dtype=torch.float32) -> LatentDistribution:
    means, logvars = [], []
    for i in range(0, len(manifest.records), batch):
        video = _clip_batch(manifest, range(i, min(i + batch, len(manifest.records))), dtype)
        dist = vae.encode(video.to(next(vae.parameters()).dtype))
        means.append(dist.mean.to(dtype))
        logvars.append(dist.log_variance.to(dtype))
    return LatentDistribution(torch.cat(means), torch.cat(logvars))


@torch.no_grad()
def reconstruction_mse(vae: VideoVAE, manifest: DatasetManifest, batch: int = 16) -> float:
    total, count = 0.0, 0
    for i in range(0, len(manifest.records), batch):
        video = _clip_batch(manifest, range(i, min(i + batch, len(manifest.records))), torch.float32)
        recon = vae.decode(vae.encode(video).mean)
        total += float(((recon - video) ** 2).sum())
        count += video.numel()
    return total / count


# --- denoiser training ----------------------------------------------------------------

def train_denoiser(
    cfg: TrainConfig,
    manifest: DatasetManifest,
    frozen_vae: ParameterStore,
    frozen_text: TokenizerTable,
    den_cfg: DenoiserConfig = DenoiserConfig(),
    sched: NoiseSchedule | None = None,
    log_path=None,
    progress: Callable[[int, float], None] | None = None,
    init: ParameterStore | None = None,
) -> ParameterStore:
    """Train the noise predictor with the VAE and text table frozen."""
    _check_manifest(manifest)
    dtype = DTYPES[cfg.dtype]
    sched = sched or make_noise_schedule(T=den_cfg.T)
    if sched.T != den_cfg.T:
        raise ConfigError(f"schedule has {sched.T} steps but the denoiser expects {den_cfg.T}")
    if frozen_text.d_text != den_cfg.d_text or frozen_text.length != den_cfg.l_text:
        raise ConfigError("text table dimensions do not match the denoiser config")
    vae = vae_from_store(frozen_vae).to(dtype).eval()
    vae.requires_grad_(False)
    h, w = load_clip(manifest, manifest.records[0]).shape[1:3]
    t_lat, h_lat, w_lat = latent_shape(manifest.length, h, w)
    if vae.cfg.c_lat != den_cfg.c_lat:
        raise ConfigError(f"VAE has {vae.cfg.c_lat} latent channels, denoiser expects {den_cfg.c_lat}")
    if h_lat % den_cfg.p or w_lat % den_cfg.p:
        raise ConfigError(f"patch size {den_cfg.p} does not divide latent grid {h_lat}x{w_lat}")
    mt, mh, mw = den_cfg.max_grid
    if t_lat > mt or h_lat // den_cfg.p > mh or w_lat // den_cfg.p > mw:
        raise ConfigError(f"latent grid exceeds denoiser max_grid {den_cfg.max_grid}")

    vae_digest, text_digest = frozen_vae.digest(), frozen_text.digest()

    if init is not None:
        model = denoiser_from_store(init).to(dtype)
    else:
        model = seeded_module(lambda: Denoiser(den_cfg), cfg.seed, dtype)
    model.train()
    store = ParameterStore.from_module(model, "denoiser")

    phases = [r.phase for r in manifest.records]
    prompt_emb = {p: encode_text(_prompt(p), frozen_text).to(dtype) for p in set(phases)}
    null_emb = frozen_text.null_embedding().to(dtype)
    cached = encode_manifest(vae, manifest, dtype=dtype) if cfg.cache_latents else None

    gen = torch.Generator().manual_seed(cfg.seed + 1)
    n, eff, lat_shape = len(manifest.records), cfg.effective_batch, (t_lat, h_lat, w_lat, den_cfg.c_lat)
    tlog = log_path if isinstance(log_path, TrainLog) else TrainLog(log_path)
    try:
        for step in range(1, cfg.steps + 1):
            # every random draw for the step happens up front, so the
            # micro_batch x accum factorization cannot change the samples
            idx = torch.randint(n, (eff,), generator=gen)
            t = torch.randint(sched.T, (eff,), generator=gen)
            eps = torch.randn((eff, *lat_shape), generator=gen, dtype=dtype)
            post_noise = torch.randn((eff, *lat_shape), generator=gen, dtype=dtype)
            drop = torch.rand(eff, generator=gen) < cfg.cond_dropout
            total = 0.0
            for j in range(0, eff, cfg.micro_batch):
                sl = slice(j, j + cfg.micro_batch)
                ids = idx[sl].tolist()
                with torch.no_grad():
                    if cached is not None:
                        dist = LatentDistribution(cached.mean[ids], cached.log_variance[ids])
                    else:
                        dist = vae.encode(_clip_batch(manifest, ids, dtype))
                    x0 = vae.normalize(sample_latent(dist, post_noise[sl]))
                text = torch.stack([null_emb if drop[j + k] else prompt_emb[phases[i]] for k, i in enumerate(ids)])
                xt = forward_diffuse(x0, t[sl], eps[sl], sched)
                loss = diffusion_loss(model(xt, t[sl], text), eps[sl]) * (len(ids) / eff)
                loss.backward()
                total += loss.item()
            optimizer_step(store, _collect_grads(store), cfg)
            _zero_grads(store)
            tlog.write(step, total, cfg.lr)
            if progress:
                progress(step, total)
    finally:
        tlog.close()

    if frozen_vae.digest() != vae_digest or frozen_text.digest() != text_digest:
        raise RuntimeError("frozen component changed during denoiser training")
    model.eval()
    return store


def _prompt(phase) -> str:
    from .text import format_prompt

    return format_prompt(phase)


# --- checkpoints ----------------------------------------------------------------------

def _tensor_entry(t: torch.Tensor, file: str) -> dict:
    return {"dtype": "float32", "dims": list(t.shape), "file": file}


def save_checkpoint(params: ParameterStore, path, provenance: dict | None = None) -> None:
    """Write a checkpoint directory atomically (tensors snapshot at call time).

    ``provenance`` is stored verbatim in the index, typically the resolved run config.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    index = {"component": params.component, "step": params.step, "frozen": params.frozen,
             "config": params.config, "provenance": provenance or {}, "tensors": {}, "buffers": {}, "exp_avg": {}, "exp_avg_sq": {}}
    groups = {"tensors": params.params, "buffers": params.buffers,
              "exp_avg": params.exp_avg, "exp_avg_sq": params.exp_avg_sq}
    for group, tensors in groups.items():
        for i, (name, t) in enumerate(sorted(tensors.items())):
            file = f"{group}-{i:04d}.svt"
            data = t.detach().cpu().to(torch.float32).contiguous().numpy()
            svt.write_tensor(tmp / file, data)
            index[group][name] = _tensor_entry(t, file)
    (tmp / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)


def load_checkpoint(path, component: str | None = None) -> ParameterStore:
    path = Path(path)
    index_file = path / "index.json"
    if not index_file.exists():
        raise CheckpointError(f"no checkpoint index at {index_file}")
    try:
        index = json.loads(index_file.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint index {index_file}: {exc}") from exc
    if component is not None and index.get("component") != component:
        raise ComponentTagError(f"{path} holds a {index.get('component')!r} checkpoint, expected {component!r}")

    def read_group(group):
        out = {}
        for name, entry in index.get(group, {}).items():
            f = path / entry["file"]
            if not f.exists():
                raise CheckpointError(f"tensor file {f} for {name!r} is missing")
            arr = svt.read_tensor(f)
            if list(arr.shape) != list(entry["dims"]):
                raise CheckpointError(f"{name!r}: file dims {list(arr.shape)} != index dims {entry['dims']}")
            out[name] = torch.from_numpy(arr)
        return out

    store = ParameterStore(
        index["component"], read_group("tensors"), read_group("buffers"), index.get("config", {}),
        int(index.get("step", 0)), read_group("exp_avg"), read_group("exp_avg_sq"),
    )
    if index.get("frozen"):
        store.frozen = True
    return store


def stores_equal(a: ParameterStore, b: ParameterStore) -> bool:
    if (a.component, a.step, a.config, a.frozen) != (b.component, b.step, b.config, b.frozen):
        return False
    for ga, gb in ((a.params, b.params), (a.buffers, b.buffers), (a.exp_avg, b.exp_avg), (a.exp_avg_sq, b.exp_avg_sq)):
        if set(ga) != set(gb):
            return False
        for k in ga:
            if ga[k].dtype != gb[k].dtype or not torch.equal(ga[k], gb[k]):
                return False
    return True


# --- sampling -------------------------------------------------------------------------

@dataclass
class Pipeline:
    vae: VideoVAE
    denoiser: Denoiser
    text: TokenizerTable
    frames: int
    height: int
    width: int

    @property
    def latent_dims(self) -> tuple[int, int, int, int]:
        return (*latent_shape(self.frames, self.height, self.width), self.vae.cfg.c_lat)


def load_pipeline(ckpt_dir, frames: int, height: int, width: int, untrained_seed: int | None = None) -> Pipeline:
    """Assemble the text -> video pipeline from ``ckpt_dir/{vae,denoiser,text}``.

    With ``untrained_seed`` the denoiser is freshly initialized (same config) instead
    of loaded, which is the baseline the trained model is compared against.
    """
    ckpt_dir = Path(ckpt_dir)
    vae = vae_from_store(load_checkpoint(ckpt_dir / "vae", "vae")).eval()
    den_store = load_checkpoint(ckpt_dir / "denoiser", "denoiser")
    if untrained_seed is None:
        den = denoiser_from_store(den_store)
    else:
        cfg = DenoiserConfig(**den_store.config)
        den = seeded_module(lambda: Denoiser(cfg), untrained_seed, torch.float32)
    table = table_from_store(load_checkpoint(ckpt_dir / "text", "text"))
    return Pipeline(vae, den.eval(), table, frames, height, width)


@torch.no_grad()
def sample_videos(
    pipeline: Pipeline,
    prompts: Sequence[str],
    seeds: Sequence[int],
    sched: NoiseSchedule,
    steps: int = 50,
    guidance: float = 1.0,
    batch_size: int = 100,
) -> torch.Tensor:
    """Generate one video per (prompt, seed); returns ``[N, T, H, W, 3]`` in ``[-1, 1]``."""
    if len(prompts) != len(seeds):
        raise ShapeError("need one seed per prompt")
    for p in prompts:
        parse_phase(p)
    if not 1 <= steps <= sched.T:
        raise ConfigError(f"steps must be in [1, {sched.T}]")
    out = []
    for i in range(0, len(prompts), batch_size):
        out.append(_sample_batch(pipeline, prompts[i:i + batch_size], seeds[i:i + batch_size], sched, steps, guidance))
    return torch.cat(out) if out else torch.zeros((0, pipeline.frames, pipeline.height, pipeline.width, 3))


def _sample_batch(pipeline, prompts, seeds, sched, steps, guidance):
    dims = pipeline.latent_dims
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    x = torch.stack([torch.randn(dims, generator=g) for g in gens])
    cond = torch.stack([encode_text(p, pipeline.text) for p in prompts])
    uncond = pipeline.text.null_embedding().expand_as(cond) if guidance != 1.0 else None

    def eps_hat(x, t):
        e = pipeline.denoiser(x, t, cond)
        if uncond is not None:
            e_u = pipeline.denoiser(x, t, uncond)
            e = e_u + guidance * (e - e_u)
        return e

    if steps == sched.T:
        for t in range(sched.T - 1, -1, -1):
            z = torch.stack([torch.randn(dims, generator=g) for g in gens]) if t > 0 else torch.zeros_like(x)
            x = ddpm_step(x, t, eps_hat(x, t), z, sched)
    else:
        ts = strided_timesteps(sched.T, steps)
        for t, t_prev in zip(ts, ts[1:] + [-1]):
            x = ddim_step(x, t, t_prev, eps_hat(x, t), sched)
    return pipeline.vae.decode(pipeline.vae.denormalize(x))


def sample_video(prompt: str, params_all: Pipeline, sched: NoiseSchedule, steps: int = 50,
                 seed: int = 0, guidance: float = 1.0) -> torch.Tensor:
    return sample_videos(params_all, [prompt], [seed], sched, steps, guidance)[0]
