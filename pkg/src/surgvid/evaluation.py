"""Fréchet metrics, phase-alignment classifier and the evaluation protocol.

FID compares Gaussian fits of per-frame embeddings of the middle frame of
every clip; FVD does the same with whole-clip embeddings of the first 16
frames. At desk scale both embeddings come from small networks trained on
the held-out split (a 2D frame CNN and the phase classifier's penultimate
layer) instead of Inception/I3D, so absolute values are not comparable with
published numbers. Lower is better for both.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest, load_clips
from .errors import DegenerateClassError, NumericError, ProtocolError, SampleSizeError, ShapeError
from .text import PHASES, SurgicalPhase

log = logging.getLogger(__name__)

N_CLASSES = len(PHASES)
CLIP_FRAMES = 16


class ConditioningWarning(UserWarning):
    pass


class FrechetScore(float):
    """A float that also carries any conditioning warnings raised while computing it."""

    def __new__(cls, value, warnings_=()):
        obj = super().__new__(cls, value)
        obj.warnings = tuple(warnings_)
        return obj


# --- Gaussian statistics and the Fréchet distance ---------------------------------------

@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def gaussian_stats(features) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be [n, d], got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise SampleSizeError(f"need at least 2 samples, got {n}")
    mu = x.mean(axis=0)
    centered = x - mu
    s = centered.T @ centered / (n - 1)
    return GaussianStats(mu, (s + s.T) / 2.0, n)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``, clamped at zero.

    tr((S_a S_b)^(1/2)) is evaluated as the sum of square roots of the
    eigenvalues of the symmetric S_a^(1/2) S_b S_a^(1/2), negatives clamped.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ShapeError(f"dimension mismatch: {a.mu.shape} vs {b.mu.shape}")
    for s in (a, b):
        if not (np.isfinite(s.mu).all() and np.isfinite(s.sigma).all()):
            raise NumericError("non-finite Gaussian statistics")
    diff = a.mu - b.mu
    root_a = _psd_sqrt(a.sigma)
    inner = root_a @ b.sigma @ root_a
    eig = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_cross = np.sqrt(np.clip(eig, 0.0, None)).sum()
    value = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_cross
    return float(max(value, 0.0))


def _frechet_from_features(real: np.ndarray, gen: np.ndarray) -> FrechetScore:
    issues = []
    d = real.shape[1]
    for side, feats in (("real", real), ("generated", gen)):
        if feats.shape[0] < 2:
            raise SampleSizeError(f"{side} side has {feats.shape[0]} samples; need at least 2")
        if feats.shape[0] < d + 1:
            msg = f"{side} side has {feats.shape[0]} samples for {d}-dim features; covariance is singular"
            warnings.warn(msg, ConditioningWarning, stacklevel=3)
            issues.append(msg)
    return FrechetScore(frechet_distance(gaussian_stats(real), gaussian_stats(gen)), issues)


def middle_frame_index(length: int) -> int:
    return length // 2


def _as_tensor(clips) -> torch.Tensor:
    return clips if isinstance(clips, torch.Tensor) else torch.as_tensor(np.asarray(clips))


def compute_fid(real_clips, gen_clips, extractor: Callable[[torch.Tensor], torch.Tensor]) -> FrechetScore:
    """FID over the middle frame (index ``L // 2``) of every clip."""
    real, gen = _as_tensor(real_clips), _as_tensor(gen_clips)
    if real.shape[1] != gen.shape[1]:
        raise ShapeError(f"clip lengths differ: {real.shape[1]} vs {gen.shape[1]}")
    mid = middle_frame_index(real.shape[1])
    return _frechet_from_features(_embed(extractor, real[:, mid]), _embed(extractor, gen[:, mid]))


def compute_fvd(real_clips, gen_clips, video_extractor: Callable[[torch.Tensor], torch.Tensor],
                frames: int = CLIP_FRAMES) -> FrechetScore:
    """FVD over the first ``frames`` frames of every clip."""
    real, gen = _as_tensor(real_clips), _as_tensor(gen_clips)
    for side, clips in (("real", real), ("generated", gen)):
        if clips.shape[1] < frames:
            raise ShapeError(f"{side} clips have {clips.shape[1]} frames; FVD needs {frames}")
    return _frechet_from_features(
        _embed(video_extractor, real[:, :frames]), _embed(video_extractor, gen[:, :frames])
    )


@torch.no_grad()
def _embed(extractor, items: torch.Tensor, batch: int = 100) -> np.ndarray:
    out = [extractor(items[i:i + batch].float()) for i in range(0, items.shape[0], batch)]
    return torch.cat(out).double().numpy()


# --- classification metrics ---------------------------------------------------------------

def top1_accuracy(pred_labels, true_labels) -> float:
    pred, true = np.asarray(pred_labels), np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ShapeError(f"{pred.shape} predictions for {true.shape} labels")
    if pred.size == 0:
        raise SampleSizeError("top-1 accuracy of an empty set")
    return float((pred == true).mean())


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError("AUC needs both positive and negative samples")
    r = _midranks(s)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_macro_ovr(scores, labels, n_classes: int = N_CLASSES) -> float:
    s, y = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if s.ndim != 2 or s.shape != (len(y), n_classes):
        raise ShapeError(f"scores must be [{len(y)}, {n_classes}], got {s.shape}")
    aucs = []
    for c in range(n_classes):
        if not (y == c).any():
            name = SurgicalPhase(c).display if n_classes == N_CLASSES else str(c)
            raise DegenerateClassError(f"class {c} ({name}) is absent from labels")
        if (y == c).all():
            raise DegenerateClassError(f"class {c} is the only class present")
        aucs.append(binary_auc(s[:, c], y == c))
    return float(np.mean(aucs))


# --- networks -------------------------------------------------------------------------------

class BasicBlock3d(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv3d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm3d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.skip is None else self.skip(x)))


class PhaseClassifier(nn.Module):
    """Small residual 3D CNN: ``[B, 16, h, w, 3]`` clips -> 4 phase logits."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv3d(3, width, 3, stride=(1, 2, 2), padding=1, bias=False), nn.BatchNorm3d(width), nn.ReLU()
        )
        self.layers = nn.Sequential(BasicBlock3d(width, 2 * width, 2), BasicBlock3d(2 * width, 4 * width, 2))
        self.fc = nn.Linear(4 * width, N_CLASSES)

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        if clips.ndim != 5 or clips.shape[1] != CLIP_FRAMES or clips.shape[-1] != 3:
            raise ShapeError(f"classifier expects [B, {CLIP_FRAMES}, h, w, 3], got {tuple(clips.shape)}")
        x = self.layers(self.stem(clips.permute(0, 4, 1, 2, 3)))
        return x.mean(dim=(2, 3, 4))

    def forward(self, clips):
        return self.fc(self.features(clips))

    @torch.no_grad()
    def predict_proba(self, clips: torch.Tensor, batch: int = 100) -> np.ndarray:
        self.eval()
        logits = torch.cat([self(clips[i:i + batch, :CLIP_FRAMES].float()) for i in range(0, len(clips), batch)])
        return torch.softmax(logits.double(), dim=-1).numpy()


class FrameEncoder(nn.Module):
    """Small 2D CNN over single frames; its pooled features feed FID."""

    def __init__(self, width: int = 16, feature_dim: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, feature_dim, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.fc = nn.Linear(feature_dim, N_CLASSES)

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        return self.body(frames.permute(0, 3, 1, 2)).mean(dim=(2, 3))

    def forward(self, frames):
        return self.fc(self.features(frames))


def module_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- training the evaluation networks --------------------------------------------------

@dataclass
class ClassifierResult:
    model: PhaseClassifier
    train_log: list[dict] = field(default_factory=list)

    @property
    def heldout_accuracy(self) -> float | None:
        accs = [r["heldout_acc"] for r in self.train_log if "heldout_acc" in r]
        return accs[-1] if accs else None


def _fit(model, inputs, labels, epochs, batch, lr, seed, evaluate=None):
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    n = len(labels)
    for epoch in range(1, epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, batch):
            idx = perm[i:i + batch]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            loss = F.cross_entropy(model(inputs[idx]), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        rec = {"epoch": epoch, "loss": total / n}
        if evaluate is not None:
            rec["heldout_acc"] = evaluate()
        history.append(rec)
        log.info("epoch %d loss %.4f", epoch, rec["loss"])
    model.eval()
    return history


def check_classifier_protocol(manifest: DatasetManifest, train_video_ids: set[str] | None) -> None:
    if manifest.split != "eval":
        raise ProtocolError(f"phase classifier must train on the eval split, got {manifest.split!r}")
    counts = manifest.phase_counts
    if not manifest.is_balanced():
        raise ProtocolError(f"phase classifier manifest is unbalanced: { {p.display: c for p, c in counts.items()} }")
    if train_video_ids:
        leaked = sorted(manifest.video_ids & set(train_video_ids))
        if leaked:
            raise ProtocolError(f"split contamination: videos {leaked} are in the diffusion training split")


def train_phase_classifier(
    manifest: DatasetManifest,
    epochs: int = 15,
    *,
    train_video_ids: set[str] | None = None,
    heldout: tuple[torch.Tensor, np.ndarray] | None = None,
    seed: int = 0,
    batch: int = 16,
    lr: float = 1e-3,
    clips: torch.Tensor | None = None,
) -> ClassifierResult:
    """Cross-entropy training on eval-split clips (first 16 frames of each)."""
    check_classifier_protocol(manifest, train_video_ids)
    if clips is None:
        clips = torch.from_numpy(load_clips(manifest))
    x = clips[:, :CLIP_FRAMES].float()
    y = torch.tensor([int(r.phase) for r in manifest.records])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PhaseClassifier()

    evaluate = None
    if heldout is not None:
        hx, hy = heldout

        def evaluate():
            acc = top1_accuracy(model.predict_proba(hx).argmax(1), hy)
            model.train()
            return acc

    history = _fit(model, x, y, epochs, batch, lr, seed + 1, evaluate)
    return ClassifierResult(model, history)


def train_frame_encoder(clips: torch.Tensor, labels: np.ndarray, epochs: int = 3, seed: int = 0,
                        feature_dim: int = 32) -> FrameEncoder:
    """Fit the FID frame embedding on every frame of the given (eval-split) clips."""
    n, t = clips.shape[:2]
    frames = clips.reshape(n * t, *clips.shape[2:]).float()
    y = torch.as_tensor(np.repeat(np.asarray(labels), t))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = FrameEncoder(feature_dim=feature_dim)
    _fit(model, frames, y, epochs, 64, 1e-3, seed + 1)
    return model


# --- report ---------------------------------------------------------------------------------

@dataclass
class EvalReport:
    fid: float
    fvd: float
    top1: float
    auroc: float
    n_generated: int
    n_real: int
    per_phase_counts: dict
    config_fingerprint: str
    baseline: dict = field(default_factory=dict)
    real: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    per_phase_fid: dict = field(default_factory=dict)
    extractor_hashes: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    tool_version: str = ""
    config: dict = field(default_factory=dict)
    wall_s: float | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def config_fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
