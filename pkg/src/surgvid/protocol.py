"""End-to-end evaluation protocol over trained checkpoints.

Pools, all balanced across the four phases:

* classifier set: eval-split clips the phase classifier and frame encoder train on
* reference set: other eval-split clips; FID/FVD compare against these, and the
  classifier's accuracy on them is its held-out accuracy
* real set: clips sampled from the diffusion training split, scored by the
  classifier next to the generated videos
* generated sets: videos from the trained denoiser and from an untrained
  denoiser of the same config (the baseline)
"""

from __future__ import annotations

import logging
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import Profile
from .data import DatasetManifest, load_clips
from .diffusion import make_noise_schedule
from .errors import CapacityError
from .evaluation import (
    EvalReport,
    auroc_macro_ovr,
    compute_fid,
    compute_fvd,
    config_fingerprint,
    module_digest,
    top1_accuracy,
    train_frame_encoder,
    train_phase_classifier,
)
from .text import PHASES, format_prompt
from .train import load_pipeline, sample_videos

log = logging.getLogger(__name__)


def balanced_pick(manifest: DatasetManifest, counts: list[int], seed: int) -> list[list]:
    """Split each phase's records into disjoint, seeded pools of the given sizes."""
    rng = np.random.default_rng(seed)
    pools = [[] for _ in counts]
    for phase in PHASES:
        recs = [r for r in manifest.records if r.phase == phase]
        if len(recs) < sum(counts):
            raise CapacityError(f"{phase.display}: need {sum(counts)} records, manifest has {len(recs)}")
        order = rng.permutation(len(recs))
        start = 0
        for pool, k in zip(pools, counts):
            pool.extend(recs[i] for i in order[start:start + k])
            start += k
    return pools


def generation_plan(per_phase: int, seed: int) -> tuple[list[str], list[int], np.ndarray]:
    prompts, seeds, labels = [], [], []
    for phase in PHASES:
        for i in range(per_phase):
            prompts.append(format_prompt(phase))
            seeds.append(seed * 1_000_003 + int(phase) * 100_000 + i)
            labels.append(int(phase))
    return prompts, seeds, np.asarray(labels)


def _alignment(classifier, clips, labels) -> dict:
    probs = classifier.predict_proba(clips)
    return {"top1": top1_accuracy(probs.argmax(1), labels), "auroc": auroc_macro_ovr(probs, labels)}


def run_protocol(
    ckpt_dir,
    train_manifest: DatasetManifest,
    eval_manifest: DatasetManifest,
    profile: Profile,
    resolved_config: dict | None = None,
) -> tuple[EvalReport, torch.Tensor]:
    """Score a checkpoint directory; returns the report and the generated videos."""
    t0 = time.perf_counter()
    ev = profile.evaluation
    seed = ev.seed
    sched = make_noise_schedule(T=profile.schedule_T)

    cls_recs, ref_recs = balanced_pick(eval_manifest, [ev.classifier_per_phase, ev.reference_per_phase], seed)
    (real_recs,) = balanced_pick(train_manifest, [ev.real_per_phase], seed + 1)
    cls_manifest = eval_manifest.subset(cls_recs)
    ref_clips = torch.from_numpy(load_clips(eval_manifest, ref_recs))
    ref_labels = np.array([int(r.phase) for r in ref_recs])
    real_clips = torch.from_numpy(load_clips(train_manifest, real_recs))
    real_labels = np.array([int(r.phase) for r in real_recs])
    cls_clips = torch.from_numpy(load_clips(cls_manifest))
    cls_labels = np.array([int(r.phase) for r in cls_recs])

    log.info("training frame encoder and phase classifier on %d eval-split clips", len(cls_recs))
    frame_enc = train_frame_encoder(cls_clips, cls_labels, seed=seed, feature_dim=ev.feature_dim).eval()
    clf = train_phase_classifier(
        cls_manifest, ev.classifier_epochs, train_video_ids=train_manifest.video_ids,
        heldout=(ref_clips, ref_labels), seed=seed, clips=cls_clips,
    )
    classifier = clf.model.eval()
    hashes = {"frame_encoder": module_digest(frame_enc), "phase_classifier": module_digest(classifier)}

    prompts, seeds, gen_labels = generation_plan(ev.gen_per_phase, seed)
    trained = load_pipeline(ckpt_dir, profile.frames, profile.height, profile.width)
    log.info("sampling %d videos from the trained model", len(prompts))
    gen = sample_videos(trained, prompts, seeds, sched, ev.sample_steps, ev.guidance, ev.batch_size)
    untrained = load_pipeline(ckpt_dir, profile.frames, profile.height, profile.width,
                              untrained_seed=profile.denoiser_train.seed)
    log.info("sampling %d videos from the untrained baseline", len(prompts))
    base = sample_videos(untrained, prompts, seeds, sched, ev.sample_steps, ev.guidance, ev.batch_size)

    frame_feat, clip_feat = frame_enc.features, classifier.features
    fid, fvd = compute_fid(ref_clips, gen, frame_feat), compute_fvd(ref_clips, gen, clip_feat, ev.fvd_frames)
    fid_b, fvd_b = compute_fid(ref_clips, base, frame_feat), compute_fvd(ref_clips, base, clip_feat, ev.fvd_frames)

    per_phase_fid = {}
    for phase in PHASES:
        r, g = ref_labels == int(phase), gen_labels == int(phase)
        per_phase_fid[phase.display] = float(compute_fid(ref_clips[r], gen[torch.from_numpy(g)], frame_feat))

    gen_align = _alignment(classifier, gen, gen_labels)
    report = EvalReport(
        fid=float(fid),
        fvd=float(fvd),
        top1=gen_align["top1"],
        auroc=gen_align["auroc"],
        n_generated=len(gen_labels),
        n_real=len(real_labels),
        per_phase_counts={p.display: int((gen_labels == int(p)).sum()) for p in PHASES},
        config_fingerprint=config_fingerprint(resolved_config or {}),
        baseline={"fid": float(fid_b), "fvd": float(fvd_b), **_alignment(classifier, base, gen_labels)},
        real=_alignment(classifier, real_clips, real_labels),
        classifier={
            "train_clips": len(cls_recs),
            "epochs": ev.classifier_epochs,
            "heldout_clips": len(ref_recs),
            "heldout_top1": clf.heldout_accuracy,
            "log": clf.train_log,
        },
        per_phase_fid=per_phase_fid,
        extractor_hashes=hashes,
        warnings=[*fid.warnings, *fvd.warnings, *fid_b.warnings, *fvd_b.warnings],
        tool_version=__version__,
        config=resolved_config or {},
    )
    report.wall_s = round(time.perf_counter() - t0, 3)
    return report, gen


def save_report(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.dumps())
