"""Command line entry point.

    surgvid [--config run.json] [--profile toy] [--seed 0] build-data
    surgvid train vae|denoiser
    surgvid sample --prompt "Laparoscopic cholecystectomy during preparation" --n 2
    surgvid evaluate

Exit codes: 0 success, 1 internal error, 2 data error, 3 missing
prerequisite, 4 bad input.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import re
import sys
from pathlib import Path

import torch

from .config import get_profile
from .data import DatasetManifest, build_manifest, parse_phase_annotations, ingest_frame_directory, write_synthetic_corpus
from .diffusion import make_noise_schedule
from .errors import CheckpointError, ConfigError, DataError, InputError, SurgVidError
from .text import TokenizerTable, legal_phrases, parse_phase
from .train import (
    load_checkpoint,
    load_pipeline,
    sample_videos,
    save_checkpoint,
    text_store,
    train_denoiser,
    train_vae,
)
from . import svt

log = logging.getLogger("surgvid")

EXIT_OK, EXIT_INTERNAL, EXIT_DATA, EXIT_PREREQ, EXIT_INPUT = 0, 1, 2, 3, 4
DATA_ROOT_ENV = "SURGEN_DATA_ROOT"


class MissingPrerequisite(SurgVidError):
    pass


@dataclasses.dataclass
class RunConfig:
    profile: str = "toy"
    seed: int = 0
    data_root: str | None = None
    checkpoint_dir: str | None = None
    report_dir: str | None = None
    overrides: dict = dataclasses.field(default_factory=dict)

    def resolved_profile(self):
        return get_profile(self.profile).replace(**self.overrides)

    def paths(self) -> tuple[Path, Path, Path]:
        if not self.data_root:
            raise DataError(f"no data root: pass --data-root, set it in the config, or export {DATA_ROOT_ENV}")
        root = Path(self.data_root)
        ckpt = Path(self.checkpoint_dir) if self.checkpoint_dir else root / "checkpoints"
        reports = Path(self.report_dir) if self.report_dir else root / "reports"
        return root, ckpt, reports

    def checkpoint_path(self) -> Path:
        if self.checkpoint_dir:
            return Path(self.checkpoint_dir)
        return self.paths()[1]

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def load_run_config(args) -> RunConfig:
    doc = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise InputError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {p} is not valid JSON: {exc}") from exc
    paths = doc.pop("paths", {})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config fields {sorted(unknown)}")
    cfg = RunConfig(**doc)
    cfg.data_root = paths.get("data_root", cfg.data_root)
    cfg.checkpoint_dir = paths.get("checkpoint_dir", cfg.checkpoint_dir)
    cfg.report_dir = paths.get("report_dir", cfg.report_dir)
    if args.profile:
        cfg.profile = args.profile
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "data_root", None):
        cfg.data_root = args.data_root
    if not cfg.data_root:
        cfg.data_root = os.environ.get(DATA_ROOT_ENV)
    return cfg


def _seeded_profile(cfg: RunConfig):
    prof = cfg.resolved_profile()
    return prof.replace(
        vae_train={"seed": cfg.seed, "profile": prof.name},
        denoiser_train={"seed": cfg.seed, "profile": prof.name},
        evaluation={"seed": prof.evaluation.seed + cfg.seed},
    )


def _require_root(root: Path) -> None:
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist")


def _manifests(root: Path) -> tuple[DatasetManifest, DatasetManifest]:
    mdir = root / "manifests"
    for name in ("train.json", "eval.json"):
        if not (mdir / name).exists():
            raise MissingPrerequisite(f"manifest {mdir / name} missing; run build-data first")
    return DatasetManifest.load(mdir / "train.json"), DatasetManifest.load(mdir / "eval.json")


def cmd_build_data(cfg: RunConfig, args) -> int:
    root, _, _ = cfg.paths()
    _require_root(root)
    prof = _seeded_profile(cfg)
    out = Path(args.out) if args.out else root / "manifests"
    if args.source == "synthetic":
        splits = write_synthetic_corpus(root, prof.corpus, cfg.seed)
        video_dir = root / "videos"
    else:
        splits = _ingest_cholec80(root, args)
        video_dir = root / "videos"
    paths = {
        s.video_id: os.path.relpath(video_dir / f"{s.video_id}.svt", out)
        for segs in splits.values() for s in segs
    }
    manifests = {}
    for split, per_phase, seed in (("train", prof.train_per_phase, cfg.seed), ("eval", prof.eval_per_phase, cfg.seed + 1)):
        m = build_manifest(splits[split], per_phase, prof.frames, prof.stride, seed,
                           split=split, profile=prof.name, video_paths=paths, base_dir=out)
        doc = m.to_json()
        doc["config"] = cfg.to_json()
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{split}.json").write_text(json.dumps(doc, indent=1) + "\n")
        manifests[split] = m
        counts = ", ".join(f"{p.display}={c}" for p, c in m.phase_counts.items())
        print(f"{split}: {len(m.records)} sequences ({counts})")
    return EXIT_OK


def _ingest_cholec80(root: Path, args) -> dict:
    """Expect ``root/frames/<video>/*.png`` and ``root/phase_annotations/<video>-phase.txt``."""
    frames_root, ann_root = root / "frames", root / "phase_annotations"
    if not frames_root.is_dir() or not ann_root.is_dir():
        raise DataError(f"expected {frames_root} and {ann_root} for --source cholec80")
    videos = sorted(p.name for p in frames_root.iterdir() if p.is_dir())
    if not videos:
        raise DataError(f"no video frame directories under {frames_root}")
    n_train = args.train_videos if args.train_videos is not None else len(videos) // 2
    splits = {"train": [], "eval": []}
    for i, vid in enumerate(videos):
        ann = ann_root / f"{vid}-phase.txt"
        if not ann.exists():
            raise DataError(f"annotation file {ann} missing")
        ingest_frame_directory(frames_root / vid, root / "videos" / f"{vid}.svt")
        splits["train" if i < n_train else "eval"].extend(parse_phase_annotations(vid, ann.read_text()))
    (root / "segments.json").write_text(json.dumps(
        {k: [dict(video_id=s.video_id, phase=s.phase.display, first_frame=s.first_frame, last_frame=s.last_frame)
             for s in v] for k, v in splits.items()}, indent=1) + "\n")
    return splits


def cmd_train(cfg: RunConfig, args) -> int:
    root, ckpt, _ = cfg.paths()
    _require_root(root)
    if args.out:
        ckpt = Path(args.out)
    prof = _seeded_profile(cfg)
    train_m, _ = _manifests(root)
    ckpt.mkdir(parents=True, exist_ok=True)

    if args.component == "vae":
        store = train_vae(prof.vae_train, train_m, prof.vae, log_path=ckpt / "vae_train.log.jsonl",
                          progress=_progress(prof.vae_train.steps))
        save_checkpoint(store, ckpt / "vae", provenance=cfg.to_json())
        print(f"wrote {ckpt / 'vae'}")
        return EXIT_OK

    if not (ckpt / "vae" / "index.json").exists():
        raise MissingPrerequisite(f"denoiser training needs a VAE checkpoint at {ckpt / 'vae'}; run 'train vae' first")
    vae_store = load_checkpoint(ckpt / "vae", "vae").freeze()
    table = TokenizerTable.build(d_text=prof.denoiser.d_text, length=prof.denoiser.l_text)
    sched = make_noise_schedule(T=prof.schedule_T)
    store = train_denoiser(prof.denoiser_train, train_m, vae_store, table, prof.denoiser, sched,
                           log_path=ckpt / "denoiser_train.log.jsonl", progress=_progress(prof.denoiser_train.steps))
    save_checkpoint(store, ckpt / "denoiser", provenance=cfg.to_json())
    save_checkpoint(text_store(table), ckpt / "text", provenance=cfg.to_json())
    print(f"wrote {ckpt / 'denoiser'} and {ckpt / 'text'}")
    return EXIT_OK


def _progress(total: int):
    every = max(1, total // 20)

    def report(step, loss):
        if step % every == 0 or step == total:
            log.info("step %d/%d loss %.5f", step, total, loss)

    return report


def _require_checkpoints(ckpt: Path) -> None:
    for comp in ("vae", "denoiser", "text"):
        if not (ckpt / comp / "index.json").exists():
            raise MissingPrerequisite(f"checkpoint {ckpt / comp} missing; train the pipeline first")


def cmd_sample(cfg: RunConfig, args) -> int:
    phase = parse_phase(args.prompt)
    if args.n < 1:
        raise InputError("--n must be at least 1")
    ckpt = cfg.checkpoint_path()
    _require_checkpoints(ckpt)
    prof = _seeded_profile(cfg)
    out = Path(args.out) if args.out else Path("samples")
    pipeline = load_pipeline(ckpt, prof.frames, prof.height, prof.width)
    sched = make_noise_schedule(T=prof.schedule_T)
    steps = args.steps or prof.evaluation.sample_steps
    guidance = prof.evaluation.guidance if args.guidance is None else args.guidance
    seeds = [cfg.seed * 1_000_003 + i for i in range(args.n)]
    videos = sample_videos(pipeline, [args.prompt] * args.n, seeds, sched, steps, guidance)
    slug = re.sub(r"[^a-z]+", "-", phase.display)
    files = []
    for i, video in enumerate(videos):
        path = out / f"{slug}_seed{cfg.seed}_{i:03d}.svt"
        svt.write_tensor(path, video.contiguous().numpy())
        files.append(path.name)
        print(path)
    (out / f"{slug}_seed{cfg.seed}.json").write_text(json.dumps(
        {"prompt": args.prompt, "steps": steps, "guidance": guidance, "files": files, "config": cfg.to_json()},
        indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from .protocol import run_protocol, save_report

    root, ckpt, reports = cfg.paths()
    _require_root(root)
    _require_checkpoints(ckpt)
    prof = _seeded_profile(cfg)
    train_m, eval_m = _manifests(root)
    report, _ = run_protocol(ckpt, train_m, eval_m, prof, resolved_config=cfg.to_json())
    path = Path(args.out) if args.out else reports / "eval_report.json"
    save_report(report, path)
    print(f"FID {report.fid:.4f} (untrained {report.baseline['fid']:.4f})")
    print(f"FVD {report.fvd:.4f} (untrained {report.baseline['fvd']:.4f})")
    print(f"phase top-1 {report.top1:.4f}, AUROC {report.auroc:.4f} on {report.n_generated} generated videos")
    print(f"phase top-1 {report.real['top1']:.4f}, AUROC {report.real['auroc']:.4f} on {report.n_real} real videos")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surgvid", description="Build data, train, sample and evaluate phase-conditioned surgical video diffusion.")
    parser.add_argument("--config", help="JSON run config; flags override its fields")
    parser.add_argument("--profile", choices=["toy", "full"])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--data-root", help=f"data root (default: ${DATA_ROOT_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="write source videos and train/eval manifests")
    p.add_argument("--source", choices=["synthetic", "cholec80"], default="synthetic")
    p.add_argument("--train-videos", type=int, help="cholec80: number of leading videos in the train split")
    p.add_argument("--out", help="manifest directory (default: <data root>/manifests)")
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", help="train the VAE or the denoiser")
    p.add_argument("component", choices=["vae", "denoiser"])
    p.add_argument("--out", help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate videos for one prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float, help="guidance scale (default: the profile's)")
    p.add_argument("--out", help="output directory (default: ./samples)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="run the FID/FVD/phase-alignment protocol")
    p.add_argument("--out", help="report path (default: <report dir>/eval_report.json)")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_run_config(args)
        return args.func(cfg, args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MissingPrerequisite, CheckpointError) as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (InputError, ConfigError) as exc:
        msg = str(exc)
        if "legal prompts" not in msg and args.command == "sample":
            msg += "; legal prompts are: " + "; ".join(legal_phrases())
        print(f"input error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
