"""Corpus construction: cropping, phase segments, sequence manifests and loading.

A source video is stored as one SVT container of uint8 frames ``[N, H, W, 3]``.
A manifest record points at such a container plus a start frame; the clip is
``frames[start : start + (length - 1) * stride + 1 : stride]``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import svt
from .errors import CapacityError, CropError, DataError, FormatError, ShapeError
from .synth import synth_phase_video
from .text import PHASES, SurgicalPhase

log = logging.getLogger(__name__)

CROP_WIDTH = 720
FULL_HEIGHT = 480


@dataclass(frozen=True)
class PhaseSegment:
    video_id: str
    phase: SurgicalPhase
    first_frame: int
    last_frame: int  # inclusive

    def __post_init__(self):
        if self.first_frame < 0 or self.first_frame > self.last_frame:
            raise ShapeError(f"bad segment bounds {self.first_frame}..{self.last_frame}")

    @property
    def n_frames(self) -> int:
        return self.last_frame - self.first_frame + 1


@dataclass(frozen=True)
class SequenceRecord:
    video_id: str
    start_frame: int
    length: int
    stride: int
    phase: SurgicalPhase
    path: str

    @property
    def source_indices(self) -> range:
        return range(self.start_frame, self.start_frame + (self.length - 1) * self.stride + 1, self.stride)


@dataclass
class DatasetManifest:
    split: str
    profile: str
    length: int
    stride: int
    records: list[SequenceRecord] = field(default_factory=list)
    base_dir: Path | None = None  # where relative record paths resolve

    @property
    def phase_counts(self) -> dict[SurgicalPhase, int]:
        counts = {p: 0 for p in PHASES}
        for r in self.records:
            counts[r.phase] += 1
        return counts

    @property
    def video_ids(self) -> set[str]:
        return {r.video_id for r in self.records}

    def is_balanced(self) -> bool:
        return len(set(self.phase_counts.values())) == 1 and len(self.records) > 0

    def resolve(self, record: SequenceRecord) -> Path:
        p = Path(record.path)
        if not p.is_absolute() and self.base_dir is not None:
            p = self.base_dir / p
        return p

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "profile": self.profile,
            "length": self.length,
            "stride": self.stride,
            "records": [
                {"video_id": r.video_id, "start_frame": r.start_frame, "phase": r.phase.display, "path": r.path}
                for r in self.records
            ],
        }

    @classmethod
    def from_json(cls, doc: dict, base_dir: Path | None = None) -> "DatasetManifest":
        try:
            length, stride = int(doc["length"]), int(doc["stride"])
            records = [
                SequenceRecord(
                    video_id=str(r["video_id"]),
                    start_frame=int(r["start_frame"]),
                    length=length,
                    stride=stride,
                    phase=SurgicalPhase.from_display(r["phase"]),
                    path=str(r["path"]),
                )
                for r in doc["records"]
            ]
            return cls(str(doc["split"]), str(doc["profile"]), length, stride, records, base_dir)
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from exc

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        return cls.from_json(json.loads(path.read_text()), base_dir=path.parent)

    def subset(self, records: Sequence[SequenceRecord], split: str | None = None) -> "DatasetManifest":
        return DatasetManifest(split or self.split, self.profile, self.length, self.stride, list(records), self.base_dir)


def crop_frame(frame: np.ndarray, width: int = CROP_WIDTH) -> np.ndarray:
    """Center-crop the width of an ``[H, W, C]`` frame, leaving the height alone."""
    w = frame.shape[1]
    if w < width:
        raise CropError(f"frame width {w} is narrower than crop width {width}")
    left = (w - width) // 2
    return frame[:, left:left + width]


def sequence_span(length: int, stride: int) -> int:
    return (length - 1) * stride + 1


def enumerate_sequences(segment: PhaseSegment, length: int, stride: int) -> list[int]:
    if length < 1 or stride < 1:
        raise ShapeError(f"length and stride must be >= 1, got {length}, {stride}")
    last_start = segment.last_frame - (length - 1) * stride
    return list(range(segment.first_frame, last_start + 1))


def build_manifest(
    segments: Iterable[PhaseSegment],
    per_phase: int,
    length: int,
    stride: int,
    seed: int,
    *,
    split: str = "train",
    profile: str = "toy",
    video_paths: Mapping[str, str] | None = None,
    base_dir: Path | None = None,
) -> DatasetManifest:
    """Sample ``per_phase`` unique sequences for every phase, uniformly without replacement."""
    candidates: dict[SurgicalPhase, list[tuple[str, int]]] = {p: [] for p in PHASES}
    for seg in segments:
        for s in enumerate_sequences(seg, length, stride):
            candidates[seg.phase].append((seg.video_id, s))

    available = {p.display: len(set(c)) for p, c in candidates.items()}
    short = {k: v for k, v in available.items() if v < per_phase}
    if short:
        raise CapacityError(
            f"need {per_phase} sequences per phase; available: "
            + ", ".join(f"{k}={v}" for k, v in available.items()),
            available,
        )

    rng = np.random.default_rng(seed)
    records = []
    for phase in PHASES:
        pool = sorted(set(candidates[phase]))
        picks = rng.choice(len(pool), size=per_phase, replace=False)
        for i in sorted(picks.tolist()):
            vid, start = pool[i]
            path = video_paths[vid] if video_paths is not None else f"{vid}.svt"
            records.append(SequenceRecord(vid, start, length, stride, phase, path))
    return DatasetManifest(split, profile, length, stride, records, base_dir)


def validate_manifest(manifest: DatasetManifest, segments: Iterable[PhaseSegment]) -> None:
    """Raise if any record leaves its declared phase segment or repeats."""
    by_video: dict[str, list[PhaseSegment]] = {}
    for seg in segments:
        by_video.setdefault(seg.video_id, []).append(seg)
    seen = set()
    for r in manifest.records:
        key = (r.video_id, r.start_frame)
        if key in seen:
            raise DataError(f"duplicate record {key}")
        seen.add(key)
        idx = r.source_indices
        ok = any(
            s.phase == r.phase and s.first_frame <= idx[0] and idx[-1] <= s.last_frame
            for s in by_video.get(r.video_id, [])
        )
        if not ok:
            raise DataError(f"record {key} is not inside a {r.phase.display} segment")


def segments_to_json(segments: Iterable[PhaseSegment]) -> list[dict]:
    return [
        {"video_id": s.video_id, "phase": s.phase.display, "first_frame": s.first_frame, "last_frame": s.last_frame}
        for s in segments
    ]


def segments_from_json(doc: list[dict]) -> list[PhaseSegment]:
    return [
        PhaseSegment(d["video_id"], SurgicalPhase.from_display(d["phase"]), int(d["first_frame"]), int(d["last_frame"]))
        for d in doc
    ]


# --- pixel conversion and loading -------------------------------------------------

def to_uint8(video: np.ndarray) -> np.ndarray:
    return np.round((np.clip(video, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(frames: np.ndarray) -> np.ndarray:
    return frames.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


@lru_cache(maxsize=64)
def _load_source(path: str) -> np.ndarray:
    arr = svt.read_tensor(path)
    arr.setflags(write=False)
    return arr


def load_clip(manifest: DatasetManifest, record: SequenceRecord) -> np.ndarray:
    """Float32 clip ``[length, H, W, 3]`` in ``[-1, 1]``."""
    src = _load_source(str(manifest.resolve(record)))
    idx = record.source_indices
    if idx[-1] >= src.shape[0]:
        raise DataError(f"record {record.video_id}@{record.start_frame} runs past frame {src.shape[0] - 1}")
    clip = src[idx.start:idx.stop:idx.step]
    return from_uint8(clip) if clip.dtype == np.uint8 else np.array(clip, dtype=np.float32)


def load_clips(manifest: DatasetManifest, records: Sequence[SequenceRecord] | None = None) -> np.ndarray:
    records = manifest.records if records is None else records
    return np.stack([load_clip(manifest, r) for r in records]) if records else np.zeros((0,), np.float32)


def clear_cache() -> None:
    _load_source.cache_clear()


# --- synthetic corpus ---------------------------------------------------------------

@dataclass(frozen=True)
class SynthCorpusSpec:
    n_train_videos: int = 12
    n_eval_videos: int = 12
    height: int = 32
    width: int = 48
    min_segment: int = 41
    max_segment: int = 73


def synth_source_video(video_index: int, spec: SynthCorpusSpec, seed: int):
    """One synthetic procedure: the four phases back to back with random durations."""
    rng = np.random.default_rng([seed, video_index])
    choices = np.arange(spec.min_segment, spec.max_segment + 1)
    choices = choices[choices % 4 == 1]
    video_id = f"video{video_index + 1:02d}"
    parts, segments, cursor = [], [], 0
    for phase in PHASES:
        n = int(rng.choice(choices))
        clip_seed = int(rng.integers(2**31))
        parts.append(synth_phase_video(phase, clip_seed, n, spec.height, spec.width))
        segments.append(PhaseSegment(video_id, phase, cursor, cursor + n - 1))
        cursor += n
    return video_id, np.concatenate(parts), segments


def write_synthetic_corpus(root, spec: SynthCorpusSpec, seed: int) -> dict[str, list[PhaseSegment]]:
    """Render train/eval source videos under ``root/videos`` and the segment index.

    The first ``n_train_videos`` indices form the training split and the rest the
    evaluation split, mirroring a first-half/second-half video split.
    """
    root = Path(root)
    splits: dict[str, list[PhaseSegment]] = {"train": [], "eval": []}
    total = spec.n_train_videos + spec.n_eval_videos
    for i in range(total):
        vid, frames, segs = synth_source_video(i, spec, seed)
        svt.write_tensor(root / "videos" / f"{vid}.svt", to_uint8(frames))
        splits["train" if i < spec.n_train_videos else "eval"].extend(segs)
    (root / "segments.json").write_text(
        json.dumps({k: segments_to_json(v) for k, v in splits.items()}, indent=1) + "\n"
    )
    return splits


# --- real footage ingestion ----------------------------------------------------------

# Cholec80 phase names -> the four phases used here; the other three are dropped.
CHOLEC80_PHASES = {
    "preparation": SurgicalPhase.PREPARATION,
    "calottriangledissection": SurgicalPhase.CALOT_TRIANGLE_DISSECTION,
    "clippingcutting": SurgicalPhase.CLIPPING_AND_CUTTING,
    "gallbladderdissection": SurgicalPhase.GALLBLADDER_DISSECTION,
}


def parse_phase_annotations(video_id: str, text: str) -> list[PhaseSegment]:
    """Turn a ``Frame<TAB>Phase`` annotation file into contiguous phase segments."""
    rows = []
    for line in text.splitlines():
        parts = line.split()
        if len(parts) != 2 or not parts[0].isdigit():
            continue
        rows.append((int(parts[0]), parts[1]))
    rows.sort()
    segments = []
    run_start, run_name, prev = None, None, None
    for frame, name in rows + [(None, None)]:
        if run_name is not None and (name != run_name or frame != prev + 1):
            phase = CHOLEC80_PHASES.get(re.sub(r"[^a-z]", "", run_name.lower()))
            if phase is not None:
                segments.append(PhaseSegment(video_id, phase, run_start, prev))
            run_name = None
        if frame is not None and run_name is None:
            run_start, run_name = frame, name
        prev = frame
    return segments


def ingest_frame_directory(frame_dir, out_path, crop: bool = True, width: int = CROP_WIDTH) -> tuple[int, ...]:
    """Pack a directory of per-frame images (sorted by name) into one uint8 SVT container."""
    from PIL import Image

    files = sorted(p for p in Path(frame_dir).iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"})
    if not files:
        raise DataError(f"no frame images in {frame_dir}")
    frames = []
    for f in files:
        arr = np.asarray(Image.open(f).convert("RGB"))
        frames.append(crop_frame(arr, width) if crop else arr)
    stack = np.stack(frames)
    svt.write_tensor(out_path, stack)
    return stack.shape
