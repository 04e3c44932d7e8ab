import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_force_count
from surgvid.data import (
    DatasetManifest,
    PhaseSegment,
    SynthCorpusSpec,
    build_manifest,
    crop_frame,
    enumerate_sequences,
    from_uint8,
    ingest_frame_directory,
    load_clip,
    parse_phase_annotations,
    segments_from_json,
    segments_to_json,
    to_uint8,
    validate_manifest,
    write_synthetic_corpus,
)
from surgvid.errors import CapacityError, CropError, DataError, ShapeError
from surgvid.svt import read_tensor
from surgvid.synth import synth_phase_video
from surgvid.text import PHASES, SurgicalPhase

PREP = SurgicalPhase.PREPARATION


class TestCrop:
    def test_wide_frame_keeps_center_columns(self):
        frame = np.broadcast_to(np.arange(840), (4, 840))[..., None].repeat(3, -1)
        out = crop_frame(frame)
        assert out.shape == (4, 720, 3)
        assert out[0, 0, 0] == 60 and out[0, -1, 0] == 779

    def test_exact_width_unchanged(self):
        frame = np.random.default_rng(0).integers(0, 255, (480, 720, 3), dtype=np.uint8)
        np.testing.assert_array_equal(crop_frame(frame), frame)

    def test_too_narrow(self):
        with pytest.raises(CropError):
            crop_frame(np.zeros((480, 600, 3)))


class TestEnumerate:
    @pytest.mark.parametrize("n, expected", [(97, 1), (100, 4), (96, 0)])
    def test_examples(self, n, expected):
        seg = PhaseSegment("v", PREP, 10, 10 + n - 1)
        starts = enumerate_sequences(seg, 49, 2)
        assert len(starts) == expected
        if expected:
            assert starts[0] == 10

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 50), st.integers(1, 200), st.integers(1, 60), st.integers(1, 4))
    def test_count_matches_brute_force(self, first, n, length, stride):
        seg = PhaseSegment("v", PREP, first, first + n - 1)
        starts = enumerate_sequences(seg, length, stride)
        assert len(starts) == brute_force_count(first, first + n - 1, length, stride)
        assert len(starts) == max(0, n - (length - 1) * stride)

    def test_bad_arguments(self):
        seg = PhaseSegment("v", PREP, 0, 10)
        with pytest.raises(ShapeError):
            enumerate_sequences(seg, 0, 1)
        with pytest.raises(ShapeError):
            PhaseSegment("v", PREP, 5, 4)


def four_phase_segments(video_id="v", n=120):
    return [PhaseSegment(video_id, p, i * n, (i + 1) * n - 1) for i, p in enumerate(PHASES)]


class TestManifest:
    def test_balanced_and_valid(self):
        segs = four_phase_segments() + four_phase_segments("w")
        m = build_manifest(segs, 30, 17, 2, seed=3)
        assert m.is_balanced()
        assert all(c == 30 for c in m.phase_counts.values())
        validate_manifest(m, segs)

    def test_deterministic(self):
        segs = four_phase_segments()
        a = build_manifest(segs, 20, 17, 2, seed=5).to_json()
        b = build_manifest(segs, 20, 17, 2, seed=5).to_json()
        c = build_manifest(segs, 20, 17, 2, seed=6).to_json()
        assert json.dumps(a) == json.dumps(b)
        assert json.dumps(a) != json.dumps(c)

    def test_capacity_error_reports_availability(self):
        segs = four_phase_segments(n=40)  # 40 - 32 = 8 starts per phase
        with pytest.raises(CapacityError) as err:
            build_manifest(segs, 9, 17, 2, seed=0)
        assert "preparation=8" in str(err.value)

    def test_exhaustive_pick(self):
        segs = four_phase_segments(n=40)
        m = build_manifest(segs, 8, 17, 2, seed=0)
        assert len({(r.video_id, r.start_frame) for r in m.records}) == 32

    def test_validate_catches_bad_record(self):
        segs = four_phase_segments()
        m = build_manifest(segs, 5, 17, 2, seed=0)
        bad = m.records[0].__class__(
            m.records[0].video_id, 100, 17, 2, SurgicalPhase.PREPARATION, m.records[0].path
        )
        with pytest.raises(DataError):
            validate_manifest(m.subset([bad]), segs)
        with pytest.raises(DataError):
            validate_manifest(m.subset([m.records[0], m.records[0]]), segs)

    def test_json_round_trip(self, tmp_path):
        segs = four_phase_segments()
        m = build_manifest(segs, 5, 17, 2, seed=0, split="eval")
        m.save(tmp_path / "m.json")
        back = DatasetManifest.load(tmp_path / "m.json")
        assert back.records == m.records
        assert back.split == "eval"
        assert segments_from_json(segments_to_json(segs)) == segs


class TestSynthetic:
    def test_shape_range_determinism(self):
        a = synth_phase_video(PREP, 4, 17, 32, 48)
        assert a.shape == (17, 32, 48, 3) and a.dtype == np.float32
        assert a.min() >= -1 and a.max() <= 1
        np.testing.assert_array_equal(a, synth_phase_video(PREP, 4, 17, 32, 48))
        assert not np.array_equal(a, synth_phase_video(PREP, 5, 17, 32, 48))

    def test_phases_differ(self):
        means = [synth_phase_video(p, 0, 5, 32, 48).mean(axis=(0, 1, 2)) for p in PHASES]
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.abs(means[i] - means[j]).max() > 0.05

    def test_shape_contract(self):
        with pytest.raises(ShapeError):
            synth_phase_video(PREP, 0, 16, 32, 48)
        with pytest.raises(ShapeError):
            synth_phase_video(PREP, 0, 17, 30, 48)

    def test_corpus_and_loading(self, tmp_path):
        spec = SynthCorpusSpec(n_train_videos=1, n_eval_videos=1)
        splits = write_synthetic_corpus(tmp_path, spec, seed=0)
        assert {s.video_id for s in splits["train"]} == {"video01"}
        assert {s.video_id for s in splits["eval"]} == {"video02"}
        src = read_tensor(tmp_path / "videos" / "video01.svt")
        assert src.dtype == np.uint8
        assert src.shape[0] == splits["train"][-1].last_frame + 1
        m = build_manifest(splits["train"], 2, 17, 2, seed=0, base_dir=tmp_path / "videos")
        clip = load_clip(m, m.records[0])
        r = m.records[0]
        np.testing.assert_array_equal(clip, from_uint8(src[r.start_frame:r.start_frame + 33:2]))

    def test_uint8_round_trip(self):
        x = np.linspace(-1, 1, 256, dtype=np.float32)
        assert np.abs(from_uint8(to_uint8(x)) - x).max() <= 1 / 127.5


class TestIngest:
    def test_annotation_segments(self):
        lines = ["Frame\tPhase"]
        lines += [f"{i}\tPreparation" for i in range(0, 10)]
        lines += [f"{i}\tCalotTriangleDissection" for i in range(10, 25)]
        lines += [f"{i}\tCleaningCoagulation" for i in range(25, 30)]
        lines += [f"{i}\tPreparation" for i in range(30, 35)]
        segs = parse_phase_annotations("video01", "\n".join(lines))
        assert segs == [
            PhaseSegment("video01", PREP, 0, 9),
            PhaseSegment("video01", SurgicalPhase.CALOT_TRIANGLE_DISSECTION, 10, 24),
            PhaseSegment("video01", PREP, 30, 34),
        ]

    def test_frame_directory(self, tmp_path):
        from PIL import Image

        for i in range(3):
            img = np.full((16, 840, 3), i * 40, np.uint8)
            img[:, 60] = 255
            Image.fromarray(img).save(tmp_path / f"{i:05d}.png")
        shape = ingest_frame_directory(tmp_path, tmp_path / "out.svt")
        assert shape == (3, 16, 720, 3)
        arr = read_tensor(tmp_path / "out.svt")
        assert arr[1, 0, 1, 0] == 40 and arr[0, 0, 0, 0] == 255

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            ingest_frame_directory(tmp_path, tmp_path / "out.svt")
