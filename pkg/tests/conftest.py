import pytest
import torch

from surgvid.config import TrainConfig
from surgvid.data import SynthCorpusSpec, build_manifest, write_synthetic_corpus
from surgvid.denoiser import DenoiserConfig
from surgvid.vae import VaeConfig

torch.set_num_threads(1)

TINY_VAE = VaeConfig(c_lat=8, width=4)
TINY_DENOISER = DenoiserConfig(d_model=32, n_heads=2, n_blocks=1, max_grid=(5, 2, 3))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Two train and two eval synthetic videos with small balanced manifests."""
    root = tmp_path_factory.mktemp("corpus")
    splits = write_synthetic_corpus(root, SynthCorpusSpec(n_train_videos=2, n_eval_videos=2), seed=0)
    paths = {s.video_id: f"{s.video_id}.svt" for segs in splits.values() for s in segs}
    train = build_manifest(splits["train"], 8, 17, 2, seed=0, split="train", video_paths=paths, base_dir=root / "videos")
    evals = build_manifest(splits["eval"], 8, 17, 2, seed=1, split="eval", video_paths=paths, base_dir=root / "videos")
    return root, train, evals, splits


@pytest.fixture(scope="session")
def tiny_vae_store(tiny_corpus):
    from surgvid.train import train_vae

    _, train, _, _ = tiny_corpus
    cfg = TrainConfig(lr=1e-3, weight_decay=0.0, steps=3, micro_batch=2, accum=1)
    return train_vae(cfg, train, TINY_VAE).freeze()


# --- acceptance summary: one line per criterion ---------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "failed": [], "passed": 0})
    if report.failed:
        entry["failed"].append(f"{item.name} ({report.when})")
    elif report.when == "call" and report.passed:
        entry["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        ok = entry["passed"] and not entry["failed"]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {entry['title']}"
        if entry["failed"]:
            line += "  [" + ", ".join(entry["failed"]) + "]"
        terminalreporter.write_line(line)
