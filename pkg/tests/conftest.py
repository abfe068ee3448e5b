import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings
from PIL import Image

from lipfd.avdata import ClipRecord, write_audio, write_manifest
from lipfd.config import tiny_config
from lipfd.model import LipFD

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", settings.get_profile("default"), max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(min(4, os.cpu_count() or 1))


def make_clip(root, clip_id="c0", n_frames=10, side=32, fps=25.0, sr=16000, label=0, split="train",
              audio=None, seed=0):
    """Random-noise frames plus a tone; returns the ClipRecord."""
    rng = np.random.default_rng(seed)
    fdir = root / clip_id / "frames"
    fdir.mkdir(parents=True, exist_ok=True)
    for i in range(n_frames):
        img = rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)
        Image.fromarray(img).save(fdir / f"{i:05d}.png")
    if audio is None:
        t = np.arange(int(round(n_frames / fps * sr))) / sr
        audio = 0.3 * np.sin(2 * np.pi * 300 * t) * (1 + 0.5 * np.sin(2 * np.pi * 3 * t))
    write_audio(root / clip_id / "audio.wav", audio, sr)
    return ClipRecord(clip_id, fdir.resolve(), (root / clip_id / "audio.wav").resolve(), label, "original", split,
                      fps, sr)


@pytest.fixture
def clip_factory(tmp_path):
    def factory(**kw):
        return make_clip(tmp_path, **kw)
    return factory


@pytest.fixture
def manifest_factory(tmp_path):
    def factory(records, name="manifest.tsv"):
        return write_manifest(records, tmp_path / name)
    return factory


@pytest.fixture
def tiny_cfg():
    return tiny_config(seed=0)


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    model = LipFD(tiny_cfg)
    model.mark_ready()
    return model


def random_composites(cfg, n, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    H, W = cfg.composite_shape
    return torch.rand(n, 3, H, W, generator=g, dtype=dtype)


@pytest.fixture(scope="session")
def synth_cache(tmp_path_factory):
    """Eight short synthetic clips rendered to a tiny-config cache (two windows per clip)."""
    from lipfd.avdata import expand_dataset, load_manifest, write_cache
    from lipfd.evalkit.synth import SynthParams, synth_benchmark

    root = tmp_path_factory.mktemp("synth")
    params = SynthParams(duration=1.0, frame_size=64, split_fractions=(0.5, 0.0, 0.5))
    manifest = synth_benchmark(8, root / "data", T=5, seed=0, params=params)
    records = load_manifest(manifest)
    cfg = tiny_config(seed=0)
    write_cache(records, expand_dataset(records, 5, 2, 0), root / "cache", cfg)
    return root / "cache"


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
