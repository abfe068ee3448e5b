import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lipfd.avdata import WindowSample, load_composite, load_manifest, read_audio, read_index
from lipfd.errors import StateError, ValidationError
from lipfd.evalkit.gradcam import gradient_attention_map, write_heatmaps
from lipfd.evalkit.records import MetricRecord, read_records, write_records
from lipfd.evalkit.sweep import robustness_sweep
from lipfd.evalkit.synth import SynthParams, audio_frame_rms, generate_clip, synth_benchmark
from lipfd.evalkit.weights import normalize_weights
from lipfd.perturb import PerturbationSpec
from lipfd.regions import crop_side
from lipfd.training import CompositeSet

from oracles import eq8_loop

# --------------------------------------------------------------------------- weights


def test_weights_already_normalised():
    np.testing.assert_allclose(normalize_weights([0.2, 0.3, 0.5]).triples[0], [0.2, 0.3, 0.5])


def test_weights_eq8_oracle():
    np.testing.assert_allclose(normalize_weights([2.0, 3.0, 5.0]).triples[0], [0.2, 0.3, 0.5])
    raw = [[1.0, 1.0, 2.0], [3.0, 1.0, 1.0]]
    np.testing.assert_allclose(normalize_weights(raw).triples[0], eq8_loop(raw), rtol=1e-12)


def test_weights_equal():
    np.testing.assert_allclose(normalize_weights(np.full((2, 4, 3), 0.7)).triples, np.full((2, 3), 1 / 3))


@given(raw=st.lists(st.tuples(*[st.floats(1e-3, 1e3)] * 3), min_size=1, max_size=6), scale=st.floats(1e-3, 1e3))
def test_weights_sum_and_scale(raw, scale):
    a = normalize_weights(raw).triples[0]
    assert abs(a.sum() - 1) <= 1e-6
    assert np.all((a >= 0) & (a <= 1))
    np.testing.assert_allclose(normalize_weights(np.array(raw) * scale).triples[0], a, atol=1e-12)


def test_weights_from_stack(tiny_model, tiny_cfg):
    from conftest import random_composites

    x = random_composites(tiny_cfg, 2)
    stack = tiny_model(x, tiny_model.make_crops(x))
    rep = normalize_weights(stack, ["a", "b"])
    assert [r["sample_id"] for r in rep.rows()] == ["a", "b"]
    assert rep.mean().shape == (3,)


def test_weights_reject_negative():
    with pytest.raises(ValidationError):
        normalize_weights([1.0, -1.0, 0.5])


# --------------------------------------------------------------------------- records


def test_records_round_trip(tmp_path):
    recs = [MetricRecord("none", "clean", "auc", 0.875), MetricRecord("gaussian_noise", "3", "auc", None),
            MetricRecord("probe", "contrast@1.0", "auc", 1 / 3)]
    p = write_records(tmp_path / "r.tsv", recs)
    once = read_records(p)
    assert once == recs
    write_records(tmp_path / "r2.tsv", once)
    assert read_records(tmp_path / "r2.tsv") == once
    assert p.read_text().splitlines()[0] == "kind\tseverity\tmetric\tvalue"


# --------------------------------------------------------------------------- grad-cam


def _sample(cfg, comp):
    return WindowSample.from_composite(comp, cfg.window_size, cfg.frame_side)


def test_gradcam_shape_and_range(tiny_model, tiny_cfg):
    comp = np.random.default_rng(0).random((*tiny_cfg.composite_shape, 3)).astype(np.float32)
    maps = gradient_attention_map(tiny_model, _sample(tiny_cfg, comp), "lip")
    side = crop_side(tiny_cfg.frame_side, 0.45)
    assert len(maps) == tiny_cfg.window_size
    for m in maps:
        assert m.shape == (side, side)
        assert m.min() >= 0.0 and m.max() <= 1.0
    assert any(m.max() == 1.0 for m in maps)


def test_gradcam_constant_crop_is_uniform(tiny_model, tiny_cfg):
    comp = np.full((*tiny_cfg.composite_shape, 3), 0.4, np.float32)
    for scale in ("head", "face", "lip"):
        for m in gradient_attention_map(tiny_model, _sample(tiny_cfg, comp), scale):
            assert np.ptp(m) == 0.0


def test_gradcam_needs_autograd(tiny_model, tiny_cfg):
    comp = np.zeros((*tiny_cfg.composite_shape, 3), np.float32)
    with torch.no_grad(), pytest.raises(StateError):
        gradient_attention_map(tiny_model, _sample(tiny_cfg, comp))


def test_gradcam_frozen_backbone(tiny_cfg):
    from lipfd.model import LipFD

    model = LipFD(tiny_cfg.replace(freeze_backbone=True))
    model.mark_ready()
    comp = np.random.default_rng(1).random((*tiny_cfg.composite_shape, 3)).astype(np.float32)
    assert len(gradient_attention_map(model, _sample(tiny_cfg, comp), "face")) == 5


def test_heatmap_files(tmp_path, tiny_model, tiny_cfg):
    comp = np.random.default_rng(0).random((*tiny_cfg.composite_shape, 3)).astype(np.float32)
    s = WindowSample.from_composite(comp, 5, tiny_cfg.frame_side, clip_id="clip", start_frame=3)
    paths = write_heatmaps(tiny_model, s, tmp_path, scales=("lip",))
    assert [p.name for p in paths] == [f"clip_3_lip_{i}_heat.png" for i in range(5)]
    assert (tmp_path / "clip_3_lip_0.png").is_file() and (tmp_path / "clip_3_lip_0_overlay.png").is_file()


# --------------------------------------------------------------------------- sweep


def test_sweep_shape_and_identity(synth_cache, tiny_model):
    data = CompositeSet(synth_cache, "test")
    kinds = ("contrast", "gaussian_noise")
    res = robustness_sweep(tiny_model, data, kinds, seed=0, probes=[PerturbationSpec.probe("contrast", 1.0)])
    assert len(res.cells) == len(kinds) * 5
    assert set(res.kind_means()) == set(kinds)
    assert res.probes["contrast@1.0"] == res.clean_auc
    recs = res.records()
    assert len(recs) == 1 + 10 + 2 + 1
    assert "gaussian_noise" in res.table()


# --------------------------------------------------------------------------- synthetic benchmark


def _pearson(a, b):
    return float(np.corrcoef(a, b)[0, 1])


@pytest.mark.parametrize("label", [0, 1])
def test_generated_correlations(label):
    p = SynthParams(min_shift=0.4, max_shift=0.4)
    for seed in range(5):
        clip = generate_clip(np.random.default_rng(seed), label, p)
        n = len(clip["mouth"])
        r = _pearson(clip["mouth"], audio_frame_rms(clip["audio"], p.sample_rate, n, p.fps))
        if label == 0:
            assert r >= 0.95
        else:
            assert r <= 0.3 and abs(clip["shift"]) == pytest.approx(0.4)


def test_benchmark_written_files(tmp_path):
    p = SynthParams(duration=1.0, frame_size=48)
    manifest = synth_benchmark(6, tmp_path, T=5, seed=2, params=p)
    recs = load_manifest(manifest)
    assert [r.label for r in recs] == [0, 1] * 3
    for r in recs:
        meta = json.loads((r.frame_dir.parent / "meta.json").read_text())
        assert meta["label"] == r.label
        assert r.n_frames == 25
        audio, sr = read_audio(r.audio_path)
        rms = audio_frame_rms(audio, sr, r.n_frames, r.fps)
        # correlation recomputed from the files on disk (16-bit audio)
        r_disk = _pearson(meta["mouth"], rms)
        assert r_disk >= 0.94 if r.label == 0 else r_disk <= 0.32
        assert r.generator == ("original" if r.label == 0 else "synth-shift")


def test_benchmark_deterministic(tmp_path):
    p = SynthParams(duration=0.5, frame_size=32)
    a = synth_benchmark(4, tmp_path / "a", seed=9, params=p)
    b = synth_benchmark(4, tmp_path / "b", seed=9, params=p)
    files_a = sorted(x.relative_to(tmp_path / "a") for x in (tmp_path / "a").rglob("*") if x.is_file())
    files_b = sorted(x.relative_to(tmp_path / "b") for x in (tmp_path / "b").rglob("*") if x.is_file())
    assert files_a == files_b
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert a.name == b.name == "manifest.tsv"


def test_benchmark_rejects_odd_count(tmp_path):
    with pytest.raises(ValidationError):
        synth_benchmark(5, tmp_path)


def test_resample_mode(tmp_path):
    p = SynthParams(duration=1.0, frame_size=32, fake_mode="resample")
    recs = load_manifest(synth_benchmark(2, tmp_path, seed=0, params=p))
    assert recs[1].generator == "synth-resample"


def test_synth_cache_layout(synth_cache):
    rows = read_index(synth_cache)
    assert len(rows) == 16
    assert load_composite(synth_cache, rows[0].name).shape == (128, 320, 3)
