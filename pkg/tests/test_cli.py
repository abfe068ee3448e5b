import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from lipfd.avdata import INDEX_NAME, read_index, write_index
from lipfd.cli import main
from lipfd.config import RunConfig, load_config, tiny_config
from lipfd.errors import ConfigError
from lipfd.evalkit.records import read_records
from lipfd.model import LipFD, load_checkpoint

ROOT = Path(__file__).resolve().parent.parent
TINY_YAML = ROOT / "configs" / "tiny.yaml"


@pytest.fixture
def tiny_yaml(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text("preset: tiny\nseed: 0\n")
    return p


def _resolved(out):
    return yaml.safe_load((Path(out) / "resolved_config.yaml").read_text())


# --------------------------------------------------------------------------- config


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("window_size: 5\nwindow_sise: 7\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_preset_and_overrides(tiny_yaml):
    cfg = load_config(tiny_yaml, epochs=3, lr=None)
    assert cfg.backbone == "tiny" and cfg.epochs == 3 and cfg.lr == tiny_config().lr


def test_config_round_trip(tmp_path):
    cfg = tiny_config(seed=4, crop_ratios=(1.0, 0.6, 0.4))
    cfg.save(tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    assert set(yaml.safe_load((tmp_path / "c.yaml").read_text())) == set(RunConfig().to_dict())


def test_shipped_configs_load():
    assert load_config(TINY_YAML).expand_factor == 5
    assert load_config(ROOT / "configs" / "default.yaml") == RunConfig()


def test_invalid_values():
    with pytest.raises(ConfigError):
        RunConfig(k=0)
    with pytest.raises(ConfigError):
        RunConfig(anchor_mode="tracked")


# --------------------------------------------------------------------------- synth / preprocess


def test_synth_balanced_and_deterministic(tmp_path, tiny_yaml):
    for name in ("a", "b"):
        assert main(["synth", "--config", str(tiny_yaml), "--n-clips", "4", "--duration", "0.6",
                     "--frame-size", "32", "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "manifest.tsv").read_text()
    assert a == (tmp_path / "b" / "manifest.tsv").read_text()
    labels = [line.split("label=")[1].split("\t")[0] for line in a.splitlines()]
    assert labels.count("real") == labels.count("fake") == 2
    assert _resolved(tmp_path / "a")["seed"] == 0


def test_env_cache_root(tmp_path, monkeypatch, tiny_yaml):
    monkeypatch.setenv("LIPFD_CACHE", str(tmp_path / "cache_root"))
    assert main(["synth", "--config", str(tiny_yaml), "--n-clips", "2", "--duration", "0.4",
                 "--frame-size", "32"]) == 0
    assert (tmp_path / "cache_root" / "synth" / "manifest.tsv").is_file()


def test_preprocess_empty_manifest(tmp_path, tiny_yaml):
    (tmp_path / "m.tsv").write_text("")
    assert main(["preprocess", str(tmp_path / "m.tsv"), "--config", str(tiny_yaml), "--out", str(tmp_path / "c")]) == 0
    assert read_index(tmp_path / "c") == []


def test_preprocess_counts_and_rerun(tmp_path, tiny_yaml, clip_factory, manifest_factory):
    manifest = manifest_factory([clip_factory(n_frames=20, side=64)])
    argv = ["preprocess", str(manifest), "--config", str(tiny_yaml), "--factor", "10"]
    assert main([*argv, "--out", str(tmp_path / "c1")]) == 0
    assert main([*argv, "--out", str(tmp_path / "c2")]) == 0
    rows = read_index(tmp_path / "c1")
    assert len(rows) == 10 and len(list((tmp_path / "c1").glob("*.png"))) == 10
    assert (tmp_path / "c1" / INDEX_NAME).read_bytes() == (tmp_path / "c2" / INDEX_NAME).read_bytes()
    assert _resolved(tmp_path / "c1")["expand_factor"] == 10


def test_preprocess_bad_manifest_exit_2(tmp_path, tiny_yaml, capsys):
    (tmp_path / "m.tsv").write_text("clip_id=x\n")
    assert main(["preprocess", str(tmp_path / "m.tsv"), "--config", str(tiny_yaml), "--out", str(tmp_path / "c")]) == 2
    assert "m.tsv:1" in capsys.readouterr().err


def test_unknown_config_key_exit_2(tmp_path):
    (tmp_path / "c.yaml").write_text("bogus: 1\n")
    assert main(["synth", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "s")]) == 2


def test_runtime_error_exit_3(tmp_path, synth_cache):
    assert main(["eval", str(tmp_path / "missing.pt"), str(synth_cache), "--out", str(tmp_path / "e")]) == 3


# --------------------------------------------------------------------------- train / eval


@pytest.fixture(scope="module")
def overfit_run(synth_cache, tmp_path_factory):
    out = tmp_path_factory.mktemp("overfit")
    cfg = out / "c.yaml"
    cfg.write_text("preset: tiny\nseed: 0\n")
    assert main(["train", str(synth_cache), "--config", str(cfg), "--epochs", "120", "--out", str(out / "run")]) == 0
    return out / "run"


def test_train_outputs(overfit_run):
    lines = (overfit_run / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 120
    assert _resolved(overfit_run)["epochs"] == 120
    _, payload = load_checkpoint(overfit_run / "checkpoint.pt")
    assert payload["epoch"] == 120 and payload["step"] == json.loads(lines[-1])["step"]


def test_eval_overfit_train_split(overfit_run, synth_cache, tmp_path):
    assert main(["eval", str(overfit_run / "checkpoint.pt"), str(synth_cache), "--split", "train",
                 "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert report["acc"] >= 0.99
    assert (tmp_path / "resolved_config.yaml").is_file()
    assert len((tmp_path / "predictions.tsv").read_text().splitlines()) == 1 + report["n_pos"] + report["n_neg"]


def test_threshold_changes_only_thresholded(overfit_run, synth_cache, tmp_path):
    out = {}
    for thr in ("0.5", "0.999999"):
        main(["eval", str(overfit_run / "checkpoint.pt"), str(synth_cache), "--split", "all", "--threshold", thr,
              "--out", str(tmp_path / thr)])
        out[thr] = json.loads((tmp_path / thr / "metrics.json").read_text())
    a, b = out["0.5"], out["0.999999"]
    assert (a["ap"], a["auc"]) == (b["ap"], b["auc"])
    assert (a["acc"], a["fnr"]) != (b["acc"], b["fnr"])


def test_eval_single_class(overfit_run, synth_cache, tmp_path):
    reals = tmp_path / "reals"
    reals.mkdir()
    rows = [r for r in read_index(synth_cache) if r.label == 0]
    for r in rows:
        shutil.copy(synth_cache / f"{r.name}.png", reals)
    write_index(reals / INDEX_NAME, [r._asdict() for r in rows])
    assert main(["eval", str(overfit_run / "checkpoint.pt"), str(reals), "--split", "all",
                 "--out", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert report["ap"] is None and report["auc"] is None
    assert {"ap", "auc", "fnr"} <= set(report["undefined"])


def test_lr_zero_keeps_initial_parameters(synth_cache, tmp_path, tiny_yaml):
    assert main(["train", str(synth_cache), "--config", str(tiny_yaml), "--epochs", "2", "--lr", "0",
                 "--out", str(tmp_path)]) == 0
    trained, _ = load_checkpoint(tmp_path / "checkpoint.pt")
    torch.manual_seed(0)
    fresh = LipFD(tiny_config(seed=0))
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, trained.state_dict()[k]), k


def test_resume_continues_step_counter(synth_cache, tmp_path, tiny_yaml):
    assert main(["train", str(synth_cache), "--config", str(tiny_yaml), "--epochs", "2", "--out", str(tmp_path)]) == 0
    _, first = load_checkpoint(tmp_path / "checkpoint.pt")
    assert main(["train", str(synth_cache), "--config", str(tiny_yaml), "--epochs", "4",
                 "--resume", str(tmp_path / "checkpoint.pt"), "--out", str(tmp_path)]) == 0
    _, second = load_checkpoint(tmp_path / "checkpoint.pt")
    assert second["epoch"] == 4 and second["step"] == 2 * first["step"]
    epochs = [json.loads(line)["epoch"] for line in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert epochs == [1, 2, 3, 4]


def test_resume_matches_uninterrupted(synth_cache, tmp_path, tiny_yaml):
    main(["train", str(synth_cache), "--config", str(tiny_yaml), "--epochs", "3", "--out", str(tmp_path / "full")])
    main(["train", str(synth_cache), "--config", str(tiny_yaml), "--epochs", "1", "--out", str(tmp_path / "part")])
    main(["train", str(synth_cache), "--config", str(tiny_yaml), "--epochs", "3",
          "--resume", str(tmp_path / "part" / "checkpoint.pt"), "--out", str(tmp_path / "part")])
    a, _ = load_checkpoint(tmp_path / "full" / "checkpoint.pt")
    b, _ = load_checkpoint(tmp_path / "part" / "checkpoint.pt")
    for k, v in a.state_dict().items():
        assert torch.allclose(v, b.state_dict()[k], atol=1e-6), k


def test_train_needs_both_classes(tmp_path, tiny_yaml, synth_cache):
    reals = tmp_path / "reals"
    reals.mkdir()
    rows = [r for r in read_index(synth_cache) if r.label == 0]
    for r in rows:
        shutil.copy(synth_cache / f"{r.name}.png", reals)
    write_index(reals / INDEX_NAME, [r._asdict() for r in rows])
    assert main(["train", str(reals), "--config", str(tiny_yaml), "--out", str(tmp_path / "r")]) == 2


# --------------------------------------------------------------------------- perturb / sweep / viz


def test_perturb_command(synth_cache, tmp_path, tiny_yaml):
    assert main(["perturb", str(synth_cache), "--config", str(tiny_yaml), "--kind", "pixelation", "--severity", "2",
                 "--out", str(tmp_path / "p")]) == 0
    assert len(list((tmp_path / "p").glob("*.png"))) == len(read_index(synth_cache))
    assert main(["perturb", str(synth_cache), "--config", str(tiny_yaml), "--kind", "contrast", "--param", "1.0",
                 "--out", str(tmp_path / "q")]) == 0
    name = read_index(synth_cache)[0].name
    assert (tmp_path / "q" / f"{name}.png").read_bytes() == (synth_cache / f"{name}.png").read_bytes()
    assert main(["perturb", str(synth_cache), "--kind", "contrast", "--out", str(tmp_path / "r")]) == 2


def test_sweep_command(overfit_run, synth_cache, tmp_path):
    assert main(["sweep", str(overfit_run / "checkpoint.pt"), str(synth_cache), "--kinds", "gaussian_noise",
                 "contrast", "--split", "all", "--out", str(tmp_path)]) == 0
    recs = read_records(tmp_path / "robustness.tsv")
    cells = [r for r in recs if r.severity in {"1", "2", "3", "4", "5"}]
    assert len(cells) == 2 * 5
    clean = next(r.value for r in recs if r.severity == "clean")
    assert next(r.value for r in recs if r.kind == "probe") == clean
    assert (tmp_path / "robustness.txt").is_file() and (tmp_path / "resolved_config.yaml").is_file()


def test_viz_command(overfit_run, synth_cache, tmp_path):
    name = read_index(synth_cache)[0].name
    assert main(["viz", str(overfit_run / "checkpoint.pt"), str(synth_cache), "--name", name, "--scales", "lip",
                 "--out", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*_heat.png"))) == 5
    weights = json.loads((tmp_path / f"{name}_weights.json").read_text())
    assert weights["head"] + weights["face"] + weights["lip"] == pytest.approx(1.0)
    assert main(["viz", str(overfit_run / "checkpoint.pt"), str(synth_cache), "--name", "nope",
                 "--out", str(tmp_path)]) == 2
