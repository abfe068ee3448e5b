"""`lipfd` command line: synth, preprocess, train, eval, perturb, sweep, viz.

Exit codes: 0 success, 2 validation error, 3 runtime / numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .avdata import WindowSample, expand_dataset, load_composite, load_manifest, read_index, write_cache
from .config import RunConfig, load_config
from .errors import LipFDError, ValidationError
from .evalkit.gradcam import write_heatmaps
from .evalkit.metrics import compute_metrics, format_report
from .evalkit.records import MetricRecord, write_records
from .evalkit.sweep import robustness_sweep
from .evalkit.synth import SynthParams, synth_benchmark
from .evalkit.weights import normalize_weights
from .model import load_checkpoint
from .perturb import KINDS, PerturbationSpec, perturb_cache, resolve
from .training import CompositeSet, fit, predict_set

log = logging.getLogger("lipfd")

RESOLVED_CONFIG = "resolved_config.yaml"


def cache_root() -> Path:
    return Path(os.environ.get("LIPFD_CACHE", Path.home() / ".cache" / "lipfd"))


def _out(path: str | None, default_name: str) -> Path:
    out = Path(path) if path else cache_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


# --------------------------------------------------------------------------- commands


def cmd_synth(n_clips: int, out_dir: str | Path, seed: int = 0, cfg: RunConfig | None = None,
              params: SynthParams | None = None) -> Path:
    cfg = cfg or RunConfig(seed=seed)
    out_dir = Path(out_dir)
    manifest = synth_benchmark(n_clips, out_dir, cfg.window_size, seed, params)
    cfg.replace(seed=seed, manifest=str(manifest)).save(out_dir / RESOLVED_CONFIG)
    return manifest


def cmd_preprocess(manifest: str | Path, out_dir: str | Path, cfg: RunConfig) -> Path:
    """Expand every clip `cfg.expand_factor` times and render the composite cache."""
    records = load_manifest(manifest)
    descriptors = expand_dataset(records, cfg.window_size, cfg.expand_factor, cfg.seed)
    index = write_cache(records, descriptors, out_dir, cfg)
    cfg.replace(manifest=str(manifest), cache_dir=str(out_dir)).save(Path(out_dir) / RESOLVED_CONFIG)
    return index


def cmd_train(cache_dir: str | Path, out_dir: str | Path, cfg: RunConfig, resume: str | Path | None = None) -> Path:
    _seed_everything(cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = cfg.replace(cache_dir=str(cache_dir), out_dir=str(out_dir))
    cfg.save(out_dir / RESOLVED_CONFIG)
    fit(cfg, cache_dir, out_dir, resume=resume)
    return out_dir / "checkpoint.pt"


def cmd_eval(checkpoint: str | Path, cache_dir: str | Path, out_dir: str | Path, threshold: float | None = None,
             split: str | None = "test") -> dict:
    model, _ = load_checkpoint(checkpoint)
    threshold = model.cfg.threshold if threshold is None else threshold
    data = CompositeSet(cache_dir, split)
    if len(data) == 0:
        raise ValidationError(f"no samples for split {split!r} in {cache_dir}")
    preds = predict_set(model, data)
    report = compute_metrics(preds, threshold)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    (out_dir / "metrics.txt").write_text(format_report(report))
    write_records(out_dir / "metrics.tsv", [
        MetricRecord("none", "clean", m, getattr(report, m)) for m in ("acc", "ap", "auc", "fpr", "fnr")
    ])
    with open(out_dir / "predictions.tsv", "w", encoding="utf-8") as fh:
        fh.write("sample_id\tprobability\tlabel\n")
        for i, p, y in zip(preds.ids, preds.probs, preds.labels):
            fh.write(f"{i}\t{p!r}\t{y}\n")
    model.cfg.replace(threshold=threshold, cache_dir=str(cache_dir), out_dir=str(out_dir)).save(out_dir / RESOLVED_CONFIG)
    return report.as_dict()


def cmd_perturb(cache_dir: str | Path, out_dir: str | Path, kind: str, severity: int | None, cfg: RunConfig,
                param: float | None = None) -> Path:
    spec = PerturbationSpec.probe(kind, param) if param is not None else resolve(kind, severity)
    out = perturb_cache(cache_dir, out_dir, spec, cfg.window_size, cfg.frame_side, cfg.seed)
    cfg.replace(cache_dir=str(cache_dir), out_dir=str(out_dir)).save(Path(out_dir) / RESOLVED_CONFIG)
    return out


def cmd_sweep(checkpoint: str | Path, cache_dir: str | Path, out_dir: str | Path, kinds=KINDS,
              severities=(1, 2, 3, 4, 5), split: str | None = "test", seed: int = 0, identity_probe: bool = True):
    model, _ = load_checkpoint(checkpoint)
    data = CompositeSet(cache_dir, split)
    probes = [PerturbationSpec.probe("contrast", 1.0)] if identity_probe else []
    result = robustness_sweep(model, data, kinds, severities, seed, model.cfg.threshold, probes)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records(out_dir / "robustness.tsv", result.records())
    (out_dir / "robustness.txt").write_text(result.table())
    model.cfg.replace(cache_dir=str(cache_dir), out_dir=str(out_dir), seed=seed).save(out_dir / RESOLVED_CONFIG)
    return result


def cmd_viz(checkpoint: str | Path, cache_dir: str | Path, name: str, out_dir: str | Path,
            scales=("head", "face", "lip")) -> list[Path]:
    model, _ = load_checkpoint(checkpoint)
    rows = {r.name: r for r in read_index(cache_dir)}
    if name not in rows:
        raise ValidationError(f"{name!r} not in cache index")
    row = rows[name]
    cfg = model.cfg
    sample = WindowSample.from_composite(load_composite(cache_dir, name), cfg.window_size, cfg.frame_side,
                                         row.label, row.clip_id, row.start_frame)
    paths = write_heatmaps(model, sample, out_dir, scales)
    prob, stack = model.predict(sample)
    report = normalize_weights(stack, [name])
    (Path(out_dir) / f"{name}_weights.json").write_text(json.dumps(
        dict(probability=prob, label=row.label, **next(report.rows())), indent=2))
    cfg.replace(cache_dir=str(cache_dir), out_dir=str(out_dir)).save(Path(out_dir) / RESOLVED_CONFIG)
    return paths


# --------------------------------------------------------------------------- argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML key: value file (may set `preset: tiny`)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default under $LIPFD_CACHE)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipfd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic real/desynchronised benchmark")
    _common(p)
    p.add_argument("--n-clips", type=int, default=400)
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--frame-size", type=int, default=96)
    p.add_argument("--fake-mode", choices=("shift", "resample"), default="shift")

    p = sub.add_parser("preprocess", help="expand a manifest into a composite cache")
    _common(p)
    p.add_argument("manifest")
    p.add_argument("--factor", type=int, help="windows drawn per clip")
    p.add_argument("--window-size", type=int)

    p = sub.add_parser("train", help="train on a composite cache")
    _common(p)
    p.add_argument("cache")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="metrics of a checkpoint on a cache split")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("cache")
    p.add_argument("--threshold", type=float)
    p.add_argument("--split", default="test", help="train/val/test or 'all'")

    p = sub.add_parser("perturb", help="write a corrupted mirror of a cache")
    _common(p)
    p.add_argument("cache")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--severity", type=int, choices=range(1, 6))
    p.add_argument("--param", type=float, help="out-of-table parameter instead of a severity")

    p = sub.add_parser("sweep", help="AUC under every perturbation kind and severity")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("cache")
    p.add_argument("--kinds", nargs="+", choices=KINDS, default=list(KINDS))
    p.add_argument("--severities", nargs="+", type=int, choices=range(1, 6), default=[1, 2, 3, 4, 5])
    p.add_argument("--split", default="test")

    p = sub.add_parser("viz", help="gradient attention maps and region weights for one cached window")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("cache")
    p.add_argument("--name", required=True, help="composite name, {clip_id}_{start_frame}")
    p.add_argument("--scales", nargs="+", choices=("head", "face", "lip"), default=["head", "face", "lip"])
    return parser


def _split(value: str) -> str | None:
    return None if value == "all" else value


def run(args: argparse.Namespace) -> None:
    cmd = args.command
    if cmd == "synth":
        cfg = load_config(args.config, seed=args.seed)
        params = SynthParams(duration=args.duration, frame_size=args.frame_size, fake_mode=args.fake_mode)
        path = cmd_synth(args.n_clips, _out(args.out, "synth"), cfg.seed, cfg, params)
        print(path)
    elif cmd == "preprocess":
        cfg = load_config(args.config, seed=args.seed, expand_factor=args.factor, window_size=args.window_size)
        print(cmd_preprocess(args.manifest, _out(args.out, "composites"), cfg))
    elif cmd == "train":
        cfg = load_config(args.config, seed=args.seed, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size)
        print(cmd_train(args.cache, _out(args.out, "run"), cfg, resume=args.resume))
    elif cmd == "eval":
        report = cmd_eval(args.checkpoint, args.cache, _out(args.out, "eval"), args.threshold, _split(args.split))
        print(json.dumps(report, indent=2, sort_keys=True))
    elif cmd == "perturb":
        if (args.severity is None) == (args.param is None):
            raise ValidationError("give exactly one of --severity or --param")
        cfg = load_config(args.config, seed=args.seed)
        print(cmd_perturb(args.cache, _out(args.out, "perturbed"), args.kind, args.severity, cfg, args.param))
    elif cmd == "sweep":
        result = cmd_sweep(args.checkpoint, args.cache, _out(args.out, "sweep"), args.kinds, args.severities,
                           _split(args.split), args.seed or 0)
        print(result.table(), end="")
    elif cmd == "viz":
        for p in cmd_viz(args.checkpoint, args.cache, args.name, _out(args.out, "viz"), args.scales):
            print(p)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except ValidationError as exc:
        print(f"lipfd {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (LipFDError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"lipfd {args.command}: failed: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
