#!/usr/bin/env python3
"""Synthetic benchmark end to end through the CLI: synth, preprocess, train, eval, sweep.

    python scripts/desk_benchmark.py --root /tmp/desk --seed 0
"""

import argparse
import json
import time
from pathlib import Path

from lipfd.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "tiny.yaml"


def stage(name, argv, timings):
    t0 = time.perf_counter()
    code = main(argv)
    timings[name] = round(time.perf_counter() - t0, 1)
    if code != 0:
        raise SystemExit(f"{name} exited with {code}")


def run(root: Path, seed: int, n_clips: int, sweep: bool) -> dict:
    cfg = ["--config", str(CONFIG), "--seed", str(seed)]
    timings = {}
    stage("synth", ["synth", *cfg, "--n-clips", str(n_clips), "--out", str(root / "synth")], timings)
    stage("preprocess", ["preprocess", str(root / "synth" / "manifest.tsv"), *cfg, "--factor", "5",
                         "--window-size", "5", "--out", str(root / "cache")], timings)
    stage("train", ["train", str(root / "cache"), *cfg, "--out", str(root / "run")], timings)
    stage("eval", ["eval", str(root / "run" / "checkpoint.pt"), str(root / "cache"), "--out", str(root / "eval")],
          timings)
    if sweep:
        stage("sweep", ["sweep", str(root / "run" / "checkpoint.pt"), str(root / "cache"), "--seed", str(seed),
                        "--out", str(root / "sweep")], timings)
    metrics = json.loads((root / "eval" / "metrics.json").read_text())
    return dict(auc=metrics["auc"], acc=metrics["acc"], ap=metrics["ap"], seconds=timings)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-clips", type=int, default=400)
    ap.add_argument("--no-sweep", action="store_true")
    args = ap.parse_args()
    summary = run(args.root, args.seed, args.n_clips, not args.no_sweep)
    print(json.dumps(summary, indent=2))
    if not args.no_sweep:
        print((args.root / "sweep" / "robustness.txt").read_text(), end="")
