#!/usr/bin/env python3
"""Decode a video into the clip layout the manifest expects and print its manifest line.

    python scripts/extract_clip.py talk.mp4 clips/ --label real --split test

Writes clips/<clip_id>/frames/00000.png ... and clips/<clip_id>/audio.wav
(mono 16 kHz PCM). Needs an ffmpeg binary on PATH, in $LIPFD_FFMPEG, or
from imageio-ffmpeg.
"""

import argparse
import subprocess
import sys
from pathlib import Path

from lipfd.avdata import ClipRecord
from lipfd.perturb import ffmpeg_executable


def probe_fps(exe: str, video: Path) -> float:
    # ffmpeg prints stream info on stderr; pick the "NN fps" token
    info = subprocess.run([exe, "-hide_banner", "-i", str(video)], capture_output=True, text=True).stderr
    for token in info.replace(",", " ,").split(" ,"):
        token = token.strip()
        if token.endswith(" fps"):
            return float(token[:-4])
    raise SystemExit(f"could not determine frame rate of {video}")


def extract(video: Path, out_root: Path, clip_id: str, label: int, split: str, generator: str,
            side: int, sample_rate: int) -> ClipRecord:
    exe = ffmpeg_executable()
    if exe is None:
        raise SystemExit("no ffmpeg found; install imageio-ffmpeg or set LIPFD_FFMPEG")
    fps = probe_fps(exe, video)
    clip_dir = out_root / clip_id
    frames = clip_dir / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    vf = f"scale={side}:{side}:force_original_aspect_ratio=increase,crop={side}:{side}"
    subprocess.run([exe, "-v", "error", "-y", "-i", str(video), "-vf", vf, "-start_number", "0",
                    str(frames / "%05d.png")], check=True)
    subprocess.run([exe, "-v", "error", "-y", "-i", str(video), "-vn", "-ac", "1", "-ar", str(sample_rate),
                    "-c:a", "pcm_s16le", str(clip_dir / "audio.wav")], check=True)
    return ClipRecord(clip_id, frames.resolve(), (clip_dir / "audio.wav").resolve(), label, generator, split,
                      fps, sample_rate)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("video", type=Path)
    ap.add_argument("out_root", type=Path)
    ap.add_argument("--clip-id")
    ap.add_argument("--label", choices=("real", "fake"), required=True)
    ap.add_argument("--split", choices=("train", "val", "test"), default="train")
    ap.add_argument("--generator", default="original")
    ap.add_argument("--side", type=int, default=224)
    ap.add_argument("--sample-rate", type=int, default=16000)
    args = ap.parse_args()
    rec = extract(args.video, args.out_root, args.clip_id or args.video.stem, int(args.label == "fake"),
                  args.split, args.generator, args.side, args.sample_rate)
    sys.stdout.write(rec.to_line() + "\n")
