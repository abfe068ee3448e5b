"""Desk-scale synthetic talking-head benchmark.

Every clip is a cartoon face whose mouth opening follows a syllable-like
amplitude envelope. Real clips drive the mouth with the same envelope that
modulates the audio; fake clips drive it with the envelope shifted in time
(or time-resampled), i.e. a pure audio-visual desynchronisation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..avdata import ClipRecord, write_audio, write_manifest
from ..errors import ValidationError

CONTROL_RATE = 1000  # envelope samples per second


@dataclass
class SynthParams:
    fps: float = 25.0
    duration: float = 3.0
    frame_size: int = 96
    sample_rate: int = 16000
    min_shift: float = 0.4
    max_shift: float = 0.8
    fake_mode: str = "shift"  # or "resample"
    split_fractions: tuple = (0.7, 0.1, 0.2)
    noise_level: float = 0.003
    syllable_range: tuple = (0.06, 0.18)
    gap_range: tuple = (0.06, 0.18)
    max_real_corr_tries: int = 200


def syllable_envelope(rng: np.random.Generator, t0: float, t1: float, syllable_range=(0.06, 0.18),
                      gap_range=(0.06, 0.18)) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise syllables with random levels separated by short silences, 15 ms ramps."""
    times = np.arange(int(round((t1 - t0) * CONTROL_RATE))) / CONTROL_RATE + t0
    env = np.zeros_like(times)
    t = t0 + rng.uniform(0.0, 0.15)
    while t < t1:
        length = rng.uniform(*syllable_range)
        level = rng.uniform(0.35, 1.0)
        env[(times >= t) & (times < t + length)] = level
        t += length + rng.uniform(*gap_range)
    ramp = np.hanning(int(0.015 * CONTROL_RATE) * 2 + 1)
    env = np.convolve(env, ramp / ramp.sum(), mode="same")
    return times, env


def frame_means(times: np.ndarray, env: np.ndarray, n_frames: int, fps: float, offset: float = 0.0,
                rate: float = 1.0) -> np.ndarray:
    """Mean envelope over each frame period, read at time offset + rate * t."""
    out = np.empty(n_frames)
    for f in range(n_frames):
        ts = offset + rate * (f + (np.arange(8) + 0.5) / 8) / fps
        out[f] = np.interp(ts, times, env).mean()
    return out


def voice(rng: np.random.Generator, times_audio: np.ndarray) -> np.ndarray:
    f0 = rng.uniform(110.0, 220.0)
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(4, 6) * times_audio)
    phase = 2 * np.pi * f0 * np.cumsum(vibrato) / (1.0 / (times_audio[1] - times_audio[0]))
    return sum((0.6 ** h) * np.sin((h + 1) * phase + rng.uniform(0, 2 * np.pi)) for h in range(6))


def audio_frame_rms(audio: np.ndarray, sample_rate: int, n_frames: int, fps: float) -> np.ndarray:
    bounds = (np.arange(n_frames + 1) * sample_rate / fps).round().astype(int)
    return np.array([np.sqrt(np.mean(audio[a:b] ** 2)) for a, b in zip(bounds[:-1], bounds[1:])])


def _soft_ellipse(xx, yy, cx, cy, ax, ay):
    d = np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2)
    return np.clip(0.5 - (d - 1.0) * min(ax, ay), 0.0, 1.0)[..., None]


class FaceRenderer:
    """Static cartoon face on a noise background; only the mouth height changes per frame."""

    def __init__(self, rng: np.random.Generator, size: int):
        self.size = size
        s = size
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
        self.xx, self.yy = xx, yy
        bg = rng.uniform(0.1, 0.6, size=3) + 0.08 * rng.standard_normal((s, s, 3))
        cx = s * (0.5 + rng.uniform(-0.02, 0.02))
        cy = s * (0.5 + rng.uniform(-0.02, 0.02))
        skin = np.array([0.85, 0.65, 0.5]) + rng.uniform(-0.08, 0.08, size=3)
        img = bg
        img = img * (1 - (m := _soft_ellipse(xx, yy, cx, cy, 0.3 * s, 0.38 * s))) + skin * m
        for ex in (-0.11, 0.11):
            m = _soft_ellipse(xx, yy, cx + ex * s, cy - 0.1 * s, 0.045 * s, 0.03 * s)
            img = img * (1 - m) + np.array([0.1, 0.1, 0.15]) * m
        self.base = np.clip(img, 0.0, 1.0)
        self.mouth = (cx, cy + 0.18 * s, 0.13 * s)
        self.lip_color = np.array([0.55, 0.12, 0.15])
        self.inner_color = np.array([0.12, 0.02, 0.04])

    def render(self, opening: float) -> np.ndarray:
        """opening in [0, 1] maps to a mouth half-height of 1..11 % of the frame."""
        s = self.size
        mx, my, half_w = self.mouth
        half_h = s * (0.01 + 0.10 * opening)
        lips = _soft_ellipse(self.xx, self.yy, mx, my, half_w, half_h + 0.02 * s)
        inner = _soft_ellipse(self.xx, self.yy, mx, my, 0.8 * half_w, half_h)
        img = self.base * (1 - lips) + self.lip_color * lips
        img = img * (1 - inner) + self.inner_color * inner
        return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def _pearson(a, b) -> float:
    a, b = a - a.mean(), b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def _split_assignment(rng, n: int, fractions) -> list[str]:
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    names = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    order = rng.permutation(n)
    out = [""] * n
    for slot, idx in enumerate(order):
        out[idx] = names[slot]
    return out


def generate_clip(rng: np.random.Generator, label: int, p: SynthParams) -> dict:
    n_frames = int(round(p.duration * p.fps))
    margin = p.max_shift * 2 + 0.5
    for _ in range(p.max_real_corr_tries):
        times, env = syllable_envelope(rng, -margin, p.duration + margin, p.syllable_range, p.gap_range)
        t_audio = np.arange(int(round(p.duration * p.sample_rate))) / p.sample_rate
        audio_env = np.interp(t_audio, times, env)
        audio = 0.5 * audio_env * voice(rng, t_audio) / 2.5
        audio = audio + p.noise_level * rng.standard_normal(audio.size)
        shift, rate = 0.0, 1.0
        if label == 1:
            if p.fake_mode == "shift":
                shift = rng.choice([-1.0, 1.0]) * rng.uniform(p.min_shift, p.max_shift)
            elif p.fake_mode == "resample":
                rate = rng.uniform(1.3, 1.7)
            else:
                raise ValidationError(f"unknown fake_mode {p.fake_mode!r}")
        mouth = frame_means(times, env, n_frames, p.fps, offset=shift, rate=rate)
        rms = audio_frame_rms(audio, p.sample_rate, n_frames, p.fps)
        r = _pearson(mouth, rms)
        if (label == 0 and r >= 0.95) or (label == 1 and r <= 0.3):
            return dict(audio=audio, mouth=mouth, shift=shift, rate=rate, corr=r)
    raise RuntimeError("could not draw a clip satisfying the synchronisation constraints")


def synth_benchmark(n_clips: int, out_dir: str | Path, T: int = 5, seed: int = 0,
                    params: SynthParams | None = None) -> Path:
    """Write a balanced synthetic dataset and its manifest; returns the manifest path."""
    p = params or SynthParams()
    if n_clips < 2 or n_clips % 2:
        raise ValidationError(f"n_clips must be a positive even number, got {n_clips}")
    if int(round(p.duration * p.fps)) < T:
        raise ValidationError("clips are shorter than the window size")
    out_dir = Path(out_dir)
    clip_root = out_dir / "clips"
    clip_root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = [i % 2 for i in range(n_clips)]
    splits = {lab: iter(_split_assignment(rng, n_clips // 2, p.split_fractions)) for lab in (0, 1)}
    records = []
    for i, label in enumerate(labels):
        clip_rng = np.random.default_rng([seed, i])
        clip_id = f"synth{i:05d}"
        cdir = clip_root / clip_id
        fdir = cdir / "frames"
        fdir.mkdir(parents=True, exist_ok=True)
        clip = generate_clip(clip_rng, label, p)
        renderer = FaceRenderer(clip_rng, p.frame_size)
        for f, opening in enumerate(clip["mouth"]):
            Image.fromarray(renderer.render(opening)).save(fdir / f"{f:05d}.png", format="PNG")
        write_audio(cdir / "audio.wav", clip["audio"], p.sample_rate)
        meta = dict(clip_id=clip_id, label=label, shift=clip["shift"], rate=clip["rate"], corr=clip["corr"],
                    mouth=[float(m) for m in clip["mouth"]], fps=p.fps, sample_rate=p.sample_rate)
        (cdir / "meta.json").write_text(json.dumps(meta, sort_keys=True))
        records.append(ClipRecord(
            clip_id=clip_id,
            frame_dir=fdir.resolve(),
            audio_path=(cdir / "audio.wav").resolve(),
            label=label,
            generator="original" if label == 0 else f"synth-{p.fake_mode}",
            split=next(splits[label]),
            fps=p.fps,
            sample_rate=p.sample_rate,
        ))
    return write_manifest(records, out_dir / "manifest.tsv")
