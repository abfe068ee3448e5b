"""Clip ingestion, spectrograms, window assembly, dataset expansion and the composite cache."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage, signal
from scipy.io import wavfile

from .config import RunConfig
from .errors import ManifestParseError, MissingMediaError, ValidationError, WindowRangeError

MANIFEST_KEYS = ("clip_id", "frame_dir", "audio_path", "label", "generator", "split", "fps", "sample_rate")
LABELS = {"real": 0, "fake": 1, "0": 0, "1": 1}
SPLITS = ("train", "val", "test")
INDEX_NAME = "index.tsv"
INDEX_FIELDS = ("name", "label", "clip_id", "start_frame", "split", "generator")


# --------------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    frame_dir: Path
    audio_path: Path
    label: int
    generator: str
    split: str
    fps: float
    sample_rate: int

    @cached_property
    def frame_paths(self) -> list[Path]:
        return list_frames(self.frame_dir)

    @property
    def n_frames(self) -> int:
        return len(self.frame_paths)

    def to_line(self, relative_to: Path | None = None) -> str:
        def rel(p: Path) -> str:
            if relative_to is not None:
                try:
                    return str(p.relative_to(relative_to))
                except ValueError:
                    pass
            return str(p)

        values = dict(
            clip_id=self.clip_id,
            frame_dir=rel(self.frame_dir),
            audio_path=rel(self.audio_path),
            label="fake" if self.label else "real",
            generator=self.generator,
            split=self.split,
            fps=repr(float(self.fps)),
            sample_rate=str(int(self.sample_rate)),
        )
        return "\t".join(f"{k}={values[k]}" for k in MANIFEST_KEYS)


def list_frames(frame_dir: Path) -> list[Path]:
    """PNG frames in numeric order of their (zero-padded) stems."""
    frames = [p for p in Path(frame_dir).glob("*.png")]
    try:
        return sorted(frames, key=lambda p: int(p.stem))
    except ValueError as exc:
        raise ValidationError(f"{frame_dir}: frame files must have numeric names") from exc


def _parse_line(path: Path, line_no: int, line: str, base: Path) -> ClipRecord:
    fields_: dict[str, str] = {}
    for part in line.split("\t"):
        if "=" not in part:
            raise ManifestParseError(path, line_no, f"expected key=value, got {part!r}")
        key, value = part.split("=", 1)
        if key in fields_:
            raise ManifestParseError(path, line_no, f"duplicate key {key!r}")
        fields_[key] = value
    if set(fields_) != set(MANIFEST_KEYS):
        missing = sorted(set(MANIFEST_KEYS) - set(fields_))
        extra = sorted(set(fields_) - set(MANIFEST_KEYS))
        raise ManifestParseError(path, line_no, f"missing keys {missing}, unexpected keys {extra}")
    label = LABELS.get(fields_["label"].strip().lower())
    if label is None:
        raise ManifestParseError(path, line_no, f"label must be real/fake/0/1, got {fields_['label']!r}")
    if fields_["split"] not in SPLITS:
        raise ManifestParseError(path, line_no, f"split must be one of {SPLITS}")
    try:
        fps = float(fields_["fps"])
        sample_rate = int(fields_["sample_rate"])
    except ValueError as exc:
        raise ManifestParseError(path, line_no, str(exc)) from exc
    if not (fps > 0 and math.isfinite(fps)) or sample_rate <= 0:
        raise ManifestParseError(path, line_no, "fps and sample_rate must be positive")
    return ClipRecord(
        clip_id=fields_["clip_id"],
        frame_dir=(base / fields_["frame_dir"]).resolve(),
        audio_path=(base / fields_["audio_path"]).resolve(),
        label=label,
        generator=fields_["generator"],
        split=fields_["split"],
        fps=fps,
        sample_rate=sample_rate,
    )


def load_manifest(path: str | Path) -> list[ClipRecord]:
    """Parse a tab-separated key=value manifest. Relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    records: list[ClipRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            rec = _parse_line(path, line_no, line, base)
            if rec.clip_id in seen:
                raise ManifestParseError(path, line_no, f"duplicate clip_id {rec.clip_id!r}")
            seen.add(rec.clip_id)
            records.append(rec)
    missing = [r.clip_id for r in records if not r.frame_dir.is_dir() or not r.audio_path.is_file()]
    if missing:
        raise MissingMediaError(missing)
    return records


def write_manifest(records: Iterable[ClipRecord], path: str | Path) -> Path:
    path = Path(path)
    base = path.parent.resolve()
    lines = [r.to_line(relative_to=base) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


# --------------------------------------------------------------------------- audio


def read_audio(path: str | Path) -> tuple[np.ndarray, int]:
    """Mono float64 waveform in [-1, 1] and its sample rate."""
    sr, data = wavfile.read(str(path))
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return data, int(sr)


def write_audio(path: str | Path, audio: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(audio) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), int(sample_rate), pcm)


def resample(audio: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return np.asarray(audio, dtype=np.float64)
    g = math.gcd(int(sr_in), int(sr_out))
    return signal.resample_poly(audio, sr_out // g, sr_in // g)


def _check_waveform(audio) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise ValidationError(f"expected a mono waveform, got shape {audio.shape}")
    if not np.all(np.isfinite(audio)):
        raise ValidationError("waveform contains NaN or infinite samples")
    return audio


@dataclass(frozen=True)
class SpectrogramParams:
    sample_rate: int = 16000
    n_mels: int = 64
    window_s: float = 0.025
    hop_s: float = 0.010
    log_floor: float = 1e-10

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SpectrogramParams":
        return cls(cfg.sample_rate, cfg.n_mels, cfg.fft_window_s, cfg.hop_s, cfg.log_floor)

    @property
    def win_length(self) -> int:
        return int(round(self.window_s * self.sample_rate))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_s * self.sample_rate))

    @property
    def n_fft(self) -> int:
        return 1 << (self.win_length - 1).bit_length()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular HTK-mel filters over [0, sr/2], shape (n_mels, n_fft // 2 + 1)."""
    mel_pts = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    lower, center, upper = hz_pts[:-2, None], hz_pts[1:-1, None], hz_pts[2:, None]
    up = (fft_freqs[None, :] - lower) / (center - lower)
    down = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(up, down))


@dataclass
class Spectrogram:
    """Full-clip log-mel matrix, shape (time, mel). Column t is centred at t * hop_seconds."""

    matrix: np.ndarray
    hop_seconds: float

    @property
    def time_bins(self) -> int:
        return self.matrix.shape[0]

    @property
    def freq_bins(self) -> int:
        return self.matrix.shape[1]


@dataclass
class SpectrogramSlice(Spectrogram):
    start_seconds: float = 0.0

    @property
    def duration(self) -> float:
        return self.time_bins * self.hop_seconds


def compute_spectrogram(audio, sample_rate: int, params: SpectrogramParams | None = None) -> Spectrogram:
    """Log-magnitude mel spectrogram.

    Values are ``log10(max(mel, floor) / floor)`` so they are non-negative and
    digital silence maps to 0 everywhere.
    """
    params = params or SpectrogramParams()
    audio = resample(_check_waveform(audio), sample_rate, params.sample_rate)
    win = params.win_length
    if audio.size < win:
        raise ValidationError(f"audio has {audio.size} samples, shorter than one FFT window ({win})")
    hop, n_fft = params.hop_length, params.n_fft
    padded = np.pad(audio, (win // 2, win // 2), mode="reflect")
    n_cols = 1 + (padded.size - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:n_cols]
    mag = np.abs(np.fft.rfft(frames * signal.get_window("hann", win, fftbins=True), n=n_fft, axis=1))
    mel = mag @ mel_filterbank(params.sample_rate, n_fft, params.n_mels).T
    floor = params.log_floor
    logmel = np.log10(np.maximum(mel, floor)) - np.log10(floor)
    return Spectrogram(matrix=logmel, hop_seconds=hop / params.sample_rate)


def slice_spectrogram(spec: Spectrogram, start_frame: int, T: int, fps: float) -> SpectrogramSlice:
    """Columns whose centres fall in [start/fps, (start+T)/fps).

    Audio may fall short of the frame span by up to one frame period; the
    last column is then repeated.
    """
    t0, t1 = start_frame / fps, (start_frame + T) / fps
    c0 = int(round(t0 / spec.hop_seconds))
    c1 = max(c0 + 1, int(round(t1 / spec.hop_seconds)))
    available = spec.time_bins
    shortfall = (c1 - available) * spec.hop_seconds
    if c0 >= available or shortfall > 1.0 / fps + 1e-9:
        raise WindowRangeError(
            f"spectrogram covers {available * spec.hop_seconds:.3f}s, window needs up to {t1:.3f}s"
        )
    cols = np.minimum(np.arange(c0, c1), available - 1)
    return SpectrogramSlice(matrix=spec.matrix[cols], hop_seconds=spec.hop_seconds, start_seconds=c0 * spec.hop_seconds)


def denoise_audio(audio, sample_rate: int, n_std: float = 1.5, quiet_fraction: float = 0.1) -> np.ndarray:
    """Spectral gating with a noise profile taken from the quietest STFT frames."""
    audio = _check_waveform(audio)
    if audio.size == 0 or not np.any(audio):
        return audio.copy()
    nperseg = min(audio.size, 1 << (int(0.032 * sample_rate) - 1).bit_length())
    _, _, Z = signal.stft(audio, fs=sample_rate, nperseg=nperseg, noverlap=nperseg * 3 // 4, boundary="even")
    mag_db = 20.0 * np.log10(np.maximum(np.abs(Z), 1e-12))
    energy = np.sum(np.abs(Z) ** 2, axis=0)
    n_quiet = max(1, int(round(quiet_fraction * energy.size)))
    quiet = np.argsort(energy, kind="stable")[:n_quiet]
    noise_db = mag_db[:, quiet]
    thresh = noise_db.mean(axis=1, keepdims=True) + n_std * noise_db.std(axis=1, keepdims=True)
    mask = (mag_db > thresh).astype(np.float64)
    mask = ndimage.uniform_filter(mask, size=(3, 5), mode="nearest")
    _, out = signal.istft(Z * mask, fs=sample_rate, nperseg=nperseg, noverlap=nperseg * 3 // 4, boundary=True)
    out = out[: audio.size]
    if out.size < audio.size:
        out = np.pad(out, (0, audio.size - out.size))
    return out


# --------------------------------------------------------------------------- windows


@dataclass
class WindowSample:
    clip_id: str
    start_frame: int
    frames: np.ndarray  # (T, H, W, 3) float32 in [0, 1]
    spectrogram: SpectrogramSlice | None
    composite: np.ndarray  # (band_h + H, T * W, 3) float32 in [0, 1]
    label: int

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def band_height(self) -> int:
        return self.composite.shape[0] - self.frames.shape[1]

    @property
    def name(self) -> str:
        return f"{self.clip_id}_{self.start_frame}"

    @classmethod
    def from_composite(cls, composite: np.ndarray, T: int, frame_side: int, label: int = 0,
                       clip_id: str = "", start_frame: int = 0) -> "WindowSample":
        """Recover the frame strip of a cached composite (spectrogram slice not recoverable)."""
        composite = np.asarray(composite)
        if composite.dtype == np.uint8:
            composite = composite.astype(np.float32) / 255.0
        band_h = composite.shape[0] - frame_side
        if band_h < 0 or composite.shape[1] != T * frame_side:
            raise ValidationError(f"composite of shape {composite.shape} does not match T={T}, side={frame_side}")
        strip = composite[band_h:]
        frames = strip.reshape(frame_side, T, frame_side, 3).transpose(1, 0, 2, 3)
        return cls(clip_id, start_frame, np.ascontiguousarray(frames), None, composite, label)


def render_band(spec_slice: SpectrogramSlice, height: int, width: int) -> np.ndarray:
    """Min-max normalised spectrogram image (low frequencies at the bottom), 3 identical channels."""
    m = spec_slice.matrix.astype(np.float64)
    lo, hi = m.min(), m.max()
    norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    img = norm.T[::-1]  # (mel, time) with mel 0 at bottom
    img = np.asarray(Image.fromarray(img.astype(np.float32), mode="F").resize((width, height), Image.BILINEAR))
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[:, :, None], 3, axis=2).astype(np.float32)


def load_frame(path: Path, side: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def compose(frames: np.ndarray, band: np.ndarray) -> np.ndarray:
    """Spectrogram band stacked above the horizontal concatenation of the frames."""
    strip = np.concatenate(list(frames), axis=1)
    if band.shape[1] != strip.shape[1]:
        raise ValidationError("band width must equal T * frame width")
    return np.concatenate([band, strip], axis=0)


def clip_spectrogram(clip: ClipRecord, params: SpectrogramParams, denoise: bool = False) -> Spectrogram:
    audio, sr = read_audio(clip.audio_path)
    if denoise:
        audio = denoise_audio(audio, sr)
    return compute_spectrogram(audio, sr, params)


def assemble_window(clip: ClipRecord, start_frame: int, T: int, spec: Spectrogram,
                    frame_side: int = 224, band_height: int = 224) -> WindowSample:
    n = clip.n_frames
    if start_frame < 0 or start_frame + T > n:
        raise WindowRangeError(f"{clip.clip_id}: window [{start_frame}, {start_frame + T}) exceeds {n} frames")
    frames = np.stack([load_frame(p, frame_side) for p in clip.frame_paths[start_frame:start_frame + T]])
    sl = slice_spectrogram(spec, start_frame, T, clip.fps)
    band = render_band(sl, band_height, T * frame_side)
    return WindowSample(clip.clip_id, start_frame, frames, sl, compose(frames, band), clip.label)


# --------------------------------------------------------------------------- expansion


class WindowDescriptor(NamedTuple):
    clip_id: str
    start_frame: int
    label: int
    split: str


def expand_dataset(records: Sequence[ClipRecord], T: int, factor: int, seed: int) -> list[WindowDescriptor]:
    """Draw up to `factor` distinct window offsets per clip, uniformly without replacement."""
    if int(factor) != factor or factor < 1:
        raise ValidationError(f"factor must be an integer >= 1, got {factor}")
    rng = np.random.default_rng(seed)
    out: list[WindowDescriptor] = []
    for rec in records:
        available = rec.n_frames - T + 1
        if available < 1:
            raise ValidationError(f"{rec.clip_id}: {rec.n_frames} frames, fewer than T={T}")
        starts = np.sort(rng.choice(available, size=min(int(factor), available), replace=False))
        out.extend(WindowDescriptor(rec.clip_id, int(s), rec.label, rec.split) for s in starts)
    return out


# --------------------------------------------------------------------------- composite cache


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img) if img.dtype != np.uint8 else img).save(path, format="PNG")


def write_cache(records: Sequence[ClipRecord], descriptors: Sequence[WindowDescriptor],
                out_dir: str | Path, cfg: RunConfig) -> Path:
    """Render every descriptor to `{clip_id}_{start}.png` and write the sidecar index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.clip_id: r for r in records}
    params = SpectrogramParams.from_config(cfg)
    rows = []
    current_id, spec = None, None
    for d in descriptors:
        clip = by_id[d.clip_id]
        if d.clip_id != current_id:
            spec = clip_spectrogram(clip, params, cfg.denoise)
            current_id = d.clip_id
        sample = assemble_window(clip, d.start_frame, cfg.window_size, spec, cfg.frame_side, cfg.band_height)
        save_png(out_dir / f"{sample.name}.png", sample.composite)
        rows.append(dict(name=sample.name, label=d.label, clip_id=d.clip_id,
                         start_frame=d.start_frame, split=d.split, generator=clip.generator))
    write_index(out_dir / INDEX_NAME, rows)
    return out_dir / INDEX_NAME


class IndexRow(NamedTuple):
    name: str
    label: int
    clip_id: str
    start_frame: int
    split: str
    generator: str


def write_index(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=INDEX_FIELDS, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def read_index(cache_dir: str | Path, split: str | None = None) -> list[IndexRow]:
    path = Path(cache_dir) / INDEX_NAME
    if not path.is_file():
        raise ValidationError(f"no {INDEX_NAME} in {cache_dir}")
    with open(path, encoding="utf-8") as fh:
        rows = [
            IndexRow(r["name"], int(r["label"]), r["clip_id"], int(r["start_frame"]), r["split"], r["generator"])
            for r in csv.DictReader(fh, delimiter="\t")
        ]
    if split is not None:
        rows = [r for r in rows if r.split == split]
    return rows


def load_composite(cache_dir: str | Path, name: str) -> np.ndarray:
    with Image.open(Path(cache_dir) / f"{name}.png") as im:
        return np.asarray(im.convert("RGB"))
