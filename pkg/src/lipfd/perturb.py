"""Seven visual corruptions at five severities, for robustness sweeps and augmentation."""

from __future__ import annotations

import os
import shutil
import subprocess
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np

from .avdata import WindowSample
from .errors import ValidationError

KINDS = ("block_wise", "contrast", "saturation", "gaussian_blur", "gaussian_noise", "pixelation", "compression")

# severity 1..5 per kind
TABLE = {
    "block_wise": (16, 32, 48, 64, 80),  # number of blocks
    "contrast": (0.85, 0.725, 0.6, 0.475, 0.35),  # pixel value scale
    "saturation": (0.4, 0.3, 0.2, 0.1, 0.0),  # YCbCr chroma scale
    "gaussian_blur": (7, 9, 13, 17, 21),  # kernel size
    "gaussian_noise": (0.001, 0.002, 0.005, 0.01, 0.05),  # variance
    "pixelation": (2, 3, 4, 5, 6),  # downscale factor
    "compression": (30, 32, 35, 38, 40),  # constant rate factor
}

BLOCK_SIZE = 16
BLOCK_GRAY = 0.5


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    severity: int | None
    param: float

    @classmethod
    def probe(cls, kind: str, param: float) -> "PerturbationSpec":
        """Out-of-table parameter, e.g. contrast 1.0 as an identity probe."""
        if kind not in KINDS:
            raise ValidationError(f"unknown perturbation kind {kind!r}")
        return cls(kind, None, param)

    @property
    def label(self) -> str:
        return f"{self.kind}@{self.severity if self.severity is not None else self.param}"


def resolve(kind: str, severity: int) -> PerturbationSpec:
    if kind not in TABLE:
        raise ValidationError(f"unknown perturbation kind {kind!r}")
    if int(severity) != severity or not 1 <= severity <= 5:
        raise ValidationError(f"severity must be in 1..5, got {severity}")
    return PerturbationSpec(kind, int(severity), TABLE[kind][int(severity) - 1])


# --------------------------------------------------------------------------- kinds


def _block_wise(img, n_blocks, rng):
    out = img.copy()
    H, W = img.shape[:2]
    b = min(BLOCK_SIZE, H, W)
    ys = rng.integers(0, H - b + 1, size=int(n_blocks))
    xs = rng.integers(0, W - b + 1, size=int(n_blocks))
    for y, x in zip(ys, xs):
        out[y:y + b, x:x + b] = BLOCK_GRAY
    return out


def _contrast(img, factor):
    return np.clip(img * factor + 0.5 * (1.0 - factor), 0.0, 1.0)


# full-range BT.601 (JPEG) RGB <-> YCbCr
_RGB2YCC = np.array([[0.299, 0.587, 0.114], [-0.168736, -0.331264, 0.5], [0.5, -0.418688, -0.081312]])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def _saturation(img, factor):
    ycc = img @ _RGB2YCC.T
    ycc[..., 1:] *= factor
    return np.clip(ycc @ _YCC2RGB.T, 0.0, 1.0)


def blur_sigma(ksize: int) -> float:
    return 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8


def _gaussian_blur(img, ksize):
    k = int(ksize)
    return cv2.GaussianBlur(img, (k, k), sigmaX=blur_sigma(k), sigmaY=blur_sigma(k), borderType=cv2.BORDER_REFLECT_101)


def _gaussian_noise(img, variance, rng):
    return np.clip(img + rng.normal(0.0, np.sqrt(variance), size=img.shape), 0.0, 1.0)


def _pixelation(img, factor):
    """Block-average down by `factor`, nearest-neighbour back up (edge blocks may be partial)."""
    f = int(factor)
    H, W, C = img.shape
    Hp, Wp = -(-H // f) * f, -(-W // f) * f
    padded = np.pad(img, ((0, Hp - H), (0, Wp - W), (0, 0)), mode="edge")
    small = padded.reshape(Hp // f, f, Wp // f, f, C).mean(axis=(1, 3))
    return np.repeat(np.repeat(small, f, axis=0), f, axis=1)[:H, :W]


@lru_cache(maxsize=1)
def ffmpeg_executable() -> str | None:
    exe = os.environ.get("LIPFD_FFMPEG") or shutil.which("ffmpeg")
    if exe:
        return exe
    try:
        import imageio_ffmpeg

        return imageio_ffmpeg.get_ffmpeg_exe()
    except Exception:
        return None


def crf_to_jpeg_quality(crf: float) -> int:
    # CRF spans 0 (lossless) .. 51 (worst)
    return int(np.clip(round(100 - crf * 100 / 51), 1, 100))


def compress_frames(frames: np.ndarray, crf: float) -> np.ndarray:
    """H.264 encode/decode of a (T, H, W, 3) float sequence; JPEG fallback without ffmpeg."""
    frames8 = np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)
    T, H, W, _ = frames8.shape
    exe = ffmpeg_executable()
    if exe is None:
        q = crf_to_jpeg_quality(crf)
        out = []
        for f in frames8:
            ok, buf = cv2.imencode(".jpg", f[:, :, ::-1], [cv2.IMWRITE_JPEG_QUALITY, q])
            out.append(cv2.imdecode(buf, cv2.IMREAD_COLOR)[:, :, ::-1])
        return np.stack(out).astype(np.float64) / 255.0
    # yuv420p needs even dimensions
    Hp, Wp = H + H % 2, W + W % 2
    padded = np.pad(frames8, ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0)), mode="edge")
    encode = [exe, "-v", "error", "-f", "rawvideo", "-pix_fmt", "rgb24", "-s", f"{Wp}x{Hp}", "-r", "25",
              "-i", "pipe:0", "-c:v", "libx264", "-preset", "medium", "-crf", str(int(crf)),
              "-pix_fmt", "yuv420p", "-threads", "1", "-f", "h264", "pipe:1"]
    bitstream = subprocess.run(encode, input=padded.tobytes(), capture_output=True, check=True).stdout
    decode = [exe, "-v", "error", "-f", "h264", "-i", "pipe:0", "-f", "rawvideo", "-pix_fmt", "rgb24",
              "-threads", "1", "pipe:1"]
    raw = subprocess.run(decode, input=bitstream, capture_output=True, check=True).stdout
    decoded = np.frombuffer(raw, dtype=np.uint8).reshape(-1, Hp, Wp, 3)[:T, :H, :W]
    return decoded.astype(np.float64) / 255.0


def apply(image: np.ndarray, spec: PerturbationSpec, seed: int = 0) -> np.ndarray:
    """Corrupt one H x W x 3 image in [0, 1]; stochastic kinds draw from `seed`."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected an HxWx3 image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError("image contains non-finite values")
    kind, p = spec.kind, spec.param
    rng = np.random.default_rng(seed)
    if kind == "block_wise":
        out = _block_wise(img, p, rng)
    elif kind == "contrast":
        out = _contrast(img, p)
    elif kind == "saturation":
        out = _saturation(img, p)
    elif kind == "gaussian_blur":
        out = _gaussian_blur(img, p)
    elif kind == "gaussian_noise":
        out = _gaussian_noise(img, p, rng)
    elif kind == "pixelation":
        out = _pixelation(img, p)
    elif kind == "compression":
        out = compress_frames(img[None], p)[0]
    else:
        raise ValidationError(f"unknown perturbation kind {kind!r}")
    return out.astype(image.dtype if np.issubdtype(np.asarray(image).dtype, np.floating) else np.float64)


def apply_to_window(sample: WindowSample, spec: PerturbationSpec, seed: int = 0) -> WindowSample:
    """Corrupt the frame strip only; frame i uses seed + i. The spectrogram band is left as is."""
    if spec.kind == "compression":
        frames = compress_frames(sample.frames, spec.param).astype(sample.frames.dtype)
    else:
        frames = np.stack([apply(f, spec, seed + i) for i, f in enumerate(sample.frames)])
    band_h = sample.band_height
    composite = sample.composite.copy()
    composite[band_h:] = np.concatenate(list(frames), axis=1)
    return replace(sample, frames=frames, composite=composite)


def apply_to_composite(composite: np.ndarray, T: int, frame_side: int, spec: PerturbationSpec,
                       seed: int = 0) -> np.ndarray:
    """uint8 composite in, uint8 composite out (as written to a corrupted cache)."""
    sample = WindowSample.from_composite(composite, T, frame_side)
    out = apply_to_window(sample, spec, seed).composite
    res = np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8)
    res[: sample.band_height] = composite[: sample.band_height]
    return res


def perturb_cache(cache_dir: str | Path, out_dir: str | Path, spec: PerturbationSpec, T: int, frame_side: int,
                  seed: int = 0) -> Path:
    """Mirror a composite cache with every composite corrupted; the index is copied unchanged."""
    from .avdata import INDEX_NAME, load_composite, read_index, save_png

    cache_dir, out_dir = Path(cache_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, row in enumerate(read_index(cache_dir)):
        comp = load_composite(cache_dir, row.name)
        save_png(out_dir / f"{row.name}.png", apply_to_composite(comp, T, frame_side, spec, seed + i * T))
    shutil.copyfile(cache_dir / INDEX_NAME, out_dir / INDEX_NAME)
    return out_dir
