"""Head / face / lip crop pyramid over a window's frame strip."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .avdata import WindowSample, save_png
from .config import SCALES
from .errors import ValidationError

DEFAULT_RATIOS = (1.0, 0.65, 0.45)


class Rect(NamedTuple):
    """Half-open pixel rectangle [x0, x1) x [y0, y1) in frame coordinates."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, other: "Rect") -> bool:
        return self.x0 <= other.x0 and self.y0 <= other.y0 and other.x1 <= self.x1 and other.y1 <= self.y1


# detector(frame) -> (face_box, mouth_box) in pixel coordinates, or None when no face is found
Detector = Callable[[np.ndarray], Optional[tuple[Rect, Rect]]]


def crop_side(frame_side: int, ratio: float) -> int:
    # epsilon guards products like 0.45 * 224 = 100.80000000000001 and 0.5 * 10 = 5 - ulp
    return max(1, int(math.floor(ratio * frame_side + 1e-9)))


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise ValidationError(f"expected three ratios, got {len(ratios)}")
    for r in ratios:
        if not (0.0 < r <= 1.0):
            raise ValidationError(f"crop ratio {r} outside (0, 1]")
    if not (ratios[0] >= ratios[1] >= ratios[2]):
        raise ValidationError(f"crop ratios must be non-increasing (head, face, lip), got {tuple(ratios)}")
    return tuple(float(r) for r in ratios)


def _clamp(x0: int, y0: int, side: int, box: Rect) -> Rect:
    x0 = min(max(x0, box.x0), box.x1 - side)
    y0 = min(max(y0, box.y0), box.y1 - side)
    return Rect(x0, y0, x0 + side, y0 + side)


def _centered(cx: float, cy: float, side: int, box: Rect) -> Rect:
    return _clamp(int(math.floor(cx - side / 2)), int(math.floor(cy - side / 2)), side, box)


def crop_rectangles(frame_side: int, ratios: Sequence[float] = DEFAULT_RATIOS, anchor_mode: str = "fixed",
                    lip_bottom: float = 0.92, boxes: tuple[Rect, Rect] | None = None) -> tuple[Rect, Rect, Rect]:
    """Square (head, face, lip) rectangles for one frame.

    Fixed mode centres the face crop and puts the lip crop's bottom edge at
    ``lip_bottom * frame_side``; landmark mode centres them on the detected
    face / mouth boxes. Each crop is then clamped into its parent so
    lip <= face <= head always holds.
    """
    if frame_side <= 0:
        raise ValidationError("frame_side must be positive")
    r_h, r_f, r_l = _check_ratios(ratios)
    s_h, s_f, s_l = (crop_side(frame_side, r) for r in (r_h, r_f, r_l))
    frame = Rect(0, 0, frame_side, frame_side)
    head = _centered(frame_side / 2, frame_side / 2, s_h, frame)
    if anchor_mode == "fixed":
        face = _centered(frame_side / 2, frame_side / 2, s_f, head)
        bottom = int(math.floor(lip_bottom * frame_side + 1e-9))
        lip = _clamp(int(math.floor(frame_side / 2 - s_l / 2)), bottom - s_l, s_l, face)
    elif anchor_mode == "landmarks":
        if boxes is None:
            raise ValidationError("landmark anchoring needs detected face and mouth boxes")
        face_box, mouth_box = boxes
        face = _centered((face_box.x0 + face_box.x1) / 2, (face_box.y0 + face_box.y1) / 2, s_f, head)
        lip = _centered((mouth_box.x0 + mouth_box.x1) / 2, (mouth_box.y0 + mouth_box.y1) / 2, s_l, face)
    else:
        raise ValidationError(f"unknown anchor mode {anchor_mode!r}")
    return head, face, lip


@dataclass
class CropPyramid:
    head: list[np.ndarray]
    face: list[np.ndarray]
    lip: list[np.ndarray]
    ratios: tuple[float, float, float]
    anchors: list[tuple[Rect, Rect, Rect]]
    fallback: bool = False  # landmark mode fell back to fixed anchors

    def scale(self, name: str) -> list[np.ndarray]:
        return getattr(self, name)

    def resized(self, side: int) -> np.ndarray:
        """All crops at the encoder input side, shape (3, T, side, side, 3)."""
        return np.stack([np.stack([resize_crop(c, side) for c in self.scale(s)]) for s in SCALES])


def resize_crop(crop: np.ndarray, side: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(crop, dtype=np.float32)).permute(2, 0, 1)[None]
    return resize_tensor(t, side)[0].permute(1, 2, 0).numpy()


def resize_tensor(x: torch.Tensor, side: int) -> torch.Tensor:
    if x.shape[-2:] == (side, side):
        return x
    return F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False, antialias=True)


def crop_pyramid(sample: WindowSample, anchor_mode: str = "fixed", ratios: Sequence[float] = DEFAULT_RATIOS,
                 lip_bottom: float = 0.92, detector: Detector | None = None) -> CropPyramid:
    T, H, W, _ = sample.frames.shape
    if H != W:
        raise ValidationError(f"frames must be square, got {H}x{W}")
    ratios = _check_ratios(ratios)
    fixed = crop_rectangles(H, ratios, "fixed", lip_bottom)
    anchors, fallback = [], False
    for frame in sample.frames:
        boxes = detector(frame) if (anchor_mode == "landmarks" and detector is not None) else None
        if anchor_mode == "landmarks" and boxes is None:
            fallback = True
        anchors.append(crop_rectangles(H, ratios, "landmarks", boxes=boxes) if boxes is not None else fixed)
    crops = {s: [] for s in SCALES}
    for frame, rects in zip(sample.frames, anchors):
        for s, r in zip(SCALES, rects):
            crops[s].append(frame[r.y0:r.y1, r.x0:r.x1])
    return CropPyramid(crops["head"], crops["face"], crops["lip"], ratios, anchors, fallback)


def batch_crops(composites: torch.Tensor, T: int, frame_side: int, rects: Sequence[Rect], side: int) -> torch.Tensor:
    """Fixed-anchor crops straight from a batch of composites.

    composites: (N, 3, band_h + frame_side, T * frame_side). Returns
    (N, 3 scales, T, 3, side, side); the spectrogram band is never cropped.
    """
    band_h = composites.shape[-2] - frame_side
    out = []
    for r in rects:
        per_t = []
        for t in range(T):
            x = composites[:, :, band_h + r.y0:band_h + r.y1, t * frame_side + r.x0:t * frame_side + r.x1]
            per_t.append(resize_tensor(x, side))
        out.append(torch.stack(per_t, dim=1))
    return torch.stack(out, dim=1)


def dump_pyramid(pyramid: CropPyramid, out_dir: str | Path, clip_id: str, start: int) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in SCALES:
        for i, crop in enumerate(pyramid.scale(s)):
            p = out_dir / f"{clip_id}_{start}_{s}_{i}.png"
            save_png(p, crop)
            paths.append(p)
    return paths
