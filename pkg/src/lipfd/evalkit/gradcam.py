"""Gradient-weighted activation maps at the global-region encoder's last conv block."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..avdata import WindowSample, save_png
from ..config import SCALES
from ..errors import StateError, ValidationError
from ..model import LipFD
from ..regions import crop_pyramid


def gradient_attention_map(model: LipFD, sample: WindowSample, scale: str = "lip") -> list[np.ndarray]:
    """One heatmap per frame for `scale`, each the size of the source crop and min-max scaled to [0, 1].

    The map is the channel mean of activations times their spatially pooled
    gradients (of the fake logit). A spatially flat map comes out as zeros.
    """
    if scale not in SCALES:
        raise ValidationError(f"scale must be one of {SCALES}")
    if not torch.is_grad_enabled():
        raise StateError("gradient maps need autograd; called under no_grad/inference mode")
    if not model.ready:
        raise StateError("model parameters were neither trained nor loaded")
    s_idx = SCALES.index(scale)
    captured = {}

    def hook(_module, _inp, out):
        out.retain_grad()
        captured["act"] = out

    handle = model.region_encoder.final.register_forward_hook(hook)
    try:
        model.eval()
        composite, crops = model.sample_tensors(sample)
        crops = crops.detach().requires_grad_(True)  # keeps the graph alive with a frozen backbone
        stack = model(composite, crops)
        model.zero_grad(set_to_none=True)
        stack.logit.sum().backward()
    finally:
        handle.remove()
    act, grad = captured["act"], captured["act"].grad
    T = model.cfg.window_size
    act = act.detach().reshape(1, T, 3, *act.shape[1:])[0, :, s_idx]
    grad = grad.detach().reshape(1, T, 3, *grad.shape[1:])[0, :, s_idx]
    cam = (act * grad.mean(dim=(2, 3), keepdim=True)).mean(dim=1, keepdim=True)  # (T, 1, h, w)
    pyr = crop_pyramid(sample, model.cfg.anchor_mode, model.cfg.crop_ratios, model.cfg.lip_bottom, model.detector)
    maps = []
    for t, crop in enumerate(pyr.scale(scale)):
        up = F.interpolate(cam[t:t + 1].double(), size=crop.shape[:2], mode="bilinear", align_corners=False)[0, 0]
        lo, hi = up.min(), up.max()
        # relative tolerance: a constant map only differs by rounding noise
        if float(hi - lo) <= 1e-9 * max(1.0, float(up.abs().max())):
            maps.append(np.zeros(crop.shape[:2]))
        else:
            maps.append(((up - lo) / (hi - lo)).numpy())
    return maps


def overlay(crop: np.ndarray, heat: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Red-yellow heat overlay on a float RGB crop."""
    color = np.stack([np.ones_like(heat), heat, np.zeros_like(heat)], axis=-1)
    return np.clip((1 - alpha * heat[..., None]) * crop + alpha * heat[..., None] * color, 0.0, 1.0)


def write_heatmaps(model: LipFD, sample: WindowSample, out_dir: str | Path, scales=SCALES) -> list[Path]:
    """Crops plus `_heat` / `_overlay` PNGs named {clip_id}_{start}_{scale}_{i}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pyr = crop_pyramid(sample, model.cfg.anchor_mode, model.cfg.crop_ratios, model.cfg.lip_bottom, model.detector)
    paths = []
    for scale in scales:
        for i, (crop, heat) in enumerate(zip(pyr.scale(scale), gradient_attention_map(model, sample, scale))):
            stem = f"{sample.clip_id}_{sample.start_frame}_{scale}_{i}"
            save_png(out_dir / f"{stem}.png", crop)
            save_png(out_dir / f"{stem}_heat.png", np.repeat(heat[..., None], 3, axis=2))
            save_png(out_dir / f"{stem}_overlay.png", overlay(crop, heat))
            paths.append(out_dir / f"{stem}_heat.png")
    return paths
