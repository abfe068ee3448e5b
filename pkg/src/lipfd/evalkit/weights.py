"""Per-sample region weight shares (head, face, lip)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ValidationError


@dataclass
class WeightReport:
    ids: list[str]
    triples: np.ndarray  # (N, 3) columns head, face, lip

    def mean(self) -> np.ndarray:
        return self.triples.mean(axis=0)

    def rows(self):
        for i, (h, f, l) in zip(self.ids, self.triples):
            yield dict(sample_id=i, head=float(h), face=float(f), lip=float(l))


def normalize_weights(weights, ids=None) -> WeightReport:
    """Normalise each frame's (head, face, lip) weights to sum to one, then average over frames.

    `weights` is (N, T, 3), (T, 3) or a single triple; a FeatureStack is accepted too.
    """
    if hasattr(weights, "weights"):
        weights = weights.weights
    if torch.is_tensor(weights):
        weights = weights.detach().cpu().numpy()
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, None]
    elif w.ndim == 2:
        w = w[None]
    if w.ndim != 3 or w.shape[-1] != 3:
        raise ValidationError(f"weights must end in a (head, face, lip) axis, got shape {w.shape}")
    if np.any(w < 0) or np.any(w.sum(axis=-1) <= 0):
        raise ValidationError("region weights must be non-negative with a positive sum")
    shares = (w / w.sum(axis=-1, keepdims=True)).mean(axis=1)
    ids = list(ids) if ids is not None else [str(i) for i in range(shares.shape[0])]
    return WeightReport(ids, shares)
