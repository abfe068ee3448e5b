"""Training loop and batched inference over a composite cache."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .avdata import IndexRow, load_composite, read_index
from .config import RunConfig
from .errors import ValidationError
from .evalkit.metrics import PredictionSet, compute_metrics
from .model import LipFD, build_optimizer, load_checkpoint, save_checkpoint, train_step

log = logging.getLogger(__name__)


class CompositeSet:
    """Composites of one cache split held in memory as uint8 (N, H, W, 3)."""

    def __init__(self, cache_dir: str | Path, split: str | None = None, rows: list[IndexRow] | None = None):
        self.cache_dir = Path(cache_dir)
        self.rows = rows if rows is not None else read_index(cache_dir, split)
        if self.rows:
            self.images = np.stack([load_composite(self.cache_dir, r.name) for r in self.rows])
        else:
            self.images = np.zeros((0, 1, 1, 3), dtype=np.uint8)
        self.labels = np.array([r.label for r in self.rows], dtype=np.int64)

    def __len__(self):
        return len(self.rows)

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    def batch(self, idx, dtype=torch.float32, transform: Callable | None = None) -> torch.Tensor:
        imgs = self.images[idx]
        if transform is not None:
            imgs = np.stack([transform(img, int(i)) for img, i in zip(imgs, idx)])
        return torch.from_numpy(imgs).permute(0, 3, 1, 2).to(dtype) / 255.0


def predict_set(model: LipFD, data: CompositeSet, batch_size: int = 64,
                transform: Callable | None = None) -> PredictionSet:
    dtype = next(model.parameters()).dtype
    probs = []
    for s in range(0, len(data), batch_size):
        idx = np.arange(s, min(s + batch_size, len(data)))
        probs.append(model.predict_batch(data.batch(idx, dtype, transform)).double().numpy())
    p = np.concatenate(probs) if probs else np.zeros(0)
    return PredictionSet(data.names, p, data.labels)


def fit(cfg: RunConfig, cache_dir: str | Path, out_dir: str | Path, resume: str | Path | None = None,
        model: LipFD | None = None) -> tuple[LipFD, list[dict]]:
    """Train on the cache's train split, validating on val; writes checkpoints and a JSONL log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    step, start_epoch = 0, 0
    if resume is not None:
        model, payload = load_checkpoint(resume)
        step, start_epoch = payload["step"], payload["epoch"]
        optimizer = build_optimizer(model, cfg)
        if payload.get("optimizer") is not None:
            optimizer.load_state_dict(payload["optimizer"])
        for g in optimizer.param_groups:
            g["lr"] = cfg.lr
    else:
        model = model or LipFD(cfg)
        optimizer = build_optimizer(model, cfg)
    model.cfg = cfg
    train = CompositeSet(cache_dir, "train")
    val = CompositeSet(cache_dir, "val")
    if len(train) == 0 or len(set(train.labels.tolist())) < 2:
        raise ValidationError("training split must contain both classes")
    gen = torch.Generator().manual_seed(cfg.seed)
    for _ in range(start_epoch):  # keep the shuffle stream aligned when resuming
        torch.randperm(len(train), generator=gen)
    history = []
    log_path = out_dir / "train_log.jsonl"
    dtype = next(model.parameters()).dtype
    with open(log_path, "a", encoding="utf-8") as log_fh:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.time()
            order = torch.randperm(len(train), generator=gen).numpy()
            sums = dict(l_ra=0.0, l_cls=0.0, total=0.0)
            n_batches = 0
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                losses = train_step(model, train.batch(idx, dtype), torch.from_numpy(train.labels[idx]), optimizer)
                step += 1
                n_batches += 1
                for k in sums:
                    sums[k] += float(getattr(losses, k).detach())
            entry = dict(epoch=epoch + 1, step=step, seconds=round(time.time() - t0, 2),
                         **{k: v / max(n_batches, 1) for k, v in sums.items()})
            if len(val) and ((epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs):
                entry["val"] = compute_metrics(predict_set(model, val), cfg.threshold).as_dict()
            history.append(entry)
            log_fh.write(json.dumps(entry) + "\n")
            log_fh.flush()
            log.info("epoch %d: %s", epoch + 1, entry)
            save_checkpoint(out_dir / "checkpoint.pt", model, optimizer, step, epoch + 1)
    if cfg.epochs <= start_epoch:
        save_checkpoint(out_dir / "checkpoint.pt", model, optimizer, step, start_epoch)
    model.mark_ready()
    return model, history
