"""Dual-headed detector: global encoder, global-region encoder, region awareness, fusion and losses.

Tensor layout conventions used throughout:

* composites ``(N, 3, band_h + S, T * S)`` in [0, 1]
* crops ``(N, T, 3 scales, 3, r, r)``, scales ordered head, face, lip
* region features ``(N, T, 3, D_r)``, weights ``(N, T, 3)``
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .avdata import WindowSample
from .config import RunConfig
from .errors import ConfigError, NumericError, StateError, ValidationError
from .regions import batch_crops, crop_pyramid, crop_rectangles

CLIP_L14_ID = "openai/clip-vit-large-patch14"


# --------------------------------------------------------------------------- backbones


class TinyViT(nn.Module):
    """Small pre-norm vision transformer returning the final-layer CLS embedding.

    Patches may be rectangular: ``patch_height=input_side`` gives one token per
    full-height time slice of a composite.
    """

    def __init__(self, input_side: int = 64, patch: int = 8, width: int = 32, depth: int = 2, heads: int = 4,
                 stem: str = "linear", patch_height: int | None = None):
        super().__init__()
        ph, pw = patch_height or patch, patch
        if input_side % ph or input_side % pw:
            raise ConfigError(f"input side {input_side} not divisible by patch {ph}x{pw}")
        self.input_side = input_side
        self.width = width
        if stem == "linear":
            self.patch_embed = nn.Conv2d(3, width, kernel_size=(ph, pw), stride=(ph, pw))
        elif stem == "conv":
            if ph % 4 or pw % 4:
                raise ConfigError("conv stem needs patch sides divisible by 4")
            self.patch_embed = nn.Sequential(
                nn.Conv2d(3, width, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(width, width, 3, stride=2, padding=1), nn.GELU(),
                nn.Conv2d(width, width, kernel_size=(ph // 4, pw // 4), stride=(ph // 4, pw // 4)),
            )
        else:
            raise ConfigError(f"unknown ViT stem {stem!r}")
        n_tokens = (input_side // ph) * (input_side // pw)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, width))
        self.pos_embed = nn.Parameter(torch.randn(1, n_tokens + 1, width) * 0.02)
        layer = nn.TransformerEncoderLayer(width, heads, dim_feedforward=4 * width, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(width)

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        return self.norm(self.blocks(x))[:, 0]


class CLIPBackbone(nn.Module):
    """Adapter around a HuggingFace CLIP vision tower with projection (image_embeds)."""

    MEAN = (0.48145466, 0.4578275, 0.40821073)
    STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model: nn.Module | None = None, model_id: str = CLIP_L14_ID):
        super().__init__()
        if model is None:
            from transformers import CLIPVisionModelWithProjection

            model = CLIPVisionModelWithProjection.from_pretrained(model_id)
        self.model = model
        self.input_side = model.config.image_size
        self.width = model.config.projection_dim
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, x):
        return self.model(pixel_values=(x - self.mean) / self.std).image_embeds


# declared embedding widths for the registered backbones
BACKBONE_WIDTHS = {"clip-vit-l14": 768}


def backbone_width(cfg: RunConfig) -> int:
    if cfg.backbone == "tiny":
        return cfg.vit_width
    if cfg.backbone in BACKBONE_WIDTHS:
        return BACKBONE_WIDTHS[cfg.backbone]
    raise ConfigError(f"unknown backbone {cfg.backbone!r}")


def build_backbone(cfg: RunConfig) -> nn.Module:
    if cfg.backbone == "tiny":
        return TinyViT(cfg.global_input_side, cfg.vit_patch, cfg.vit_width, cfg.vit_depth, cfg.vit_heads, cfg.vit_stem,
                       cfg.vit_patch_height)
    if cfg.backbone == "clip-vit-l14":
        return CLIPBackbone(model_id=CLIP_L14_ID)
    raise ConfigError(f"unknown backbone {cfg.backbone!r}")


# --------------------------------------------------------------------------- encoders


class GlobalEncoder(nn.Module):
    """Strided conv stem down to the backbone's input side, then the backbone."""

    def __init__(self, cfg: RunConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.backbone = backbone if backbone is not None else build_backbone(cfg)
        side = self.backbone.input_side
        H, W = cfg.composite_shape
        if H % side or W % side:
            raise ConfigError(f"composite {H}x{W} cannot be strided down to backbone input {side}x{side}")
        self.composite_shape = (H, W)
        kh, kw = H // side, W // side
        self.stem = nn.Conv2d(3, 3, kernel_size=(kh, kw), stride=(kh, kw))
        with torch.no_grad():  # start as per-channel average pooling
            self.stem.weight.zero_()
            for c in range(3):
                self.stem.weight[c, c] = 1.0 / (kh * kw)
            self.stem.bias.zero_()
        self.width = self.backbone.width

    def forward(self, composite):
        if tuple(composite.shape[-2:]) != self.composite_shape:
            raise ConfigError(f"composite shape {tuple(composite.shape[-2:])}, expected {self.composite_shape}")
        return self.backbone(self.stem(composite))


def _conv(c_in, c_out, stride):
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, padding_mode="replicate")


class GlobalRegionEncoder(nn.Module):
    """Per-crop conv encoder; the projected global feature is added before the final block."""

    def __init__(self, global_dim: int, channels: int = 64, out_dim: int = 256):
        super().__init__()
        self.stem = nn.Sequential(_conv(3, channels, 2), nn.SiLU(), _conv(channels, channels, 2), nn.SiLU())
        self.cond = nn.Linear(global_dim, channels)
        self.final = nn.Sequential(_conv(channels, channels, 1), nn.SiLU())
        self.head = nn.Linear(channels, out_dim)
        self.out_dim = out_dim

    def forward(self, crops, global_feature):
        # crops (B, 3, r, r), global_feature (B, D)
        h = self.stem(crops) + self.cond(global_feature)[:, :, None, None]
        h = self.final(h)
        return self.head(h.mean(dim=(2, 3)))


class RegionAwareness(nn.Module):
    def __init__(self, in_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, 1)

    def forward(self, concat):
        return torch.sigmoid(self.fc(concat).squeeze(-1))


class Classifier(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    @property
    def final_layer(self) -> nn.Linear:
        return self.mlp[-1]

    def forward(self, fused):
        return self.mlp(fused).squeeze(-1)


# --------------------------------------------------------------------------- functional pieces


def fuse(concat: torch.Tensor, weights: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Weighted mean of the 3T concatenated vectors, scaled by 1/T.

    concat (N, T, 3, D), weights (N, T, 3) -> (N, D).
    """
    T = concat.shape[-3]
    wsum = weights.sum(dim=(-2, -1))
    if check and bool((wsum <= 0).any()):
        raise NumericError("region weights sum to zero; fusion undefined")
    num = (weights.unsqueeze(-1) * concat).sum(dim=(-3, -2))
    return num / (T * wsum.unsqueeze(-1))


def loss_ra(weights: torch.Tensor, k: float = 1.0) -> torch.Tensor:
    """Sum over samples and frames of k / exp(max_scale(w) - w_head); weights (N, T, 3)."""
    if not k > 0:
        raise ValidationError(f"k must be positive, got {k}")
    if weights.ndim != 3 or weights.shape[-1] != 3:
        raise ValidationError(f"weights must be shaped (N, T, 3), got {tuple(weights.shape)}")
    gap = weights.max(dim=-1).values - weights[..., 0]
    # factor k out so the all-head-max case sums exact ones
    return k * torch.exp(-gap).sum()


def bce(prob: torch.Tensor, label: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    p = prob.clamp(eps, 1.0 - eps)
    return -(label * torch.log(p) + (1.0 - label) * torch.log(1.0 - p))


@dataclass
class LossBundle:
    l_ra: torch.Tensor
    l_cls: torch.Tensor
    total: torch.Tensor
    lambda_ra: float
    k: float

    def as_dict(self) -> dict[str, float]:
        return dict(l_ra=float(self.l_ra), l_cls=float(self.l_cls), total=float(self.total),
                    lambda_ra=self.lambda_ra, k=self.k)


def loss_total(prob, label, l_ra, lambda_ra: float = 1.0, k: float = 1.0, eps: float = 1e-7) -> LossBundle:
    """lambda_ra * l_ra + BCE(prob, label); BCE is averaged over the batch."""
    prob = torch.as_tensor(prob, dtype=torch.get_default_dtype()) if not torch.is_tensor(prob) else prob
    label = torch.as_tensor(label, dtype=prob.dtype)
    if not bool(((label == 0) | (label == 1)).all()):
        raise ValidationError("labels must be 0 or 1")
    l_ra = torch.as_tensor(l_ra, dtype=prob.dtype)
    l_cls = bce(prob, label, eps).mean()
    return LossBundle(l_ra, l_cls, lambda_ra * l_ra + l_cls, lambda_ra, k)


# --------------------------------------------------------------------------- detector


@dataclass
class FeatureStack:
    global_feature: torch.Tensor  # (N, D)
    regions: torch.Tensor  # (N, T, 3, D_r)
    concat: torch.Tensor  # (N, T, 3, D + D_r)
    weights: torch.Tensor  # (N, T, 3)
    fused: torch.Tensor  # (N, D + D_r)
    logit: torch.Tensor  # (N,)
    prob: torch.Tensor  # (N,)


class LipFD(nn.Module):
    def __init__(self, cfg: RunConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        self.global_encoder = GlobalEncoder(cfg, backbone)
        D = self.global_encoder.width
        self.region_encoder = GlobalRegionEncoder(D, cfg.region_channels, cfg.region_dim)
        self.region_awareness = RegionAwareness(D + cfg.region_dim)
        self.classifier = Classifier(D + cfg.region_dim, cfg.classifier_hidden)
        self.detector: Callable | None = None
        self.ready = False
        self.set_backbone_frozen(cfg.freeze_backbone)

    # -- parameter groups
    def set_backbone_frozen(self, frozen: bool) -> None:
        self.backbone_frozen = frozen
        for p in self.global_encoder.parameters():
            p.requires_grad_(not frozen)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def mark_ready(self) -> None:
        self.ready = True

    # -- stages
    def encode_global(self, composites: torch.Tensor) -> torch.Tensor:
        if self.backbone_frozen:
            with torch.no_grad():
                return self.global_encoder(composites)
        return self.global_encoder(composites)

    def encode_regions(self, crops: torch.Tensor, global_feature: torch.Tensor) -> torch.Tensor:
        N, T, S = crops.shape[:3]
        if S != 3 or crops.shape[3] != 3:
            raise ConfigError(f"crops must be (N, T, 3, 3, r, r), got {tuple(crops.shape)}")
        if global_feature.shape[0] != N:
            raise ConfigError("batch size of crops and global feature differ")
        flat = crops.reshape(N * T * S, *crops.shape[3:])
        g = global_feature.repeat_interleave(T * S, dim=0)
        return self.region_encoder(flat, g).reshape(N, T, S, -1)

    def forward(self, composites: torch.Tensor, crops: torch.Tensor) -> FeatureStack:
        g = self.encode_global(composites)
        regions = self.encode_regions(crops, g)
        N, T = regions.shape[:2]
        concat = torch.cat([g[:, None, None, :].expand(N, T, 3, g.shape[-1]), regions], dim=-1)
        weights = self.region_awareness(concat)
        fused = fuse(concat, weights)
        logit = self.classifier(fused)
        return FeatureStack(g, regions, concat, weights, fused, logit, torch.sigmoid(logit))

    # -- input preparation
    def make_crops(self, composites: torch.Tensor) -> torch.Tensor:
        """Crop pyramid tensor for a batch of composites; (N, T, 3, 3, r, r)."""
        cfg = self.cfg
        if cfg.anchor_mode == "fixed":
            rects = crop_rectangles(cfg.frame_side, cfg.crop_ratios, "fixed", cfg.lip_bottom)
            return batch_crops(composites, cfg.window_size, cfg.frame_side, rects, cfg.region_input_side).transpose(1, 2)
        out = []
        for comp in composites:
            img = comp.permute(1, 2, 0).detach().cpu().numpy()
            out.append(self.pyramid_tensor(WindowSample.from_composite(img, cfg.window_size, cfg.frame_side)))
        return torch.stack(out).to(composites)

    def pyramid_tensor(self, sample: WindowSample) -> torch.Tensor:
        cfg = self.cfg
        pyr = crop_pyramid(sample, cfg.anchor_mode, cfg.crop_ratios, cfg.lip_bottom, self.detector)
        arr = pyr.resized(cfg.region_input_side)  # (3, T, r, r, 3)
        return torch.from_numpy(arr).permute(1, 0, 4, 2, 3).contiguous()

    def sample_tensors(self, sample: WindowSample) -> tuple[torch.Tensor, torch.Tensor]:
        dtype = next(self.parameters()).dtype
        comp = torch.from_numpy(np.ascontiguousarray(sample.composite, dtype=np.float32)).permute(2, 0, 1)[None]
        comp = comp.to(dtype)
        if self.cfg.anchor_mode == "fixed":
            return comp, self.make_crops(comp)
        return comp, self.pyramid_tensor(sample)[None].to(dtype)

    @torch.no_grad()
    def predict(self, sample: WindowSample) -> tuple[float, FeatureStack]:
        if not self.ready:
            raise StateError("model parameters were neither trained nor loaded")
        self.eval()
        stack = self(*self.sample_tensors(sample))
        return float(stack.prob[0]), stack

    @torch.no_grad()
    def predict_batch(self, composites: torch.Tensor) -> torch.Tensor:
        if not self.ready:
            raise StateError("model parameters were neither trained nor loaded")
        self.eval()
        return self(composites, self.make_crops(composites)).prob


def compute_losses(model: LipFD, stack: FeatureStack, labels: torch.Tensor) -> LossBundle:
    cfg = model.cfg
    l_ra = loss_ra(stack.weights, cfg.k)
    return loss_total(stack.prob, labels.to(stack.prob.dtype), l_ra, cfg.lambda_ra, cfg.k, cfg.prob_eps)


def _diagnostics(model: LipFD, stack: FeatureStack) -> dict:
    def stats(t):
        t = t.detach()
        return dict(min=float(t.min()), max=float(t.max()), mean=float(t.mean()),
                    finite=bool(torch.isfinite(t).all()))

    diag = {f"stack.{k}": stats(getattr(stack, k)) for k in ("global_feature", "regions", "weights", "fused", "logit")}
    for name, p in model.named_parameters():
        if p.requires_grad:
            diag[f"param.{name}"] = stats(p)
    return diag


def train_step(model: LipFD, composites: torch.Tensor, labels: torch.Tensor, optimizer: torch.optim.Optimizer,
               crops: torch.Tensor | None = None) -> LossBundle:
    model.train()
    if crops is None:
        crops = model.make_crops(composites)
    stack = model(composites, crops)
    losses = compute_losses(model, stack, labels)
    if not torch.isfinite(losses.total):
        raise NumericError(f"non-finite loss {losses.total.item()}", _diagnostics(model, stack))
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    if model.cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), model.cfg.grad_clip)
    optimizer.step()
    model.mark_ready()
    return losses


def build_optimizer(model: LipFD, cfg: RunConfig) -> torch.optim.Optimizer:
    params = model.trainable_parameters()
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


# --------------------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "lipfd-checkpoint"
CHECKPOINT_VERSION = 1


def checkpoint_metadata(cfg: RunConfig, width: int) -> dict:
    return dict(
        T=cfg.window_size,
        ratios=list(cfg.crop_ratios),
        backbone=cfg.backbone,
        backbone_width=width,
        D_r=cfg.region_dim,
        k=cfg.k,
        lambda_ra=cfg.lambda_ra,
        spectrogram=dict(sample_rate=cfg.sample_rate, n_mels=cfg.n_mels, window_s=cfg.fft_window_s,
                         hop_s=cfg.hop_s, log_floor=cfg.log_floor),
    )


def save_checkpoint(path, model: LipFD, optimizer=None, step: int = 0, epoch: int = 0) -> None:
    torch.save(
        dict(
            format=CHECKPOINT_FORMAT,
            version=CHECKPOINT_VERSION,
            metadata=checkpoint_metadata(model.cfg, model.global_encoder.width),
            config=model.cfg.to_dict(),
            state_dict=model.state_dict(),
            optimizer=optimizer.state_dict() if optimizer is not None else None,
            step=step,
            epoch=epoch,
        ),
        path,
    )


def load_checkpoint(path, backbone: nn.Module | None = None) -> tuple[LipFD, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = RunConfig.from_dict(payload["config"])
    model = LipFD(cfg, backbone)
    dtype = next(iter(payload["state_dict"].values())).dtype
    model.to(dtype)
    model.load_state_dict(payload["state_dict"])
    model.mark_ready()
    return model, payload
