"""SAttisUNet: Swin encoder-decoder with cross-covariance attentive skips,
plus the loss, training loop, inference and evaluation metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import FinalExpand, PatchEmbed, PatchExpand, PatchMerge, SwinBlock, XCABlock
from .errors import NonFiniteError, ShapeError, ValidationError
from .nn import AdamW, LayerNorm, Linear, Module, cosine_lr
from .rng import make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)

SKIP_MODES = ("attentive", "concat", "none")


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 5
    patch: int = 4
    base_dim: int = 48
    depths: tuple[int, ...] = (2, 2, 2)
    heads: tuple[int, ...] = (3, 6, 12)
    window: int = 4
    skip_mode: str = "attentive"
    drop_rate: float = 0.0
    mlp_ratio: float = 4.0
    rel_pos_bias: bool = True
    # ablation hook: number of decoder levels (from the finest) that get a skip
    num_skips: int | None = None
    zero_init_head: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.depths) != len(self.heads):
            raise ValidationError(f"depths {self.depths} and heads {self.heads} differ in length")
        if len(self.depths) < 1:
            raise ValidationError("need at least one stage")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.skip_mode not in SKIP_MODES:
            raise ValidationError(f"skip_mode must be one of {SKIP_MODES}, got {self.skip_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for i, h in enumerate(self.heads):
            if (self.base_dim * 2 ** i) % h:
                raise ValidationError(f"stage {i} width {self.base_dim * 2 ** i} not divisible by {h} heads")
        if any(v <= 0 for v in (self.in_channels, self.patch, self.base_dim, self.window)):
            raise ValidationError("in_channels, patch, base_dim and window must be positive")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def stride(self) -> int:
        """Input sides must be multiples of this (patch * merges * window)."""
        return self.patch * 2 ** (self.num_stages - 1) * self.window

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 0.01
    seed: int = 0
    w_ce: float = 1.0
    w_dice: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 20
    min_lr: float = 1e-5
    hflip: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValidationError("epochs must be >= 0 and batch_size > 0")
        if self.lr < 0 or self.weight_decay < 0 or self.w_ce < 0 or self.w_dice < 0:
            raise ValidationError("learning rate, weight decay and loss weights must be non-negative")
        if self.w_ce + self.w_dice <= 0:
            raise ValidationError("w_ce + w_dice must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class SwinStage(Module):
    def __init__(self, dim, depth, heads, window, rng, cfg: ModelConfig, dtype):
        self.blocks = [
            SwinBlock(dim, heads, window, 0 if i % 2 == 0 else window // 2, rng, mlp_ratio=cfg.mlp_ratio,
                      drop=cfg.drop_rate, rel_pos_bias=cfg.rel_pos_bias, dtype=dtype)
            for i in range(depth)
        ]

    def forward(self, x, H, W):
        for blk in self.blocks:
            x = blk(x, H, W)
        return x


class AttentiveSkip(Module):
    """Fuses encoder tokens E into decoder tokens D at one resolution.

    attentive: concat(E, D) -> XCA block -> layernorm -> linear to D width -> + D
    concat:    concat(E, D) -> linear to D width
    none:      D unchanged
    """

    def __init__(self, dim: int, heads: int, mode: str, rng, cfg: ModelConfig, dtype):
        self.mode = mode
        if mode == "attentive":
            self.block = XCABlock(2 * dim, heads, rng, mlp_ratio=cfg.mlp_ratio, drop=cfg.drop_rate, dtype=dtype)
            self.norm = LayerNorm(2 * dim, dtype)
            self.proj = Linear(2 * dim, dim, rng, dtype=dtype)
        elif mode == "concat":
            self.proj = Linear(2 * dim, dim, rng, dtype=dtype)

    def forward(self, enc: Tensor, dec: Tensor) -> Tensor:
        if enc.shape != dec.shape:
            raise ShapeError(f"skip: encoder {enc.shape} vs decoder {dec.shape}")
        if self.mode == "none":
            return dec
        z = T.concat([enc, dec], axis=-1)
        if self.mode == "concat":
            return self.proj(z)
        z = self.block(z)
        return T.add(dec, self.proj(self.norm(z)))


class SAttisUNet(Module):
    """Token grid flow for the default 64x64 input (p=4, three stages):

    embed 16x16xC -> stage0 -> merge 8x8x2C -> stage1 -> merge 4x4x4C
    -> bottleneck -> expand 8x8x2C -> skip(stage1) -> dec -> expand 16x16xC
    -> skip(stage0) -> dec -> final expand x4 -> linear head.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype)
        rng = make_rng(cfg.seed, 0)
        self._rng = rng
        C, S, M = cfg.base_dim, cfg.num_stages, cfg.window
        self.embed = PatchEmbed(cfg.in_channels, C, cfg.patch, rng, dtype=dtype)
        self.encoder = [SwinStage(C * 2 ** i, cfg.depths[i], cfg.heads[i], M, rng, cfg, dtype) for i in range(S - 1)]
        self.merges = [PatchMerge(C * 2 ** i, rng, dtype) for i in range(S - 1)]
        self.bottleneck = SwinStage(C * 2 ** (S - 1), cfg.depths[-1], cfg.heads[-1], M, rng, cfg, dtype)
        levels = list(reversed(range(S - 1)))  # decoder visits the finest level last
        n_skips = S - 1 if cfg.num_skips is None else cfg.num_skips
        self.expands = [PatchExpand(C * 2 ** (i + 1), rng, dtype) for i in levels]
        self.skips = [
            AttentiveSkip(C * 2 ** i, cfg.heads[i], cfg.skip_mode if i < n_skips else "none", rng, cfg, dtype)
            for i in levels
        ]
        self.decoder = [SwinStage(C * 2 ** i, cfg.depths[i], cfg.heads[i], M, rng, cfg, dtype) for i in levels]
        self.norm_up = LayerNorm(C, dtype)
        self.final = FinalExpand(C, cfg.patch, rng, dtype)
        self.head = Linear(C, cfg.num_classes, rng, dtype=dtype)
        if cfg.zero_init_head:
            self.head.weight.data[...] = 0
        self.assign_names()

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.cfg.dtype)

    def padded_size(self, H: int, W: int) -> tuple[int, int]:
        m = self.cfg.stride
        return -(-H // m) * m, -(-W // m) * m

    def forward(self, image, force_pad: bool = False) -> Tensor:
        """[B, H, W, in_ch] -> logits [B, H, W, num_classes]."""
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        if x.ndim != 4 or x.shape[-1] != self.cfg.in_channels:
            raise ShapeError(f"expected [B, H, W, {self.cfg.in_channels}] input, got {x.shape}")
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        B, H, W, _ = x.shape
        Hp, Wp = self.padded_size(H, W)
        padded = force_pad or (Hp, Wp) != (H, W)
        if padded:
            x = T.pad(x, [(0, 0), (0, Hp - H), (0, Wp - W), (0, 0)])
        p = self.cfg.patch
        h, w = Hp // p, Wp // p
        t = self.embed(x)
        feats = []
        for stage, merge in zip(self.encoder, self.merges):
            t = stage(t, h, w)
            feats.append(t)
            t = merge(t, h, w)
            h, w = h // 2, w // 2
        t = self.bottleneck(t, h, w)
        for expand, skip, stage, enc in zip(self.expands, self.skips, self.decoder, reversed(feats)):
            t = expand(t, h, w)
            h, w = h * 2, w * 2
            t = stage(skip(enc, t), h, w)
        t = self.final(self.norm_up(t), h, w)
        logits = T.reshape(self.head(t), (B, Hp, Wp, self.cfg.num_classes))
        if padded:
            logits = logits[:, :H, :W, :]
        return logits


# ---------------------------------------------------------------------------
# Loss, training
# ---------------------------------------------------------------------------
def segmentation_loss(logits: Tensor, labels: np.ndarray, w_ce: float = 1.0, w_dice: float = 1.0,
                      smooth: float = 1.0) -> Tensor:
    """w_ce * cross-entropy + w_dice * soft Dice (all classes), channels-last logits."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    terms = []
    if w_ce:
        terms.append(T.scale(T.cross_entropy_loss(logits, labels, class_axis=-1), w_ce))
    if w_dice:
        probs = T.softmax(logits, -1)
        target = T.one_hot(labels, k, class_axis=-1, dtype=logits.dtype)
        terms.append(T.scale(T.dice_loss(probs, target, smooth, class_axis=-1), w_dice))
    out = terms[0]
    for extra in terms[1:]:
        out = T.add(out, extra)
    return out


def normalize_image(img: np.ndarray) -> np.ndarray:
    """Per-slice z-scoring over the last two spatial axes ([..., H, W])."""
    img = np.asarray(img, dtype=np.float64)
    mu = img.mean(axis=(-2, -1), keepdims=True)
    sd = img.std(axis=(-2, -1), keepdims=True)
    return (img - mu) / np.where(sd > 1e-8, sd, 1.0)


def _first_nonfinite(model: Module) -> str | None:
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name
    return None


def train_step(model: SAttisUNet, optimizer: AdamW, images: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, loss_fn: Callable | None = None) -> float:
    """One optimizer update on a batch. ``images`` is [B, H, W] or [B, H, W, ch]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    optimizer.zero_grad()
    logits = model(Tensor(images.astype(model.dtype)))
    if loss_fn is None:
        loss = segmentation_loss(logits, labels, cfg.w_ce, cfg.w_dice)
    else:
        loss = loss_fn(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value}")
    T.backward(loss)
    bad = _first_nonfinite(model)
    if bad is not None:
        raise NonFiniteError(f"non-finite gradient in parameter {bad!r} (loss {value})")
    optimizer.step()
    return value


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)


def train(model: SAttisUNet, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
          callback: Callable[[int, float], None] | None = None) -> TrainHistory:
    """Mini-batch AdamW with linear warmup and cosine decay.

    ``images`` [N, H, W] (normalized by the caller), ``labels`` [N, H, W].
    Random horizontal flips when ``cfg.hflip``.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[:3] != labels.shape:
        raise ShapeError(f"images {images.shape} and labels {labels.shape} disagree")
    n = len(images)
    rng = make_rng(cfg.seed, 1)
    opt = AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, -(-n // cfg.batch_size))
    total = steps_per_epoch * cfg.epochs
    hist = TrainHistory()
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            xb, yb = images[idx], labels[idx]
            if cfg.hflip:
                flip = rng.random(len(idx)) < 0.5
                xb = np.where(flip[:, None, None], xb[:, :, ::-1], xb)
                yb = np.where(flip[:, None, None], yb[:, :, ::-1], yb)
            opt.lr = cosine_lr(cfg.lr, step, total, cfg.warmup_steps, cfg.min_lr) if cfg.lr else 0.0
            losses.append(train_step(model, opt, xb, yb, cfg))
            step += 1
        hist.epoch_loss.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch + 1, hist.epoch_loss[-1])
        if callback is not None:
            callback(epoch, hist.epoch_loss[-1])
    model.eval()
    return hist


# ---------------------------------------------------------------------------
# Inference and metrics
# ---------------------------------------------------------------------------
def predict_logits(model: SAttisUNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    was_training = model.training
    model.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(Tensor(images[start:start + batch_size].astype(model.dtype))).data)
    model.train(was_training)
    return np.concatenate(out, axis=0)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the last axis; ties go to the lowest class index."""
    return np.argmax(logits, axis=-1).astype(np.uint8)


def predict(model: SAttisUNet, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    return argmax_labels(predict_logits(model, images, batch_size))


def segment_volume(model: SAttisUNet, volume: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Slice-wise segmentation of a [Z, Y, X] intensity volume."""
    return predict(model, normalize_image(volume), batch_size)


def dice_score(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    p = np.asarray(pred) == cls
    t = np.asarray(truth) == cls
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def mean_foreground_dice(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    return float(np.mean([dice_score(pred, truth, c) for c in range(1, num_classes)]))


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(truth)))


def build_model(cfg: ModelConfig | dict | None = None, **overrides) -> SAttisUNet:
    if cfg is None:
        cfg = ModelConfig(**overrides)
    elif isinstance(cfg, dict):
        cfg = ModelConfig.from_dict({**cfg, **overrides})
    elif overrides:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), **overrides})
    return SAttisUNet(cfg)


def evaluate(model: SAttisUNet, images: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    pred = predict(model, images)
    k = model.cfg.num_classes
    per_class = {c: dice_score(pred, labels, c) for c in range(1, k)}
    return {
        "mean_fg_dice": float(np.mean(list(per_class.values()))),
        "pixel_accuracy": pixel_accuracy(pred, labels),
        **{f"dice_{c}": v for c, v in per_class.items()},
    }
