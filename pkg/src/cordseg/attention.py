"""Shifted-window self-attention, cross-covariance attention and the patch
embed/merge/expand operators of the hierarchical encoder-decoder."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .nn import LayerNorm, Linear, Mlp, Module, trunc_normal
from .tensor import Parameter, Tensor

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowConfig:
    window_size: int
    shift: int = 0

    def __post_init__(self):
        if self.window_size < 1:
            raise ValidationError("window_size must be positive")
        if not 0 <= self.shift < self.window_size:
            raise ValidationError(f"shift must lie in [0, {self.window_size}), got {self.shift}")


@dataclass(frozen=True)
class AttentionSpec:
    embed_dim: int
    num_heads: int

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValidationError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def scale(self) -> float:
        return self.head_dim ** -0.5


# ---------------------------------------------------------------------------
# Window geometry
# ---------------------------------------------------------------------------
def _check_divisible(H: int, W: int, M: int) -> None:
    if H % M or W % M:
        raise ShapeError(f"feature map {H}x{W} is not divisible by window size {M}; pad it to a multiple of {M}")


def window_partition(x: Tensor, M: int) -> Tensor:
    """[B, H, W, C] -> [B * H/M * W/M, M*M, C], windows in row-major order."""
    B, H, W, C = x.shape
    _check_divisible(H, W, M)
    x = T.reshape(x, (B, H // M, M, W // M, M, C))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B * (H // M) * (W // M), M * M, C))


def window_reverse(windows: Tensor, M: int, H: int, W: int) -> Tensor:
    _check_divisible(H, W, M)
    nw = (H // M) * (W // M)
    n, L, C = windows.shape
    if L != M * M or n % nw:
        raise ShapeError(f"window_reverse: {windows.shape} is inconsistent with {H}x{W} and window {M}")
    B = n // nw
    x = T.reshape(windows, (B, H // M, W // M, M, M, C))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H, W, C))


def cyclic_shift(x: Tensor, s: int) -> Tensor:
    """Toroidal roll by (-s, -s) over the spatial axes of [B, H, W, C]."""
    return T.roll(x, (-s, -s), (1, 2))


def reverse_cyclic_shift(x: Tensor, s: int) -> Tensor:
    return T.roll(x, (s, s), (1, 2))


@lru_cache(maxsize=64)
def _region_ids(H: int, W: int, M: int, s: int) -> np.ndarray:
    img = np.zeros((H, W), dtype=np.int64)
    bands = (slice(0, -M), slice(-M, -s), slice(-s, None))
    cnt = 0
    for hs in bands:
        for ws in bands:
            img[hs, ws] = cnt
            cnt += 1
    return img


@lru_cache(maxsize=64)
def shift_attention_mask(H: int, W: int, M: int, s: int) -> np.ndarray:
    """Additive mask [num_windows, M*M, M*M] for shifted windows.

    Token pairs whose (pre-shift) regions differ get ``MASK_VALUE``.
    """
    if not 0 < s < M:
        raise ValidationError(f"shift must lie in (0, {M}) for a masked window; s={s} needs no mask")
    _check_divisible(H, W, M)
    ids = _region_ids(H, W, M, s)
    win = ids.reshape(H // M, M, W // M, M).transpose(0, 2, 1, 3).reshape(-1, M * M)
    mask = np.where(win[:, :, None] != win[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=16)
def relative_position_index(M: int) -> np.ndarray:
    """[M*M, M*M] map from token pairs to entries of a (2M-1)^2 table."""
    coords = np.stack(np.meshgrid(np.arange(M), np.arange(M), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (M - 1)
    index = rel[:, :, 0] * (2 * M - 1) + rel[:, :, 1]
    index.setflags(write=False)
    return index


# ---------------------------------------------------------------------------
# Attention modules
# ---------------------------------------------------------------------------
def _split_heads(qkv: Tensor, heads: int) -> tuple[Tensor, Tensor, Tensor]:
    B, N, C3 = qkv.shape
    C = C3 // 3
    x = T.reshape(qkv, (B, N, 3, heads, C // heads))
    x = T.permute(x, (2, 0, 3, 1, 4))
    return x[0], x[1], x[2]


def _merge_heads(x: Tensor) -> Tensor:
    B, h, N, d = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (B, N, h * d))


class WindowAttention(Module):
    """Multi-head self-attention inside windows of ``window_size**2`` tokens.

    With ``window_size=None`` it is plain dense attention over all tokens
    (no position bias); used as the quadratic baseline.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int | None, rng: np.random.Generator,
                 rel_pos_bias: bool = True, qkv_bias: bool = True, drop: float = 0.0, dtype=np.float32):
        self.spec = AttentionSpec(dim, num_heads)
        self.window_size = window_size
        self.qkv = Linear(dim, 3 * dim, rng, bias=qkv_bias, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.rel_pos_bias = rel_pos_bias and window_size is not None
        if self.rel_pos_bias:
            M = window_size
            self.bias_table = Parameter(trunc_normal(rng, ((2 * M - 1) ** 2, num_heads)), dtype=dtype)
        else:
            self.bias_table = None
        self.drop = drop
        self._rng = rng

    def position_bias(self) -> Tensor:
        M = self.window_size
        n = M * M
        b = T.take(self.bias_table, relative_position_index(M))  # [n, n, h]
        return T.reshape(T.permute(b, (2, 0, 1)), (1, self.spec.num_heads, n, n))

    def forward(self, x: Tensor, mask: np.ndarray | None = None, return_attention: bool = False):
        Bw, N, C = x.shape
        if self.window_size is not None and N != self.window_size ** 2:
            raise ShapeError(f"expected {self.window_size ** 2} tokens per window, got {N}")
        h = self.spec.num_heads
        q, k, v = _split_heads(self.qkv(x), h)
        scores = T.matmul(T.scale(q, self.spec.scale), T.transpose(k))  # [Bw, h, N, N]
        if self.bias_table is not None:
            scores = T.add(scores, T.broadcast_to(self.position_bias(), scores.shape))
        if mask is not None:
            nw = mask.shape[0]
            if mask.shape[1:] != (N, N) or Bw % nw:
                raise ShapeError(f"mask {mask.shape} does not match {Bw} windows of {N} tokens")
            scores = T.reshape(scores, (Bw // nw, nw, h, N, N))
            scores = T.add_const(scores, mask[None, :, None])
            scores = T.reshape(scores, (Bw, h, N, N))
        attn = T.softmax(scores, -1)
        attn_d = T.dropout(attn, self.drop, self._rng, self.training)
        out = self.proj(_merge_heads(T.matmul(attn_d, v)))
        return (out, attn.data) if return_attention else out


class XCA(Module):
    """Cross-covariance attention: attention over the d x d channel map of
    each head, linear in the number of tokens.

    Query and key columns are L2-normalized over tokens; the channel map is
    divided by a learnable per-head temperature ``exp(theta)``.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, qkv_bias: bool = True,
                 drop: float = 0.0, dtype=np.float32):
        self.spec = AttentionSpec(dim, num_heads)
        self.qkv = Linear(dim, 3 * dim, rng, bias=qkv_bias, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.log_temperature = Parameter(np.zeros(num_heads), dtype=dtype)
        self.drop = drop
        self._rng = rng

    def forward(self, x: Tensor, return_attention: bool = False):
        B, N, C = x.shape
        h, d = self.spec.num_heads, self.spec.head_dim
        q, k, v = _split_heads(self.qkv(x), h)  # [B, h, N, d]
        q = T.l2_normalize(q, axis=-2)
        k = T.l2_normalize(k, axis=-2)
        cov = T.matmul(T.transpose(q), k)  # [B, h, d, d]
        inv_tau = T.reshape(T.exp(T.neg(self.log_temperature)), (1, h, 1, 1))
        cov = T.mul(cov, T.broadcast_to(inv_tau, cov.shape))
        attn = T.softmax(cov, -1)
        attn_d = T.dropout(attn, self.drop, self._rng, self.training)
        out = T.matmul(v, T.transpose(attn_d))  # [B, h, N, d]
        out = self.proj(_merge_heads(out))
        return (out, attn.data) if return_attention else out


# ---------------------------------------------------------------------------
# Spatial operators on token grids
# ---------------------------------------------------------------------------
class PatchEmbed(Module):
    """Non-overlapping p x p patches, linearly projected (then layer-normed)."""

    def __init__(self, in_ch: int, dim: int, patch: int, rng: np.random.Generator, norm: bool = True,
                 bias: bool = True, dtype=np.float32):
        self.patch = patch
        self.proj = Linear(patch * patch * in_ch, dim, rng, bias=bias, dtype=dtype)
        self.norm = LayerNorm(dim, dtype) if norm else None

    def forward(self, image: Tensor) -> Tensor:
        B, H, W, ch = image.shape
        p = self.patch
        if H % p or W % p:
            raise ShapeError(f"image {H}x{W} is not divisible by patch size {p}")
        x = T.reshape(image, (B, H // p, p, W // p, p, ch))
        x = T.permute(x, (0, 1, 3, 2, 4, 5))
        x = self.proj(T.reshape(x, (B, (H // p) * (W // p), p * p * ch)))
        return self.norm(x) if self.norm is not None else x


class PatchMerge(Module):
    """2x2 neighbour concatenation (4C), layernorm, linear to 2C."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.norm = LayerNorm(4 * dim, dtype)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False, dtype=dtype)

    @staticmethod
    def gather(x: Tensor, H: int, W: int) -> Tensor:
        """Concatenate neighbours in the order (0,0), (1,0), (0,1), (1,1)."""
        B, L, C = x.shape
        if L != H * W or H % 2 or W % 2:
            raise ShapeError(f"patch_merge needs even H, W with H*W tokens; got {x.shape} for {H}x{W}")
        x = T.reshape(x, (B, H // 2, 2, W // 2, 2, C))
        x = T.permute(x, (0, 1, 3, 4, 2, 5))
        return T.reshape(x, (B, (H // 2) * (W // 2), 4 * C))

    def forward(self, x: Tensor, H: int, W: int) -> Tensor:
        return self.reduction(self.norm(self.gather(x, H, W)))


def _expand(x: Tensor, H: int, W: int, f: int, c_out: int) -> Tensor:
    B = x.shape[0]
    x = T.reshape(x, (B, H, W, f, f, c_out))
    x = T.permute(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H * f * W * f, c_out))


class PatchExpand(Module):
    """Linear C -> 2C, rearranged into 2x2 blocks of C/2 channels."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        if dim % 2:
            raise ValidationError(f"patch_expand needs an even channel count, got {dim}")
        self.expand = Linear(dim, 2 * dim, rng, bias=False, dtype=dtype)
        self.norm = LayerNorm(dim // 2, dtype)

    def forward(self, x: Tensor, H: int, W: int) -> Tensor:
        B, L, C = x.shape
        if L != H * W:
            raise ShapeError(f"patch_expand: {L} tokens for a {H}x{W} grid")
        return self.norm(_expand(self.expand(x), H, W, 2, C // 2))


class FinalExpand(Module):
    """Linear C -> f*f*C rearranged to f x f blocks; restores patch resolution."""

    def __init__(self, dim: int, factor: int, rng: np.random.Generator, dtype=np.float32):
        self.factor = factor
        self.expand = Linear(dim, factor * factor * dim, rng, bias=False, dtype=dtype)
        self.norm = LayerNorm(dim, dtype)

    def forward(self, x: Tensor, H: int, W: int) -> Tensor:
        return self.norm(_expand(self.expand(x), H, W, self.factor, x.shape[-1]))


def shifted_window_attention(attn: WindowAttention, x: Tensor, M: int, s: int) -> Tensor:
    """W-MSA (``s == 0``) or SW-MSA over a [B, H, W, C] map; returns the same shape."""
    B, H, W, C = x.shape
    mask = None
    if s:
        x = cyclic_shift(x, s)
        mask = shift_attention_mask(H, W, M, s)
    y = window_reverse(attn(window_partition(x, M), mask), M, H, W)
    return reverse_cyclic_shift(y, s) if s else y


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------
class SwinBlock(Module):
    """Pre-norm transformer block with (shifted-)window attention."""

    def __init__(self, dim: int, num_heads: int, window_size: int, shift: int, rng: np.random.Generator,
                 mlp_ratio: float = 4.0, drop: float = 0.0, rel_pos_bias: bool = True, dtype=np.float32):
        self.window = WindowConfig(window_size, shift)
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = WindowAttention(dim, num_heads, window_size, rng, rel_pos_bias=rel_pos_bias,
                                    drop=drop, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, drop=drop, dtype=dtype)

    def forward(self, x: Tensor, H: int, W: int) -> Tensor:
        B, L, C = x.shape
        M, s = self.window.window_size, self.window.shift
        y = shifted_window_attention(self.attn, T.reshape(self.norm1(x), (B, H, W, C)), M, s)
        x = T.add(x, T.reshape(y, (B, L, C)))
        return T.add(x, self.mlp(self.norm2(x)))


class XCABlock(Module):
    """Pre-norm residual cross-covariance attention followed by an MLP."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, mlp_ratio: float = 4.0,
                 drop: float = 0.0, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = XCA(dim, num_heads, rng, drop=drop, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng, drop=drop, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x)))
        return T.add(x, self.mlp(self.norm2(x)))
