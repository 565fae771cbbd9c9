"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a node (parents plus a backward
closure) on its output. ``backward`` collects the reachable nodes, orders
them by creation sequence (which is a topological order, since an output is
always created after its inputs) and propagates gradients in reverse.

Shapes are strict: apart from the leading batch dimensions of ``matmul``
nothing broadcasts implicitly. Use ``broadcast_to`` or ``reshape``.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ShapeError, ValidationError

DEFAULT_DTYPE = np.float32
_SUPPORTED = (np.float32, np.float64)

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype if dtype is not None else DEFAULT_DTYPE)
    if dt.type not in _SUPPORTED:
        raise ValidationError(f"unsupported tensor dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """N-dimensional array participating in autodiff.

    ``grad`` is a plain ndarray of the same shape, populated by ``backward``.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None and arr.dtype.type in _SUPPORTED:
            dt = arr.dtype
        else:
            dt = _as_dtype(dtype)
        self.data: np.ndarray = np.ascontiguousarray(arr, dtype=dt)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_seq)

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """Trainable leaf tensor. ``name`` is assigned when a module registers it."""

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------
class Tape:
    """Ordered record of the differentiable operations that produced ``output``.

    ``nodes`` is sorted by creation sequence, so every node appears after all
    producers of its inputs.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def is_topological(self) -> bool:
        pos = {id(t): i for i, t in enumerate(self.nodes)}
        return all(pos.get(id(p), -1) < i for i, t in enumerate(self.nodes) for p in t._parents)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients accumulate into existing leaf grads. The graph is released
    afterwards (the tape is consumed).
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValidationError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                # leaf
                p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + a.dtype.type(c), (a,), lambda g: (g,))


def add_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array that broadcasts to ``a.shape`` (masks)."""
    const = np.asarray(const, dtype=a.dtype)
    if np.broadcast_shapes(a.shape, const.shape) != a.shape:
        raise ShapeError(f"add_const: {const.shape} does not broadcast to {a.shape}")
    return _make(a.data + const, (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2 * g * ad,))


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd * _SQRT_HALF))
    out = (xd * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(x.dtype, copy=False),)

    return _make(out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValidationError("dropout with rate > 0 needs a generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from exc
    orig = a.shape
    return _make(out, (a,), lambda g: (g.reshape(orig),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inv),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing. Advanced indexing is not supported."""
    keys = key if isinstance(key, tuple) else (key,)
    for k in keys:
        if not (isinstance(k, (slice, int)) or k is Ellipsis or k is None):
            raise ShapeError("getitem supports only slices, ints, Ellipsis and None")
    out = a.data[key]
    shape, dt = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        full[key] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = _norm_axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]} on axis {axis}")
        if t.dtype != tensors[0].dtype:
            raise ShapeError("concat: dtype mismatch")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)))


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad: need {a.ndim} width pairs, got {len(widths)}")
    out = np.pad(a.data, widths)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(out, (a,), lambda g: (np.ascontiguousarray(g[index]),))


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    out = np.roll(a.data, shifts, axes)
    back = tuple(-s for s in shifts)
    return _make(out, (a,), lambda g: (np.roll(g, back, axes),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the gradient sums over the expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    orig = a.shape
    return _make(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, orig),))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (axis 0) at integer ``index`` (any shape)."""
    index = np.asarray(index, dtype=np.intp)
    out = table.data[index]
    shape, dt = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return _make(out, (table,), bw)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; only leading batch dimensions broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from exc
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., in] @ weight[in, out] (+ bias[out])``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# Normalizations
# ---------------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    out = x.data - x.data.max(axis=ax, keepdims=True)
    np.exp(out, out=out)  # in place: attention maps are the largest arrays we hold
    out /= out.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _make(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=ax, keepdims=True),)

    return _make(out, (x,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layernorm: gamma/beta {gamma.shape}/{beta.shape} vs last axis {n}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide by ``max(||x||_2, eps)`` along ``axis``."""
    ax = _norm_axis(axis, x.ndim)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=ax, keepdims=True))
    clipped = norm < eps
    denom = np.where(clipped, eps, norm)
    out = xd / denom

    def bw(g):
        # for clipped slices the denominator is constant
        proj = (g * out).sum(axis=ax, keepdims=True)
        gx = (g - np.where(clipped, 0.0, out * proj)) / denom
        return (gx.astype(x.dtype, copy=False),)

    return _make(out.astype(x.dtype, copy=False), (x,), bw)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------
def cross_entropy_loss(logits: Tensor, targets: np.ndarray, class_axis: int = 1) -> Tensor:
    """Mean negative log-softmax of the true class.

    ``logits`` has the class dimension at ``class_axis``; ``targets`` has the
    logits shape with that axis removed.
    """
    ax = _norm_axis(class_axis, logits.ndim)
    k = logits.shape[ax]
    targets = np.asarray(targets)
    expected = logits.shape[:ax] + logits.shape[ax + 1:]
    if targets.shape != expected:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape} (class axis {ax})")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        bad = targets[(targets < 0) | (targets >= k)][0]
        raise ValidationError(f"cross_entropy: label {int(bad)} outside [0, {k})")
    logp = log_softmax(logits, ax)
    onehot = np.moveaxis(np.eye(k, dtype=logits.dtype)[targets], -1, ax)
    return scale(sum_(mul(logp, Tensor(onehot))), -1.0 / targets.size)


def one_hot(labels: np.ndarray, num_classes: int, class_axis: int = 1, dtype=None) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.eye(num_classes, dtype=_as_dtype(dtype))[labels]
    return np.moveaxis(out, -1, class_axis)


def dice_loss(probs: Tensor, one_hot_targets, smooth: float = 1.0, class_axis: int = 1) -> Tensor:
    """1 - mean over classes of (2 sum(p t) + s) / (sum(p) + sum(t) + s)."""
    t = one_hot_targets.data if isinstance(one_hot_targets, Tensor) else np.asarray(one_hot_targets)
    if t.shape != probs.shape:
        raise ShapeError(f"dice_loss: probs {probs.shape} vs targets {t.shape}")
    ax = _norm_axis(class_axis, probs.ndim)
    red = tuple(i for i in range(probs.ndim) if i != ax)
    p = probs.data
    t = t.astype(p.dtype, copy=False)
    inter = (p * t).sum(axis=red)
    den = p.sum(axis=red) + t.sum(axis=red) + smooth
    num = 2 * inter + smooth
    k = p.shape[ax]
    out = np.asarray(1.0 - (num / den).mean(), dtype=p.dtype)

    def bw(g):
        shape = [1] * p.ndim
        shape[ax] = k
        dn = den.reshape(shape)
        nm = num.reshape(shape)
        return ((-g / k) * (2 * t * dn - nm) / (dn * dn),)

    return _make(out, (probs,), bw)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------
def relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-6) -> np.ndarray:
    """Elementwise relative error, falling back to absolute error when both
    magnitudes are below ``abs_floor``.

    Central differences at step 1e-5 carry ~1e-11 absolute noise, so
    relative error is not meaningful for gradients much smaller than 1e-6.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(analytic - numeric)
    scale_ = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.where(scale_ < abs_floor, diff, diff / np.where(scale_ < abs_floor, 1.0, scale_))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5,
                 coords: Iterable[tuple[int, ...]] | None = None) -> dict[tuple[int, ...], float]:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (modified in place)."""
    if coords is None:
        coords = list(np.ndindex(*x.shape))
    out = {}
    with no_grad():
        for idx in coords:
            orig = x.data[idx]
            x.data[idx] = orig + step
            fp = float(f().data)
            x.data[idx] = orig - step
            fm = float(f().data)
            x.data[idx] = orig
            out[idx] = (fp - fm) / (2 * step)
    return out


def grad_check(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], step: float = 1e-5,
               coords: dict[int, Sequence[tuple[int, ...]]] | None = None) -> float:
    """Max relative error between ``backward()`` and central differences.

    ``f`` is called with the input tensors and must return a scalar (a
    non-scalar output is summed against a fixed random projection so every
    output coordinate contributes). ``coords`` optionally restricts which
    entries of input ``i`` are probed.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for x in xs:
        x.requires_grad = True
        x.grad = None
    probe = {}

    def scalar():
        y = f(*xs)
        if y.size == 1:
            return y if y.ndim == 0 else reshape(y, ())
        if "w" not in probe:
            rng = np.random.default_rng(1234)
            probe["w"] = rng.standard_normal(y.shape).astype(y.dtype)
        return sum_(mul(y, Tensor(probe["w"])))

    backward(scalar())
    worst = 0.0
    for i, x in enumerate(xs):
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        cs = None if coords is None else coords.get(i)
        num = numeric_grad(scalar, x, step, cs)
        idx = list(num)
        a = np.array([analytic[j] for j in idx])
        n = np.array([num[j] for j in idx])
        if len(idx):
            worst = max(worst, float(relative_error(a, n).max()))
    return worst
