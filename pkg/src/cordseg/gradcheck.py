"""Finite-difference gradient suite over every differentiable operation and
the assembled network (float64)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import (PatchEmbed, PatchExpand, PatchMerge, SwinBlock, WindowAttention, XCA,
                        shift_attention_mask)
from .model import AttentiveSkip, ModelConfig, SAttisUNet, segmentation_loss
from .rng import make_rng
from .tensor import Tensor

OP_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _t(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _op_cases(rng) -> dict[str, Callable[[], float]]:
    f64 = np.float64
    tiny_cfg = ModelConfig(base_dim=8, heads=(2, 2, 4), patch=2, window=2, num_classes=3, dtype="float64", seed=3)

    labels = rng.integers(0, 4, size=(2, 3, 3))
    win_mask = shift_attention_mask(4, 4, 2, 1)

    cases = {
        "matmul": lambda: T.grad_check(T.matmul, [_t(rng, 2, 3, 4), _t(rng, 4, 5)], STEP),
        "add": lambda: T.grad_check(T.add, [_t(rng, 3, 4), _t(rng, 3, 4)], STEP),
        "sub": lambda: T.grad_check(T.sub, [_t(rng, 3, 4), _t(rng, 3, 4)], STEP),
        "mul": lambda: T.grad_check(T.mul, [_t(rng, 3, 4), _t(rng, 3, 4)], STEP),
        "div": lambda: T.grad_check(T.div, [_t(rng, 3, 4), _t(rng, 3, 4, positive=True)], STEP),
        "scale": lambda: T.grad_check(lambda a: T.scale(a, -2.5), [_t(rng, 5)], STEP),
        "exp": lambda: T.grad_check(T.exp, [_t(rng, 6)], STEP),
        "log": lambda: T.grad_check(T.log, [_t(rng, 6, positive=True)], STEP),
        "gelu": lambda: T.grad_check(T.gelu, [_t(rng, 4, 5)], STEP),
        "softmax": lambda: T.grad_check(lambda a: T.softmax(a, 1), [_t(rng, 3, 5, 2)], STEP),
        "log_softmax": lambda: T.grad_check(lambda a: T.log_softmax(a, -1), [_t(rng, 3, 5)], STEP),
        "layernorm": lambda: T.grad_check(T.layernorm, [_t(rng, 4, 6), _t(rng, 6), _t(rng, 6)], STEP),
        "l2_normalize": lambda: T.grad_check(lambda a: T.l2_normalize(a, axis=0), [_t(rng, 5, 3)], STEP),
        "sum_mean": lambda: T.grad_check(lambda a: T.add(T.sum_(a, 1), T.mean(a, 1)), [_t(rng, 3, 4)], STEP),
        "concat": lambda: T.grad_check(lambda a, b: T.concat([a, b], 1), [_t(rng, 2, 3), _t(rng, 2, 2)], STEP),
        "slice": lambda: T.grad_check(lambda a: a[:, 1::2], [_t(rng, 3, 6)], STEP),
        "reshape_permute": lambda: T.grad_check(lambda a: T.permute(T.reshape(a, (3, 2, 4)), (2, 0, 1)),
                                                [_t(rng, 6, 4)], STEP),
        "pad": lambda: T.grad_check(lambda a: T.pad(a, [(0, 1), (2, 0)]), [_t(rng, 3, 3)], STEP),
        "roll": lambda: T.grad_check(lambda a: T.roll(a, (1, -2), (0, 1)), [_t(rng, 4, 5)], STEP),
        "broadcast_to": lambda: T.grad_check(lambda a: T.broadcast_to(a, (3, 2, 4)), [_t(rng, 2, 1)], STEP),
        "take": lambda: T.grad_check(lambda a: T.take(a, np.array([[0, 2], [2, 1]])), [_t(rng, 3, 2)], STEP),
        "linear": lambda: T.grad_check(T.linear, [_t(rng, 2, 3, 4), _t(rng, 4, 5), _t(rng, 5)], STEP),
        "cross_entropy": lambda: T.grad_check(lambda a: T.cross_entropy_loss(a, labels, 1), [_t(rng, 2, 4, 3, 3)], STEP),
        "dice_loss": lambda: T.grad_check(
            lambda a: T.dice_loss(T.softmax(a, 1), T.one_hot(labels, 4, 1, f64), 1.0, 1), [_t(rng, 2, 4, 3, 3)], STEP),
        "window_msa": lambda: _window_case(rng, win_mask),
        "xca": lambda: _module_case(XCA(8, 2, rng, dtype=f64), _t(rng, 2, 5, 8), lambda m, x: m(x)),
        "patch_embed": lambda: _module_case(PatchEmbed(2, 6, 2, rng, dtype=f64), _t(rng, 1, 4, 4, 2), lambda m, x: m(x)),
        "patch_merge": lambda: _module_case(PatchMerge(3, rng, f64), _t(rng, 1, 16, 3), lambda m, x: m(x, 4, 4)),
        "patch_expand": lambda: _module_case(PatchExpand(4, rng, f64), _t(rng, 1, 4, 4), lambda m, x: m(x, 2, 2)),
        "swin_block_shifted": lambda: _module_case(SwinBlock(4, 2, 2, 1, rng, dtype=f64), _t(rng, 1, 16, 4),
                                                   lambda m, x: m(x, 4, 4)),
        "attentive_skip": lambda: _skip_case(rng, tiny_cfg),
    }
    return cases


def _randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.data[...] += scale * rng.standard_normal(p.shape)


def _module_case(module, x, fn) -> float:
    _randomize(module, make_rng(99))
    return T.grad_check(lambda x_, *ps: fn(module, x_), [x] + module.parameters(), STEP)


def _window_case(rng, mask) -> float:
    m = WindowAttention(8, 2, 2, rng, dtype=np.float64)
    _randomize(m, make_rng(98))
    x = _t(rng, 2 * mask.shape[0], 4, 8)
    return T.grad_check(lambda x_, *ps: m(x_, mask), [x] + m.parameters(), STEP)


def _skip_case(rng, cfg) -> float:
    m = AttentiveSkip(8, 2, "attentive", rng, cfg, np.float64)
    _randomize(m, make_rng(97))
    e, d = _t(rng, 1, 6, 8), _t(rng, 1, 6, 8)
    return T.grad_check(lambda e_, d_, *ps: m(e_, d_), [e, d] + m.parameters(), STEP)


def model_gradient_check(n_coords: int = 20, seed: int = 0, skip_mode: str = "attentive") -> float:
    """Full forward + CE/Dice loss of a small float64 network, probed at
    ``n_coords`` random parameter entries."""
    rng = make_rng(seed, 11)
    cfg = ModelConfig(in_channels=1, num_classes=3, patch=2, base_dim=8, depths=(2, 2, 2), heads=(2, 2, 4),
                      window=2, skip_mode=skip_mode, dtype="float64", seed=seed)
    model = SAttisUNet(cfg)
    _randomize(model, rng, 0.1)
    x = Tensor(rng.standard_normal((2, 16, 16, 1)), dtype=np.float64)
    y = rng.integers(0, 3, size=(2, 16, 16))
    params = model.parameters()

    def f():
        return segmentation_loss(model(x), y)

    model.zero_grad()
    T.backward(f())
    worst = 0.0
    sizes = np.array([p.size for p in params], dtype=float)
    for _ in range(n_coords):
        p = params[rng.choice(len(params), p=sizes / sizes.sum())]
        idx = tuple(int(rng.integers(0, n)) for n in p.shape)
        analytic = float(p.grad[idx]) if p.grad is not None else 0.0
        num = T.numeric_grad(f, p, STEP, [idx])[idx]
        worst = max(worst, float(T.relative_error(analytic, num)))
    return worst


def run_suite(seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    rng = make_rng(seed, 12)
    results = [CheckResult(name, float(fn()), OP_TOL) for name, fn in _op_cases(rng).items()]
    if include_model:
        results.append(CheckResult("sattisunet", model_gradient_check(seed=seed), MODEL_TOL))
    return results
