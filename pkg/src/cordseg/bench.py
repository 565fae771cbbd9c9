"""Wall-clock scaling of cross-covariance vs dense self-attention in token count."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import XCA, WindowAttention
from .rng import make_rng
from .tensor import Tensor


@dataclass
class BenchRow:
    attention: str
    tokens: int
    dim: int
    heads: int
    seconds: float


def build_attention(kind: str, dim: int, heads: int, seed: int = 0):
    rng = make_rng(seed, 21)
    if kind == "xca":
        return XCA(dim, heads, rng)
    if kind == "msa":
        return WindowAttention(dim, heads, None, rng)
    raise ValueError(f"unknown attention kind {kind!r}; use xca or msa")


def time_attention(kind: str, tokens: int, dim: int = 64, heads: int = 4, repeats: int = 5, seed: int = 0) -> float:
    """Best-of-``repeats`` forward time (seconds) on one [1, tokens, dim] input."""
    module = build_attention(kind, dim, heads, seed)
    x = Tensor(make_rng(seed, 22).standard_normal((1, tokens, dim)).astype(np.float32))
    best = float("inf")
    with T.no_grad():
        module(x)  # warm-up
        for _ in range(repeats):
            t0 = time.perf_counter()
            module(x)
            best = min(best, time.perf_counter() - t0)
    return best


def run_bench(kinds=("xca", "msa"), tokens=(256, 1024, 4096), dim: int = 64, heads: int = 4,
              repeats: int = 5) -> list[BenchRow]:
    return [BenchRow(k, n, dim, heads, time_attention(k, n, dim, heads, repeats)) for k in kinds for n in tokens]


def scaling_ratio(rows: list[BenchRow], kind: str, n_hi: int = 4096, n_lo: int = 1024) -> float:
    t = {r.tokens: r.seconds for r in rows if r.attention == kind}
    return t[n_hi] / t[n_lo]


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attention", "tokens", "dim", "heads", "seconds"])
    for r in rows:
        w.writerow([r.attention, r.tokens, r.dim, r.heads, f"{r.seconds:.6e}"])
    return buf.getvalue()
