"""Seedable, splittable random streams and thread control for strict mode."""
from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

THREADS_ENV = "CORDSEG_THREADS"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent 64-bit PCG stream for ``(seed, *stream)``.

    Distinct stream keys give statistically independent generators, so
    callers can split work (e.g. one stream per subject) without sharing
    state.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


def configured_threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {raw!r}")
    return n


@contextmanager
def thread_limit(strict: bool = False):
    """Cap BLAS threads. Strict mode (or CORDSEG_THREADS=1) pins one thread
    so floating-point reduction order, and hence results, are reproducible."""
    from threadpoolctl import threadpool_limits

    n = 1 if strict else configured_threads()
    if n is None:
        yield
        return
    with threadpool_limits(limits=n):
        yield


def strict_from_env() -> bool:
    return configured_threads() == 1
