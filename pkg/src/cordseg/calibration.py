"""Monte-Carlo checks of the correlation z-test: size under the null and
power against a planted between-stratum difference."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import make_rng
from .stats import PairedSamples, compare_correlations, pearson_r, stratified_analysis
from .synth import paired_samples


@dataclass
class RateEstimate:
    hits: int
    trials: int

    @property
    def rate(self) -> float:
        return self.hits / self.trials


def null_false_positive_rate(trials: int = 1000, n: int = 50, rho: float = 0.4, alpha: float = 0.05,
                             seed: int = 0) -> RateEstimate:
    """Two strata drawn with the same correlation; fraction of tests with p < alpha."""
    rng = make_rng(seed, 31)
    hits = 0
    for _ in range(trials):
        a = pearson_r(*paired_samples(n, rho, rng))
        b = pearson_r(*paired_samples(n, rho, rng))
        hits += compare_correlations(a, b).p < alpha
    return RateEstimate(int(hits), trials)


def planted_difference_samples(n: int, rho_a: float, rho_b: float, rng: np.random.Generator) -> PairedSamples:
    xa, ya = paired_samples(n, rho_a, rng)
    xb, yb = paired_samples(n, rho_b, rng)
    tags = [{"gender": "F"}] * n + [{"gender": "M"}] * n
    return PairedSamples(list(xa) + list(xb), list(ya) + list(yb), tags)


def planted_detection_rate(seeds: int = 200, n: int = 100, rho_a: float = 0.6, rho_b: float = 0.0,
                           alpha: float = 0.01, group_by: str = "gender") -> RateEstimate:
    """Fraction of seeded runs in which the stratified analysis finds the planted difference."""
    hits = 0
    for seed in range(seeds):
        res = stratified_analysis(planted_difference_samples(n, rho_a, rho_b, make_rng(seed, 32)), group_by)
        hits += res.comparisons[0].p < alpha
    return RateEstimate(int(hits), seeds)


def permuted_median_p(seeds: int = 200, n: int = 100, rho_a: float = 0.6, rho_b: float = 0.0) -> float:
    """Median p after shuffling stratum labels; a planted difference should vanish."""
    ps = []
    for seed in range(seeds):
        rng = make_rng(seed, 33)
        s = planted_difference_samples(n, rho_a, rho_b, rng)
        tags = [s.strata[i] for i in rng.permutation(len(s.strata))]
        ps.append(stratified_analysis(PairedSamples(s.x, s.y, tags), "gender").comparisons[0].p)
    return float(np.median(ps))
