"""Pearson correlation, Fisher z-transform and the two-group z-test on
transformed coefficients, with stratified (gender / machine / level) analysis."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ValidationError

MIN_N_TEST = 4


@dataclass
class PairedSamples:
    x: list[float]
    y: list[float]
    strata: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValidationError(f"x has {len(self.x)} values, y has {len(self.y)}")
        if self.strata and len(self.strata) != len(self.x):
            raise ValidationError("one strata tag dict is needed per pair")

    def complete(self) -> "PairedSamples":
        """Drop pairs where either member is missing (None or NaN)."""
        keep = [i for i, (a, b) in enumerate(zip(self.x, self.y)) if _present(a) and _present(b)]
        return PairedSamples([float(self.x[i]) for i in keep], [float(self.y[i]) for i in keep],
                             [self.strata[i] for i in keep] if self.strata else [])


def _present(v) -> bool:
    return v is not None and not (isinstance(v, float) and math.isnan(v))


@dataclass
class CorrelationResult:
    r: float
    n: int
    stratum: str = "all"


@dataclass
class GroupComparison:
    z: float
    p: float
    a: CorrelationResult
    b: CorrelationResult
    p_adjusted: float | None = None


def pearson_r(x: Sequence[float], y: Sequence[float], stratum: str = "all") -> CorrelationResult:
    """Single pass over the data (Welford-style co-moment updates)."""
    if len(x) != len(y):
        raise ValidationError(f"x has {len(x)} values, y has {len(y)}")
    n = len(x)
    if n < 2:
        raise ValidationError(f"correlation needs at least 2 pairs, got {n}")
    mx = my = sxx = syy = sxy = 0.0
    for i, (a, b) in enumerate(zip(x, y), start=1):
        dx = a - mx
        dy = b - my
        mx += dx / i
        my += dy / i
        sxx += dx * (a - mx)
        syy += dy * (b - my)
        sxy += dx * (b - my)
    if sxx <= 0.0 or syy <= 0.0:
        raise ValidationError(f"correlation undefined: zero variance in {'x' if sxx <= 0 else 'y'} ({stratum})")
    r = sxy / math.sqrt(sxx * syy)
    return CorrelationResult(max(-1.0, min(1.0, r)), n, stratum)


def fisher_z(r: float) -> float:
    if not -1.0 < r < 1.0:
        raise ValidationError(f"Fisher z is infinite for |r| >= 1 (r={r})")
    return math.atanh(r)


def normal_sf_two_sided(z: float) -> float:
    """2 * (1 - Phi(|z|)), computed as erfc(|z| / sqrt 2) to avoid cancellation."""
    return math.erfc(abs(z) / math.sqrt(2.0))


def compare_correlations(a: CorrelationResult, b: CorrelationResult) -> GroupComparison:
    if a.n <= 3 or b.n <= 3:
        raise ValidationError(f"z-test needs n > 3 in both groups (got {a.n} and {b.n})")
    z = (fisher_z(a.r) - fisher_z(b.r)) / math.sqrt(1.0 / (a.n - 3) + 1.0 / (b.n - 3))
    return GroupComparison(z, min(1.0, normal_sf_two_sided(z)), a, b)


@dataclass
class StratifiedAnalysis:
    group_by: str
    correlations: list[CorrelationResult]
    comparisons: list[GroupComparison]
    untested: list[str]  # strata below MIN_N_TEST or with undefined r


def stratified_analysis(samples: PairedSamples, group_by: str, bonferroni: bool = False) -> StratifiedAnalysis:
    """One correlation per stratum plus every pairwise comparison.

    Strata with fewer than 4 complete pairs are reported but not tested.
    """
    s = samples.complete()
    if s.strata and any(group_by not in tags for tags in s.strata):
        raise ValidationError(f"some pairs have no {group_by!r} tag")
    groups: dict[str, tuple[list[float], list[float]]] = {}
    for i, (a, b) in enumerate(zip(s.x, s.y)):
        key = str(s.strata[i][group_by]) if s.strata else "all"
        gx, gy = groups.setdefault(key, ([], []))
        gx.append(a)
        gy.append(b)
    correlations, untested = [], []
    testable = []
    for key in sorted(groups):
        gx, gy = groups[key]
        try:
            res = pearson_r(gx, gy, key)
        except ValidationError:
            untested.append(key)
            continue
        correlations.append(res)
        if res.n >= MIN_N_TEST and abs(res.r) < 1.0:
            testable.append(res)
        else:
            untested.append(key)
    comparisons = [compare_correlations(a, b) for a, b in itertools.combinations(testable, 2)]
    if bonferroni and comparisons:
        m = len(comparisons)
        for c in comparisons:
            c.p_adjusted = min(1.0, c.p * m)
    return StratifiedAnalysis(group_by, correlations, comparisons, untested)
