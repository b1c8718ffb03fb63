"""Closed-form confidence bounds for path ensembles, taken as printed.

Two pieces: a normal-approximation interval for the true error rate of a
shared subspace given the worst observed rate across k networks, and a
counting bound on how many voted validation points an ensemble can get
wrong. The formulas are implemented verbatim (variance 1/(4*sqrt(n)),
deviation budget 6/(4*sqrt(k))) rather than re-derived; the Monte-Carlo
oracle exists to check their coverage empirically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class TheoremInputs:
    """k networks, n validation points in the subspace, worst observed error
    rate eps_prime, and the normal quantile z for the interval."""

    k: int
    n: int
    eps_prime: float
    z: float

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 <= self.eps_prime <= 1.0:
            raise ValueError("eps_prime must lie in [0, 1]")
        if not self.z > 0:
            raise ValueError("z must be > 0")


@dataclass(frozen=True)
class BoundReport:
    confidence_lb: float
    interval: tuple[float, float]

    def __post_init__(self):
        lo, hi = self.interval
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("interval must be ordered and clamped to [0, 1]")

    def contains(self, eps: float) -> bool:
        lo, hi = self.interval
        return lo <= eps <= hi


def discovery_probability_lb(k) -> float:
    """max(0, 1 - 6 / (4 sqrt(k))): chance that k networks all land within
    the deviation budget of the shared subspace's true error."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return max(0.0, 1.0 - 6.0 / (4.0 * math.sqrt(k)))


def epsilon_interval(inp: TheoremInputs) -> BoundReport:
    """Interval for the true error: eps_prime +/- z * sqrt(1/(4 sqrt(n))),
    clamped to [0, 1], with the k-network confidence floor attached."""
    sigma = math.sqrt(1.0 / (4.0 * math.sqrt(inp.n)))
    lo = max(0.0, inp.eps_prime - inp.z * sigma)
    hi = min(1.0, inp.eps_prime + inp.z * sigma)
    return BoundReport(discovery_probability_lb(inp.k), (lo, hi))


def ensemble_validation_bound(v, f1, f2):
    """v / (f1 * f2): cap on incorrectly classified voted validation points.

    v is the worst single model's count of good-yet-wrong points, f1 the
    fraction of models deeming a voted point good, f2 the fraction of
    those that agree on the label. Fraction inputs give a Fraction back;
    floats give a float.
    """
    if v < 0:
        raise ValueError("v must be >= 0")
    if not (0 < f1 <= 1 and 0 < f2 <= 1):
        raise ValueError("f1 and f2 must lie in (0, 1]")
    return v / (f1 * f2)


@dataclass(frozen=True)
class BoundCheck:
    """Outcome of checking a finished run against the counting bound."""

    v: int
    f1: Fraction
    f2: Fraction
    observed_incorrect: int
    bound: Fraction
    passed: bool

    def to_doc(self) -> dict:
        return {
            "v": self.v,
            "f1": float(self.f1),
            "f2": float(self.f2),
            "f1_exact": [self.f1.numerator, self.f1.denominator],
            "f2_exact": [self.f2.numerator, self.f2.denominator],
            "observed_incorrect": self.observed_incorrect,
            "bound": float(self.bound),
            "passed": self.passed,
        }


def verify_ensemble_bound(v: int, f1, f2, observed_incorrect: int) -> BoundCheck:
    """Exact-arithmetic check that observed voted errors stay within v/(f1 f2).

    The comparison runs on rationals, so a run sitting exactly on the
    bound passes without float noise. Fractions are the natural inputs
    (they come straight from counts); floats are converted exactly.
    """
    if observed_incorrect < 0:
        raise ValueError("observed_incorrect must be >= 0")
    f1 = Fraction(f1)
    f2 = Fraction(f2)
    if not (0 < f1 <= 1 and 0 < f2 <= 1):
        raise ValueError("f1 and f2 must lie in (0, 1]")
    if v < 0:
        raise ValueError("v must be >= 0")
    bound = Fraction(v) / (f1 * f2)
    return BoundCheck(int(v), f1, f2, int(observed_incorrect), bound,
                      Fraction(observed_incorrect) <= bound)


def monte_carlo_coverage(eps: float, n: int, k: int, trials: int, seed: int,
                         z: float = 2.0) -> float:
    """Fraction of simulated runs whose interval captures the true error.

    Each trial draws k networks' error counts as Binomial(n, eps), takes
    eps_prime as the worst sample mean, and asks whether the interval
    around it contains eps.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if trials < 1000:
        raise ValueError("need at least 1000 trials for a stable estimate")
    if n < 1 or k < 1:
        raise ValueError("n and k must be >= 1")
    rng = np.random.default_rng(seed)
    means = rng.binomial(n, eps, size=(trials, k)) / n
    eps_prime = means.max(axis=1)
    sigma = math.sqrt(1.0 / (4.0 * math.sqrt(n)))
    lo = np.maximum(0.0, eps_prime - z * sigma)
    hi = np.minimum(1.0, eps_prime + z * sigma)
    return float(((lo <= eps) & (eps <= hi)).mean())
