"""Paired comparison of device populations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ParameterDomainError


@dataclass(frozen=True)
class PairedSample:
    labels: tuple
    group_a: np.ndarray
    group_b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.group_a, dtype=float)
        b = np.asarray(self.group_b, dtype=float)
        labels = tuple(str(x) for x in self.labels)
        if a.ndim != 1 or a.shape != b.shape or len(labels) != a.size:
            raise ParameterDomainError("group_b", "labels and both groups must have equal length")
        if a.size < 2:
            raise ParameterDomainError("group_a", "need at least 2 pairs")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(a > 0) and np.all(b > 0)):
            raise ParameterDomainError("group_a", "values must be positive and finite")
        if len(set(labels)) != len(labels):
            raise ParameterDomainError("labels", "labels must be unique")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "group_a", a)
        object.__setattr__(self, "group_b", b)

    @property
    def differences(self):
        return self.group_b - self.group_a


@dataclass(frozen=True)
class PairedTTest:
    t_statistic: float
    dof: int
    p_value: float
    mean_difference: float
    ci95: tuple
    degenerate: bool = False

    @property
    def stars(self) -> str:
        return significance_stars(self.p_value) if not math.isnan(self.p_value) else "n/a"

    def as_dict(self) -> dict:
        return {
            "t": self.t_statistic,
            "dof": self.dof,
            "p_value": self.p_value,
            "mean_difference": self.mean_difference,
            "ci95": list(self.ci95),
            "degenerate": self.degenerate,
            "stars": self.stars,
        }


def t_sf_two_sided(t, dof):
    """Two-sided tail probability of Student's t via the incomplete beta."""
    t = np.asarray(t, dtype=float)
    x = dof / (dof + t * t)
    return special.betainc(0.5 * dof, 0.5, x)


def _t_quantile(prob, dof):
    """Upper quantile q with two-sided tail ``prob``."""
    x = special.betaincinv(0.5 * dof, 0.5, prob)
    return math.sqrt(dof * (1.0 - x) / x)


def paired_t_test(s: PairedSample) -> PairedTTest:
    """Two-sided paired t-test on ``d = b - a``."""
    d = s.differences
    n = d.size
    dof = n - 1
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0 or sd <= 1e-15 * max(abs(mean), float(np.max(np.abs(s.group_a)))):
        if mean == 0.0:
            return PairedTTest(0.0, dof, 1.0, 0.0, (0.0, 0.0), degenerate=True)
        return PairedTTest(math.copysign(math.inf, mean), dof, math.nan, mean, (mean, mean), degenerate=True)
    se = sd / math.sqrt(n)
    t = mean / se
    p = float(t_sf_two_sided(t, dof))
    q = _t_quantile(0.05, dof)
    return PairedTTest(t, dof, p, mean, (mean - q * se, mean + q * se))


def significance_stars(p: float) -> str:
    if not 0.0 <= p <= 1.0:
        raise ParameterDomainError("p", f"must lie in [0, 1] (got {p!r})")
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"
