import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from scres.errors import ParameterDomainError
from scres.stats import PairedSample, paired_t_test, significance_stars, t_sf_two_sided


def t_pdf(x, dof):
    c = math.exp(math.lgamma((dof + 1) / 2) - math.lgamma(dof / 2)) / math.sqrt(dof * math.pi)
    return c * (1 + x * x / dof) ** (-(dof + 1) / 2)


def p_oracle(t, dof):
    """Two-sided tail by direct quadrature of the Student density."""
    inner, _ = integrate.quad(t_pdf, 0.0, abs(t), args=(dof,), epsabs=1e-14, epsrel=1e-13, limit=200)
    return 1.0 - 2.0 * inner if abs(t) < 3 else 2.0 * integrate.quad(
        t_pdf, abs(t), np.inf, args=(dof,), epsabs=1e-15, epsrel=1e-12, limit=200)[0]


def test_frozen_value():
    s = PairedSample(list("abcdef"), [1, 2, 3, 4, 5, 6], [2.0, 3.1, 3.9, 5.2, 6.0, 6.8])
    t = paired_t_test(s)
    ref = stats.ttest_rel(s.group_b, s.group_a)
    assert math.isclose(t.t_statistic, ref.statistic, rel_tol=1e-12)
    assert math.isclose(t.p_value, ref.pvalue, rel_tol=1e-10)
    assert t.dof == 5


@pytest.mark.parametrize("seed", range(10))
def test_p_value_matches_quadrature(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 25))
    a = rng.uniform(1e5, 5e5, n)
    b = a * rng.normal(1.0 + rng.uniform(-0.1, 0.3), 0.1, n)
    t = paired_t_test(PairedSample([f"d{i}" for i in range(n)], a, np.abs(b)))
    assert abs(t.p_value - p_oracle(t.t_statistic, t.dof)) < 1e-8


def test_confidence_interval_matches_t_quantile():
    rng = np.random.default_rng(0)
    a = rng.uniform(1, 2, 9)
    b = a + rng.normal(0.2, 0.1, 9)
    t = paired_t_test(PairedSample(range(9), a, b))
    d = b - a
    q = stats.t.ppf(0.975, 8)
    half = q * d.std(ddof=1) / 3
    assert t.ci95[0] == pytest.approx(d.mean() - half, rel=1e-10)
    assert t.ci95[1] == pytest.approx(d.mean() + half, rel=1e-10)


@given(st.floats(-50, 50), st.integers(1, 60))
def test_tail_probability_properties(t, dof):
    p = float(t_sf_two_sided(t, dof))
    assert 0.0 <= p <= 1.0
    assert p == pytest.approx(float(t_sf_two_sided(-t, dof)), abs=1e-15)
    assert p >= float(t_sf_two_sided(abs(t) + 1.0, dof)) - 1e-15


def test_stars_boundaries():
    assert significance_stars(0.0009) == "***"
    assert significance_stars(0.001) == "**"
    assert significance_stars(0.0099) == "**"
    assert significance_stars(0.01) == "*"
    assert significance_stars(0.049) == "*"
    assert significance_stars(0.05) == "ns"
    with pytest.raises(ParameterDomainError):
        significance_stars(1.5)


def test_degenerate_samples():
    same = paired_t_test(PairedSample("abc", [1, 2, 3], [1, 2, 3]))
    assert same.degenerate and same.p_value == 1.0 and same.t_statistic == 0.0
    shift = paired_t_test(PairedSample("abc", [1, 2, 3], [2, 3, 4]))
    assert shift.degenerate and math.isinf(shift.t_statistic) and math.isnan(shift.p_value)
    assert shift.stars == "n/a"


@pytest.mark.parametrize("args", [
    ("ab", [1, 2], [1]),
    ("a", [1], [2]),
    ("ab", [1, -2], [1, 2]),
    ("aa", [1, 2], [2, 3]),
])
def test_sample_validation(args):
    with pytest.raises(ParameterDomainError):
        PairedSample(*args)
