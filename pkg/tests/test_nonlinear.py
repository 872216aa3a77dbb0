import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scres.constants import A_CRIT
from scres.errors import FitDegeneracyError, ParameterDomainError
from scres.model import ComplexTrace, ResonatorParams, s21_notch
from scres.nonlinear import (NonlinearTraceFit, calibrate_kappa, fit_a_vs_power, fit_nonlinear_trace, fold_points,
                             generator_detuning, has_jump, j_star_from_e_star, jump_index, nl_detuning_roots,
                             nonlinearity_from_power, s21_nonlinear)

P = ResonatorParams.from_qc(1.6e9, 5e5, 8e4, phi=0.05)


def real_roots_oracle(y0, a):
    r = np.roots([4.0, -4.0 * y0, 1.0, -(y0 + a)])
    return np.sort(r[np.abs(r.imag) < 1e-7 * max(1.0, np.max(np.abs(r)))].real)


def track_oracle(y0s, a):
    """Continuation: each point takes the real root nearest to its predecessor."""
    out = []
    prev = None
    for y0 in y0s:
        r = real_roots_oracle(y0, a)
        y = r[0] if prev is None else r[np.argmin(np.abs(r - prev))]
        out.append(y)
        prev = y
    return np.array(out)


@given(y0=st.floats(-20, 20), a=st.floats(0, 5))
def test_roots_match_companion_matrix(y0, a):
    got = nl_detuning_roots(y0, a)
    want = real_roots_oracle(y0, a)
    # near a fold the double root is ill-conditioned in both methods
    if len(got) != len(want):
        lo_hi = fold_points(a)
        assert lo_hi is not None and min(abs(y0 - lo_hi[0]), abs(y0 - lo_hi[1])) < 1e-4
        return
    np.testing.assert_allclose(got, want, atol=1e-6)
    for y in got:
        assert abs(4 * y**3 - 4 * y0 * y * y + y - (y0 + a)) < 1e-9 * max(1.0, abs(y0) ** 3)


def test_critical_value():
    assert math.isclose(A_CRIT, 4 * math.sqrt(3) / 9, rel_tol=1e-15)
    assert fold_points(A_CRIT - 1e-6) is None
    lo, hi = fold_points(1.5)
    assert lo < hi
    # fold points satisfy dy0/dy = 0, i.e. (1 + 4y^2)^2 + 8 a y = 0 with y0 = y - a/(1+4y^2)
    ys = np.roots([16.0, 0.0, 8.0, 8 * 1.5, 1.0])
    ys = ys[np.abs(ys.imag) < 1e-9].real
    y0s = np.sort(ys - 1.5 / (1 + 4 * ys**2))
    np.testing.assert_allclose([lo, hi], y0s, rtol=1e-10)


@pytest.mark.parametrize("branch", ["up", "down"])
@pytest.mark.parametrize("a", [0.3, 0.8, 1.5, 3.0])
def test_branch_selection_equals_continuation(a, branch):
    y0s = np.linspace(-6, 6, 1201)
    if branch == "down":
        want = track_oracle(y0s[::-1], a)[::-1]
    else:
        want = track_oracle(y0s, a)
    f = P.f_r * (1 + y0s / P.Q_l)
    got = generator_detuning(f, P, a, branch)
    np.testing.assert_allclose(got, want, atol=1e-8)


def test_a_zero_reduces_to_linear_model():
    f = np.linspace(P.f_r * (1 - 2e-4), P.f_r * (1 + 2e-4), 501)
    assert np.max(np.abs(s21_nonlinear(f, P, 0.0) - s21_notch(f, P))) <= 1e-14


def test_jump_iff_above_critical():
    f = np.linspace(P.f_r * (1 - 1e-4), P.f_r * (1 + 1e-4), 4001)
    for a in np.linspace(0, 2, 81):
        if abs(a - A_CRIT) < 0.01:
            continue
        assert has_jump(f, P, a, "up") == (a > A_CRIT), a
        assert has_jump(f, P, a, "down") == (a > A_CRIT), a


def test_jump_index_is_largest_step():
    f = np.linspace(P.f_r * (1 - 1e-4), P.f_r * (1 + 1e-4), 2001)
    for branch in ("up", "down"):
        z = s21_nonlinear(f, P, 2.0, branch)
        k = jump_index(f, P, 2.0, branch)
        assert k == int(np.argmax(np.abs(np.diff(z)))) + 1


def test_sweeps_differ_only_inside_fold_window():
    y0 = np.linspace(-6, 6, 3001)
    f = P.f_r * (1 + y0 / P.Q_l)
    up = generator_detuning(f, P, 2.0, "up")
    dn = generator_detuning(f, P, 2.0, "down")
    lo, hi = fold_points(2.0)
    inside = (y0 > lo - 1e-9) & (y0 < hi + 1e-9)
    assert np.allclose(up[~inside], dn[~inside], atol=1e-10)
    assert np.all(dn[inside] > up[inside])


def test_bad_inputs():
    with pytest.raises(ParameterDomainError):
        s21_nonlinear([P.f_r], P, -0.1)
    with pytest.raises(ParameterDomainError):
        s21_nonlinear([P.f_r], P, 1.0, "sideways")
    with pytest.raises(ParameterDomainError):
        NonlinearTraceFit(-1.0, P, None, "up", 0.0, True)


def _trace(a, branch, seed, sigma=3e-3):
    lw = P.f_r / P.Q_l
    f = np.linspace(P.f_r - 6 * lw, P.f_r + 6 * lw, 401)
    rng = np.random.default_rng(seed)
    z = s21_nonlinear(f, P, a, branch) + sigma * (rng.standard_normal(f.size) + 1j * rng.standard_normal(f.size))
    return ComplexTrace(f, z)


@pytest.mark.parametrize("a,branch", [(0.4, "up"), (1.2, "up"), (2.5, "down")])
def test_trace_roundtrip(a, branch):
    res = fit_nonlinear_trace(_trace(a, branch, 4), P, branch=branch)
    assert abs(res.a_param - a) < max(4 * res.a_sigma, 0.01 * a)
    assert math.isclose(res.params.Q_i, P.Q_i, rel_tol=0.05)


def test_linear_trace_flagged():
    res = fit_nonlinear_trace(_trace(0.0, "up", 2), P)
    assert res.is_linear and res.a_param == 0.0


def test_energy_scale_from_power_series():
    E = 2e-8
    powers = 10 ** (np.array([-60.0, -58.0, -56.0, -54.0, -52.0]) / 10) * 1e-3
    fits = []
    for k, Pw in enumerate(powers):
        a = float(nonlinearity_from_power(Pw, E, P))
        ft = fit_nonlinear_trace(_trace(a, "up", 10 + k, 1e-3), P, power_W=Pw)
        fits.append(ft)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sc = fit_a_vs_power(fits, P)
    assert math.isclose(sc.E_star, E, rel_tol=0.01)
    assert "model_violation" not in sc.flags


def test_quadratic_a_is_flagged():
    Pw = np.linspace(1e-9, 5e-9, 6)
    fits = [NonlinearTraceFit(1e8 * p + 3e16 * p * p, P, p, "up", 0.0, True, a_sigma=1e-3) for p in Pw]
    with pytest.warns(RuntimeWarning):
        sc = fit_a_vs_power(fits, P)
    assert "model_violation" in sc.flags


def test_too_few_powers():
    fits = [NonlinearTraceFit(0.1, P, 1e-9, "up", 0.0, True, a_sigma=1e-3)] * 3
    with pytest.raises(FitDegeneracyError):
        fit_a_vs_power(fits, P)


def test_j_star_calibration_roundtrip():
    geom = (4e-13, 2e-3)
    kappa = calibrate_kappa(7.5e-7, 4.0e8, 0.13e-12, 0.057, geom)
    assert math.isclose(j_star_from_e_star(7.5e-7, 0.13e-12, 0.057, geom, kappa), 4.0e8, rel_tol=1e-12)
    # J*^2 scales as E* alpha_k / L_k
    j2 = j_star_from_e_star(1.16e-7, 0.22e-12, 0.094, geom, kappa)
    assert math.isclose(j2, 4.0e8 * math.sqrt(1.16e-7 * 0.094 * 0.13 / (7.5e-7 * 0.057 * 0.22)), rel_tol=1e-12)


def test_j_star_requires_geometry():
    with pytest.raises(ParameterDomainError):
        j_star_from_e_star(7.5e-7, 0.13e-12, 0.057, None, 1.0)
    with pytest.raises(ParameterDomainError):
        j_star_from_e_star(7.5e-7, 0.13e-12, 0.057, (1e-12, 1e-3), None)
