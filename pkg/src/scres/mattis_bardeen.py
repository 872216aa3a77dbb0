"""BCS gap, Mattis-Bardeen conductivity and the temperature-sweep fitter.

Also holds the kinetic-inductance bookkeeping that compares measured
resonance frequencies against perfect-conductor simulations.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy import integrate, optimize
from scipy.interpolate import PchipInterpolator
from scipy.special import expit

from .constants import BCS_GAP_RATIO, DEFAULT_GAP_RATIO, H_PLANCK, K_B
from .errors import FitDegeneracyError, PairBreakingError, ParameterDomainError

GAP_GRID_POINTS = 512
QUAD_EPSABS = 1e-10


@dataclass(frozen=True)
class MBMaterial:
    """Superconductor description.

    ``gap0`` is in joules; when omitted it is tied to ``1.764 k_B T_c``.
    ``sigma_n`` only sets an overall scale and cancels from observables.
    """

    T_c: float
    alpha_k: float
    gap0: Optional[float] = None
    sigma_n: float = 1.0

    def __post_init__(self):
        if not (self.T_c > 0 and math.isfinite(self.T_c)):
            raise ParameterDomainError("T_c", f"must be positive (got {self.T_c})")
        if not 0 < self.alpha_k < 1:
            raise ParameterDomainError("alpha_k", f"must lie in (0, 1) (got {self.alpha_k})")
        if self.gap0 is None:
            object.__setattr__(self, "gap0", DEFAULT_GAP_RATIO * K_B * self.T_c)
        ratio = self.gap0 / (K_B * self.T_c)
        if not 1.5 <= ratio <= 2.2:
            raise ParameterDomainError("gap0", f"gap0/(k_B T_c) = {ratio:.3f} outside [1.5, 2.2]")
        if not self.sigma_n > 0:
            raise ParameterDomainError("sigma_n", "must be positive")

    @classmethod
    def with_ratio(cls, T_c, alpha_k, ratio=DEFAULT_GAP_RATIO, sigma_n=1.0):
        return cls(T_c=T_c, alpha_k=alpha_k, gap0=ratio * K_B * T_c, sigma_n=sigma_n)


# ----------------------------------------------------------------------- gap


def _gap_residual(delta, t):
    """ln(1/delta) - 2 int_0^inf f(E/kT) dxi / E, energies in units of Delta(0)."""
    theta = t / BCS_GAP_RATIO
    umax = math.acosh(max(1.0, (delta + 60.0 * theta) / delta))

    def integrand(u):
        return expit(-delta * math.cosh(u) / theta)

    val, _ = integrate.quad(integrand, 0.0, umax, epsabs=1e-13, epsrel=1e-12, limit=200)
    return math.log(1.0 / delta) - 2.0 * val


def reduced_gap_exact(t: float) -> float:
    """Delta(T)/Delta(0) from the weak-coupling BCS gap equation at t = T/T_c."""
    if t <= 0.0:
        return 1.0
    if t >= 1.0:
        return 0.0
    if t < 0.05:
        return 1.0
    lo = 1e-9
    if _gap_residual(lo, t) <= 0:
        return 0.0
    return optimize.brentq(_gap_residual, lo, 1.0, args=(t,), xtol=1e-14, rtol=1e-13)


@functools.lru_cache(maxsize=1)
def _gap_table():
    t = np.linspace(0.0, 1.0, GAP_GRID_POINTS)
    d2 = np.array([reduced_gap_exact(x) ** 2 for x in t])
    return PchipInterpolator(t, d2)


def reduced_gap(t, exact=False):
    """Delta(T)/Delta(0); cached monotone interpolation unless ``exact``."""
    t_arr = np.asarray(t, dtype=float)
    if exact:
        out = np.vectorize(reduced_gap_exact, otypes=[float])(t_arr)
    else:
        tc = np.clip(t_arr, 0.0, 1.0)
        out = np.sqrt(np.clip(_gap_table()(tc), 0.0, 1.0))
        out = np.where(t_arr >= 1.0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def gap_at_temperature(mat: MBMaterial, T, exact=False):
    """Superconducting gap Delta(T) in joules (zero at and above T_c)."""
    return mat.gap0 * reduced_gap(np.asarray(T, dtype=float) / mat.T_c, exact=exact)


# -------------------------------------------------------------- conductivity


def _fermi(x):
    return expit(-x)


def _sigma1_reduced(w, theta):
    """sigma_1/sigma_n for photon energy w and temperature theta (units of Delta)."""
    if theta <= 0.0:
        return 0.0
    emax = 1.0 + 60.0 * theta
    umax = math.acosh(emax)

    def integrand(u):
        e = math.cosh(u)
        occ = _fermi(e / theta) - _fermi((e + w) / theta)
        return occ * (e * e + 1.0 + w * e) / math.sqrt((e + w) ** 2 - 1.0)

    knee = min(math.sqrt(w), umax / 2)
    v1, _ = integrate.quad(integrand, 0.0, knee, epsabs=QUAD_EPSABS * w / 4, epsrel=1e-10, limit=200)
    v2, _ = integrate.quad(integrand, knee, umax, epsabs=QUAD_EPSABS * w / 4, epsrel=1e-10, limit=200)
    return 2.0 / w * (v1 + v2)


def _sigma2_reduced(w, theta):
    a = 1.0 - w

    def g(e):
        occ = 1.0 if theta <= 0.0 else math.tanh((e + w) / (2.0 * theta))
        return occ * (e * e + 1.0 + w * e) / (math.sqrt(1.0 + e) * math.sqrt(e + w + 1.0))

    val, _ = integrate.quad(g, a, 1.0, weight="alg", wvar=(-0.5, -0.5), epsabs=QUAD_EPSABS * w, epsrel=1e-11)
    return val / w


def sigma_reduced(delta, kT, hf):
    """(sigma_1/sigma_n, sigma_2/sigma_n) for gap, thermal and photon energies in joules."""
    if not delta > 0:
        raise PairBreakingError("gap is zero: normal state")
    if hf >= 2.0 * delta:
        raise PairBreakingError(f"h f = {hf:.3e} J reaches 2*Delta = {2 * delta:.3e} J")
    w = hf / delta
    theta = kT / delta
    return _sigma1_reduced(w, theta), _sigma2_reduced(w, theta)


def mb_sigma(mat: MBMaterial, T: float, f: float):
    """Mattis-Bardeen sigma_1/sigma_n and sigma_2/sigma_n at temperature T and frequency f."""
    if T < 0:
        raise ParameterDomainError("T", "must be non-negative")
    delta = float(gap_at_temperature(mat, T))
    hf = H_PLANCK * f
    if delta <= 0 or hf >= 2.0 * delta:
        raise PairBreakingError(f"h f >= 2 Delta(T) at T = {T} K: outside sub-gap response")
    return sigma_reduced(delta, K_B * T, hf)


def sigma_asymptotic(mat: MBMaterial, T: float, f: float):
    """Low-temperature, low-frequency analytic forms (cross-check only)."""
    from scipy.special import i0e, k0e

    d0 = mat.gap0
    kT = K_B * T
    hw = H_PLANCK * f
    xi = hw / (2 * kT)
    # sinh(xi) K0(xi) = (1 - e^{-2 xi}) k0e(xi) / 2 and e^{-xi} I0(xi) = i0e(xi)
    s1 = (4 * d0 / hw) * math.exp(-d0 / kT) * 0.5 * (1 - math.exp(-2 * xi)) * k0e(xi)
    s2 = (math.pi * d0 / hw) * (1 - 2 * math.exp(-d0 / kT) * i0e(xi))
    return s1, s2


class MBObservables(NamedTuple):
    delta_fr: np.ndarray
    Q_i_inv: np.ndarray


def _sigma_table(mat, T, f):
    T = np.atleast_1d(np.asarray(T, dtype=float))
    s = np.array([mb_sigma(mat, t, f) for t in T])
    return s[:, 0], s[:, 1]


def mb_observables(mat: MBMaterial, T, f_r0: float, T_ref: Optional[float] = None) -> MBObservables:
    """Fractional frequency shift and internal loss predicted by Mattis-Bardeen.

    The shift is referenced to ``T_ref`` (default: the lowest temperature in
    ``T``) as ``(alpha_k/2) (sigma_2(T) - sigma_2(T_ref)) / sigma_2(T_ref)``.
    """
    T_arr = np.atleast_1d(np.asarray(T, dtype=float))
    if np.any(T_arr < 0) or np.any(T_arr > 0.9 * mat.T_c):
        raise ParameterDomainError("T", f"must lie in [0, 0.9 T_c] = [0, {0.9 * mat.T_c:.3g}] K")
    if T_ref is None:
        T_ref = float(T_arr.min())
    s1, s2 = _sigma_table(mat, T_arr, f_r0)
    _, s2ref = _sigma_table(mat, [T_ref], f_r0)
    dfr = 0.5 * mat.alpha_k * (s2 - s2ref[0]) / s2ref[0]
    qinv = mat.alpha_k * s1 / s2
    if np.ndim(T) == 0:
        return MBObservables(float(dfr[0]), float(qinv[0]))
    return MBObservables(dfr, qinv)


# ---------------------------------------------------------------- sweep fit


@dataclass
class MBFitResult:
    alpha_k: float
    T_c: float
    sigma_alpha_k: float
    sigma_T_c: float
    f_r0: float
    T_ref: float
    gap_ratio: float
    n_used: int
    n_excluded: int
    residual_rms: float
    converged: bool
    flags: list
    tls_loss_amplitude: Optional[float] = None

    def material(self) -> MBMaterial:
        return MBMaterial.with_ratio(self.T_c, self.alpha_k, self.gap_ratio)

    def as_dict(self) -> dict:
        return {
            "alpha_k": self.alpha_k,
            "sigma_alpha_k": self.sigma_alpha_k,
            "T_c": self.T_c,
            "sigma_T_c": self.sigma_T_c,
            "f_r0": self.f_r0,
            "T_ref": self.T_ref,
            "gap_ratio": self.gap_ratio,
            "n_used": self.n_used,
            "n_excluded": self.n_excluded,
            "residual_rms": self.residual_rms,
            "converged": self.converged,
            "flags": list(self.flags),
            "tls_loss_amplitude": self.tls_loss_amplitude,
        }


def tls_saturation_temperature(f: float) -> float:
    """Bath temperature h f / (2 k_B) below which TLS effects dominate."""
    return H_PLANCK * f / (2.0 * K_B)


def _reduced_tables(T, Tc, ratio, f):
    """sigma_1/sigma_n and sigma_2/sigma_n at each T for a trial T_c."""
    mat = MBMaterial.with_ratio(Tc, 0.5, ratio)
    out = np.empty((len(T), 2))
    for i, t in enumerate(T):
        out[i] = mb_sigma(mat, t, f)
    return out[:, 0], out[:, 1]


def fit_mb_sweep(points, f_r0: Optional[float] = None, gap_ratio=DEFAULT_GAP_RATIO,
                 exclude_tls=True, df_floor_frac=1e-3, tls_background=False) -> MBFitResult:
    """Joint fit of alpha_k and T_c to a temperature sweep.

    ``points`` is an array of (T [K], f_r [Hz], Q_i) rows. Both observables
    are referenced to the lowest-temperature row. Residuals are relative
    (multiplicative noise); alpha_k is profiled out analytically for the
    initial T_c scan.

    With ``tls_background`` the loss channel carries an extra nuisance term
    ``c (tanh(h f / 2 k_B T) - tanh(h f / 2 k_B T_ref))`` for the thermal
    saturation of TLS loss at fixed drive; ``c`` is reported as
    ``tls_loss_amplitude``.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be an (N, 3) array of (T, f_r, Q_i)")
    pts = pts[np.argsort(pts[:, 0])]
    if pts.shape[0] < 6:
        raise FitDegeneracyError(f"need at least 6 temperature points, got {pts.shape[0]}", parameter="T_c")
    if np.any(pts[:, 2] <= 0) or np.any(pts[:, 1] <= 0):
        raise ParameterDomainError("points", "f_r and Q_i must be positive")
    T_all, fr_all, qi_all = pts.T
    T_ref = float(T_all[0])
    if f_r0 is None:
        f_r0 = float(fr_all[0])
    qinv_ref = 1.0 / qi_all[0]

    flags = []
    keep = np.ones(T_all.size, dtype=bool)
    keep[0] = False
    if exclude_tls:
        keep &= T_all >= tls_saturation_temperature(f_r0)
    T = T_all[keep]
    dfr = (fr_all[keep] - f_r0) / f_r0
    qinv = 1.0 / qi_all[keep]
    if T.size < 5:
        raise FitDegeneracyError("fewer than 5 usable temperature points after exclusions", parameter="T_c")

    sf = np.abs(dfr) + df_floor_frac * np.max(np.abs(dfr)) + 1e-15
    sq = np.abs(qinv)

    def unit_model(Tc):
        s1, s2 = _reduced_tables(np.concatenate([[T_ref], T]), Tc, gap_ratio, f_r0)
        m_f = 0.5 * (s2[1:] - s2[0]) / s2[0]
        m_q = s1[1:] / s2[1:] - s1[0] / s2[0]
        return m_f, m_q

    g = np.zeros_like(T)
    if tls_background:
        g = np.tanh(tls_saturation_temperature(f_r0) / T) - np.tanh(tls_saturation_temperature(f_r0) / T_ref)
    n_lin = 2 if tls_background else 1

    def residuals(x):
        alpha, Tc = x[:2]
        c = x[2] if tls_background else 0.0
        m_f, m_q = unit_model(Tc)
        return np.concatenate([(alpha * m_f - dfr) / sf, (alpha * m_q + c * g + qinv_ref - qinv) / sq])

    def profiled_alpha(Tc):
        m_f, m_q = unit_model(Tc)
        cols = [np.concatenate([m_f / sf, m_q / sq])]
        if tls_background:
            cols.append(np.concatenate([np.zeros_like(T), g / sq]))
        A = np.column_stack(cols)
        b = np.concatenate([dfr / sf, (qinv - qinv_ref) / sq])
        coef = np.linalg.lstsq(A, b, rcond=None)[0]
        r = A @ coef - b
        return coef, float(r @ r)

    Tmin_c = T.max() / 0.9 * 1.0001
    grid = np.geomspace(Tmin_c, max(40.0 * T.max(), Tmin_c * 2), 36)
    costs = []
    for Tc in grid:
        try:
            costs.append(profiled_alpha(Tc)[1])
        except PairBreakingError:
            costs.append(np.inf)
    k = int(np.argmin(costs))
    Tc0 = grid[k]
    coef0 = profiled_alpha(Tc0)[0]
    alpha0 = float(np.clip(coef0[0], 1e-4, 0.99))
    x0 = [alpha0, Tc0]
    lo, hi, scale = [1e-6, Tmin_c], [0.999, np.inf], [max(alpha0, 1e-3), Tc0]
    if tls_background:
        x0.append(float(coef0[1]))
        lo.append(-np.inf)
        hi.append(np.inf)
        scale.append(max(abs(float(coef0[1])), float(np.max(np.abs(qinv))) * 1e-3))

    def safe_resid(x):
        try:
            return residuals(x)
        except (PairBreakingError, ParameterDomainError):
            return np.full(2 * T.size, 1e6)

    sol = optimize.least_squares(
        safe_resid, x0, method="trf", bounds=(lo, hi),
        x_scale=scale, diff_step=1e-7, xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=400,
    )
    alpha, Tc = sol.x[:2]
    c_tls = float(sol.x[2]) if tls_background else None
    converged = bool(sol.status > 0)
    r = sol.fun
    dof = max(r.size - len(x0), 1)
    s2 = float(r @ r) / dof
    J = sol.jac
    try:
        cov = np.linalg.inv(J.T @ J) * s2
        sig = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        sig = np.array([np.nan, np.nan])
        converged = False
    if T.max() < Tc / 4:
        raise FitDegeneracyError(
            f"temperature span up to {T.max():.3g} K does not reach T_c/4 = {Tc / 4:.3g} K", parameter="T_c"
        )
    if not converged:
        flags.append("not_converged")
    return MBFitResult(
        alpha_k=float(alpha), T_c=float(Tc), sigma_alpha_k=float(sig[0]), sigma_T_c=float(sig[1]),
        f_r0=float(f_r0), T_ref=T_ref, gap_ratio=gap_ratio, n_used=int(T.size),
        n_excluded=int(T_all.size - 1 - T.size), residual_rms=float(math.sqrt(s2)),
        converged=converged, flags=flags, tls_loss_amplitude=c_tls,
    )


def mb_sweep_curves(res: MBFitResult, T, qinv_ref: float):
    """Model curves matching the referencing used by :func:`fit_mb_sweep`.

    Returns (fractional shift, Q_i^-1) at temperatures ``T``; the loss curve
    is anchored to the measured ``qinv_ref`` at ``res.T_ref``.
    """
    mat = res.material()
    obs = mb_observables(mat, T, res.f_r0, T_ref=res.T_ref)
    q0 = mb_observables(mat, res.T_ref, res.f_r0, T_ref=res.T_ref).Q_i_inv
    qinv = obs.Q_i_inv - q0 + qinv_ref
    if res.tls_loss_amplitude is not None:
        Ts = tls_saturation_temperature(res.f_r0)
        qinv = qinv + res.tls_loss_amplitude * (np.tanh(Ts / np.asarray(T, dtype=float)) - np.tanh(Ts / res.T_ref))
    return obs.delta_fr, qinv


# ------------------------------------------------------------------ kinetics


@dataclass(frozen=True)
class KineticExtraction:
    L_k: float
    L_g: float
    f_sim: float
    f_meas: float

    @property
    def alpha_k(self) -> float:
        return self.L_k / (self.L_g + self.L_k)

    def as_dict(self) -> dict:
        return {"L_k": self.L_k, "L_g": self.L_g, "alpha_k": self.alpha_k, "f_sim": self.f_sim, "f_meas": self.f_meas}


def extract_kinetic(f_sim: float, f_meas: float, L_g: float) -> KineticExtraction:
    """Kinetic inductance per square from the measured-vs-simulated frequency ratio."""
    if not (f_meas > 0 and f_sim > 0):
        raise ParameterDomainError("f_meas", "frequencies must be positive")
    if f_meas > f_sim:
        raise ParameterDomainError("f_meas", f"measured {f_meas} Hz exceeds simulated {f_sim} Hz")
    if not L_g > 0:
        raise ParameterDomainError("L_g", "must be positive")
    L_k = ((f_sim / f_meas) ** 2 - 1.0) * L_g
    return KineticExtraction(L_k=L_k, L_g=L_g, f_sim=f_sim, f_meas=f_meas)


class KineticSummary(NamedTuple):
    L_k_mean: float
    L_k_std: float
    alpha_k_mean: float
    alpha_k_std: float


def aggregate_kinetics(extractions) -> KineticSummary:
    ex = list(extractions)
    if len(ex) < 2:
        raise ValueError("need at least 2 extractions")
    lk = np.array([e.L_k for e in ex])
    ak = np.array([e.alpha_k for e in ex])
    return KineticSummary(float(lk.mean()), float(lk.std(ddof=1)), float(ak.mean()), float(ak.std(ddof=1)))
