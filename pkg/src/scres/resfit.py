"""Notch-port resonance fitting.

Staged estimate (delay removal, algebraic circle fit, phase fit,
off-resonant point calibration) followed by a joint damped least-squares
refinement of all model parameters against the complex data.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg, optimize, signal
from scipy.ndimage import uniform_filter1d

from .errors import FitDegeneracyError, GeometryError, ParameterDomainError, TraceError
from .model import ComplexTrace, ResonatorParams, s21_notch

log = logging.getLogger(__name__)

PARAM_NAMES = ("f_r", "Q_i", "Q_e_mag", "phi", "amp", "amp_phase", "tau")

TAIL_FRACTION = 0.2
QI_SENTINEL = 1e9
MAX_ITER = 200
TOL = 1e-12


@dataclass
class FitResult:
    params: ResonatorParams
    sigmas: dict
    rms_residual: float
    n_points: int
    converged: bool
    covariance: np.ndarray
    staged: Optional[ResonatorParams] = None
    staged_rms: float = float("nan")
    flags: list = field(default_factory=list)
    label: str = ""

    @property
    def Q_c_sigma(self) -> float:
        """Standard error of Q_c = |Q_e|/cos(phi), with correlations."""
        p = self.params
        c = math.cos(p.phi)
        grad = np.zeros(len(PARAM_NAMES))
        grad[2] = 1.0 / c
        grad[3] = p.Q_e_mag * math.sin(p.phi) / c**2
        return float(math.sqrt(max(grad @ self.covariance @ grad, 0.0)))

    def as_dict(self) -> dict:
        d = {
            "label": self.label,
            "params": self.params.as_dict(),
            "sigmas": dict(self.sigmas, Q_c=self.Q_c_sigma),
            "rms_residual": self.rms_residual,
            "n_points": self.n_points,
            "converged": self.converged,
            "flags": list(self.flags),
        }
        return d


class CircleFit(NamedTuple):
    center: complex
    radius: float
    residual: float


class PhaseFit(NamedTuple):
    f_r: float
    Q_l: float
    theta0: float


class Preprocessed(NamedTuple):
    trace: ComplexTrace
    tau: float
    baseline: complex


def linewidth_estimate(trace: ComplexTrace) -> float:
    """Rough FWHM of the deepest |S21| dip, in hertz."""
    mag = np.abs(trace.s21)
    depth = -20 * np.log10(mag / np.median(mag))
    k = int(np.argmax(depth))
    df = np.mean(np.diff(trace.freqs))
    if not depth[k] > 0:
        return df
    with warnings.catch_warnings():
        # edge maxima have zero prominence; the one-bin floor below covers them
        warnings.simplefilter("ignore")
        w = signal.peak_widths(depth, [k], rel_height=0.5)[0][0]
    return max(float(w) * df, df)


# --------------------------------------------------------------------- circle


def circle_fit(points, refine=True) -> CircleFit:
    """Algebraic (Pratt) circle fit with optional geometric refinement."""
    z = np.asarray(points, dtype=complex)
    if z.size < 3:
        raise GeometryError("circle fit needs at least 3 points")
    z0 = z.mean()
    scale = np.max(np.abs(z - z0))
    if not scale > 0:
        raise GeometryError("all points coincide")
    w = (z - z0) / scale
    x, y = w.real, w.imag
    zz = x * x + y * y
    Z = np.column_stack([zz, x, y, np.ones_like(x)])
    M = Z.T @ Z / z.size
    B = np.array([[0, 0, 0, -2.0], [0, 1.0, 0, 0], [0, 0, 1.0, 0], [-2.0, 0, 0, 0]])
    vals, vecs = linalg.eig(M, B)
    vals = np.real(vals)
    ok = np.isfinite(vals) & (vals > -1e-12)
    if not np.any(ok):
        raise GeometryError("no admissible circle solution")
    k = np.flatnonzero(ok)[np.argmin(vals[ok])]
    A = np.real(vecs[:, k])
    if abs(A[0]) < 1e-10 * np.linalg.norm(A[1:3]):
        raise GeometryError("points are collinear")
    xc = -A[1] / (2 * A[0])
    yc = -A[2] / (2 * A[0])
    r = math.sqrt(max(A[1] ** 2 + A[2] ** 2 - 4 * A[0] * A[3], 0.0)) / (2 * abs(A[0]))
    if not (math.isfinite(r) and r > 0) or r > 1e6:
        raise GeometryError("points are collinear or degenerate")
    if refine:
        def resid(p):
            return np.hypot(x - p[0], y - p[1]) - p[2]

        def jac(p):
            d = np.hypot(x - p[0], y - p[1])
            d = np.where(d == 0, 1.0, d)
            return np.column_stack([-(x - p[0]) / d, -(y - p[1]) / d, -np.ones_like(x)])

        sol = optimize.least_squares(resid, [xc, yc, r], jac=jac, method="lm", xtol=1e-15, ftol=1e-15)
        xc, yc, r = sol.x
        r = abs(r)
    center = z0 + scale * complex(xc, yc)
    radius = scale * r
    residual = float(np.sqrt(np.mean((np.abs(z - center) - radius) ** 2)))
    return CircleFit(center, float(radius), residual)


# ---------------------------------------------------------------------- phase


def phase_model(f, f_r, Q_l, theta0):
    return theta0 + 2.0 * np.arctan(2.0 * Q_l * (1.0 - f / f_r))


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def phase_fit(trace: ComplexTrace, center: complex) -> PhaseFit:
    """Fit theta(f) = theta0 + 2 arctan(2 Q_l (1 - f/f_r)) around ``center``."""
    f = trace.freqs
    theta = np.unwrap(np.angle(trace.s21 - center))
    n = f.size
    # smoothing window grows with the point-to-point phase noise
    noise = 1.4826 * float(np.median(np.abs(np.diff(theta)))) / math.sqrt(2.0)
    win = int(min(max(3, n // 100, math.ceil((noise / 0.05) ** 2)), max(3, n // 10))) | 1
    smooth = uniform_filter1d(theta, win, mode="nearest")
    drop = smooth[0] - smooth[-1]
    rise = np.max(smooth - np.minimum.accumulate(smooth))
    if drop < np.pi / 4 or rise > max(0.5, 0.2 * drop):
        raise FitDegeneracyError("phase is not monotonically decreasing after unwrapping", parameter="Q_l")

    mid = 0.5 * (smooth[0] + smooth[-1])
    k = int(np.argmin(np.abs(smooth - mid)))
    fr0 = f[k]
    hi = np.flatnonzero(smooth >= mid + np.pi / 2)
    lo = np.flatnonzero(smooth <= mid - np.pi / 2)
    if hi.size and lo.size and f[lo[0]] > f[hi[-1]]:
        fwhm = f[lo[0]] - f[hi[-1]]
    else:
        grad = np.gradient(smooth, f)
        fwhm = 4.0 / max(np.max(-grad), 1e-30)
    ql0 = max(fr0 / max(fwhm, f[1] - f[0]), 2.0)
    theta00 = mid

    lw = fr0 / ql0

    def unpack(x):
        return fr0 + x[0] * lw, ql0 * math.exp(x[1]), theta00 + x[2]

    def resid(x):
        fr, ql, t0 = unpack(x)
        return _wrap(theta - phase_model(f, fr, ql, t0))

    x = np.zeros(3)
    # fit Q_l alone first, then everything
    sol = optimize.least_squares(lambda q: resid([0.0, q[0], 0.0]), [0.0], method="lm")
    x[1] = sol.x[0]
    sol = optimize.least_squares(resid, x, method="lm", xtol=1e-15, ftol=1e-15, max_nfev=2000)
    fr, ql, t0 = unpack(sol.x)
    if not (f[0] <= fr <= f[-1]) or ql <= 1:
        raise FitDegeneracyError("phase fit moved outside the data window", parameter="f_r")
    return PhaseFit(float(fr), float(ql), float(_wrap(t0)))


# ---------------------------------------------------------------- preprocess


def _tail_mask(n, frac=TAIL_FRACTION):
    k = max(2, int(round(frac * n)))
    m = np.zeros(n, dtype=bool)
    m[:k] = True
    m[-k:] = True
    return m, k


def _initial_delay(f, z):
    """Common phase slope of both tails, each with its own intercept."""
    m, k = _tail_mask(f.size)
    ph = np.unwrap(np.angle(z))
    fl, fr_ = f[:k], f[-k:]
    X = np.zeros((2 * k, 3))
    X[:k, 0] = fl - fl.mean()
    X[k:, 0] = fr_ - fr_.mean()
    X[:k, 1] = 1.0
    X[k:, 2] = 1.0
    y = np.concatenate([ph[:k], ph[-k:]])
    coef = np.linalg.lstsq(X, y, rcond=None)[0]
    return -coef[0] / (2 * np.pi)


def _circle_cost(f, z, tau):
    w = z * np.exp(2j * np.pi * f * tau)
    try:
        c = circle_fit(w, refine=False)
    except GeometryError:
        return np.inf
    return c.residual


def estimate_delay(f, z) -> float:
    """Cable delay that makes the resonance trace a circle."""
    tau0 = _initial_delay(f, z)
    span = f[-1] - f[0]
    half = 0.25 / span
    res = optimize.minimize_scalar(
        lambda t: _circle_cost(f, z, t),
        bounds=(tau0 - half, tau0 + half),
        method="bounded",
        options={"xatol": 1e-6 / span, "maxiter": 500},
    )
    return float(res.x) if res.fun <= _circle_cost(f, z, tau0) else float(tau0)


def preprocess(trace: ComplexTrace, tau=None) -> Preprocessed:
    """Remove cable delay and normalise the off-resonant point to 1+0j.

    If ``tau`` is given it is used as-is instead of being estimated.
    """
    trace.require_fittable()
    f, z = trace.freqs, trace.s21
    span = f[-1] - f[0]
    lw = linewidth_estimate(trace)
    if span < lw:
        raise TraceError(f"frequency span {span:.4g} Hz is below one linewidth ({lw:.4g} Hz)")
    if span < 3 * lw:
        warnings.warn(f"frequency span covers only {span / lw:.1f} linewidths", RuntimeWarning, stacklevel=2)
    if tau is None:
        tau = estimate_delay(f, z)
    zc = z * np.exp(2j * np.pi * f * tau)
    circ = circle_fit(zc)
    ph = phase_fit(trace.with_s21(zc), circ.center)
    off = circ.center - circ.radius * np.exp(1j * ph.theta0)
    return Preprocessed(trace.with_s21(zc / off), float(tau), complex(off))


# ------------------------------------------------------------ full-model fit


def _staged_estimate(trace: ComplexTrace):
    flags = []
    pre = preprocess(trace)
    circ = circle_fit(pre.trace.s21)
    ph = phase_fit(pre.trace, circ.center)
    r = circ.radius
    phi = float(np.angle(1.0 - circ.center))
    phi = float(np.clip(phi, -1.5, 1.5))
    Qe = ph.Q_l / (2.0 * r)
    Qc = Qe / math.cos(phi)
    inv_qi = 1.0 / ph.Q_l - 1.0 / Qc
    if inv_qi <= 1.0 / QI_SENTINEL:
        flags.append("Q_i_clamped")
        Qi = QI_SENTINEL
    else:
        Qi = 1.0 / inv_qi
    p = ResonatorParams(
        f_r=ph.f_r,
        Q_i=Qi,
        Q_e_mag=max(Qe, 1.0 + 1e-9),
        phi=phi,
        amp=abs(pre.baseline),
        amp_phase=float(np.angle(pre.baseline)),
        tau=pre.tau,
    )
    return p, flags


def _coarse_estimate(trace: ComplexTrace):
    """Start point from the smoothed magnitude dip, for traces too noisy for the phase fit."""
    f, z = trace.freqs, trace.s21
    n = f.size
    tails = _tail_mask(n)[0]
    tau = estimate_delay(f, z)
    zc = z * np.exp(2j * np.pi * f * tau)
    base = complex(np.mean(zc[tails]))
    mag = np.abs(zc / base)
    noise = float(np.std(mag[tails]))
    win = max(5, n // 40) | 1
    sm = uniform_filter1d(mag, win, mode="nearest")
    k = int(np.argmin(sm))
    depth = 1.0 - sm[k]
    if not depth > 4.0 * noise / math.sqrt(win):
        raise FitDegeneracyError("no significant dip above the noise", parameter="f_r")
    half = sm <= 1.0 - 0.5 * depth
    lo, hi = k, k
    while lo > 0 and half[lo - 1]:
        lo -= 1
    while hi < n - 1 and half[hi + 1]:
        hi += 1
    fwhm = max(f[hi] - f[lo], f[1] - f[0])
    Ql = f[k] / fwhm
    Qe = Ql / min(depth, 0.999)
    inv_qi = max(1.0 / Ql - 1.0 / Qe, 1.0 / QI_SENTINEL)
    p = ResonatorParams(f_r=float(f[k]), Q_i=1.0 / inv_qi, Q_e_mag=max(Qe, 1.0 + 1e-9), phi=0.0,
                        amp=abs(base), amp_phase=float(np.angle(base)), tau=float(tau))
    return p, ["coarse_start"]


def _theta_from_params(p: ResonatorParams):
    return np.array([p.f_r, 1.0 / p.Q_i, p.Q_e_mag, p.phi, p.amp, p.amp_phase, p.tau])


def _model_and_jac(theta, f, want_jac=True):
    fr, qi_inv, Qe, phi, amp, alpha, tau = theta
    cphi, sphi = math.cos(phi), math.sin(phi)
    Ql = 1.0 / (qi_inv + cphi / Qe)
    g = (Ql / Qe) * complex(cphi, sphi)
    D = 1.0 + 2j * Ql * (f - fr) / fr
    R = 1.0 - g / D
    E = amp * np.exp(1j * (alpha - 2 * np.pi * f * tau))
    S = E * R
    if not want_jac:
        return S, None
    dR_dQl = -g / (Ql * D * D)
    dQl_dqi = -Ql * Ql
    dQl_dQe = Ql * Ql * cphi / Qe**2
    dQl_dphi = Ql * Ql * sphi / Qe
    J = np.empty((f.size, 7), dtype=complex)
    J[:, 0] = E * g * (-2j * Ql * f / fr**2) / (D * D)
    J[:, 1] = E * dR_dQl * dQl_dqi
    J[:, 2] = E * (dR_dQl * dQl_dQe + g / (Qe * D))
    J[:, 3] = E * (dR_dQl * dQl_dphi - 1j * g / D)
    J[:, 4] = S / amp
    J[:, 5] = 1j * S
    J[:, 6] = -2j * np.pi * f * S
    return S, J


def _rms(S, z, amp):
    return float(np.sqrt(np.mean(np.abs(S - z) ** 2)) / amp)


def _theta_covariance(J, resid_sq_sum, n_obs):
    p = J.shape[1]
    dof = max(n_obs - p, 1)
    s2 = resid_sq_sum / dof
    JTJ = J.T @ J
    try:
        return linalg.pinvh(JTJ) * s2
    except linalg.LinAlgError:
        return np.full((p, p), np.nan)


def fit_resonance(trace: ComplexTrace, staged_only=False) -> FitResult:
    """Estimate ResonatorParams with uncertainties from one notch trace.

    Traces holding several dips are cropped to the deepest one first.
    """
    trace.require_fittable()
    trace = _crop_to_deepest(trace)
    f, z = trace.freqs, trace.s21
    try:
        p0, flags = _staged_estimate(trace)
    except FitDegeneracyError as exc:
        log.info("staged estimate failed for %r (%s); starting from the magnitude dip", trace.label, exc)
        p0, flags = _coarse_estimate(trace)
    th0 = _theta_from_params(p0)
    S0, _ = _model_and_jac(th0, f, want_jac=False)
    staged_rms = _rms(S0, z, p0.amp)

    # internal scaling: offsets relative to the staged estimate
    lw = p0.f_r / p0.Q_l
    span = f[-1] - f[0]
    scale = np.array([lw, 1.0 / p0.Q_l, p0.Q_e_mag, 1.0, p0.amp, 1.0, 1.0 / span])

    def to_theta(x):
        return th0 + x * scale

    def resid(x):
        S, _ = _model_and_jac(to_theta(x), f, want_jac=False)
        d = S - z
        return np.concatenate([d.real, d.imag])

    def jac(x):
        _, J = _model_and_jac(to_theta(x), f)
        J = J * scale
        return np.vstack([J.real, J.imag])

    theta, converged = th0, True
    if not staged_only:
        try:
            sol = optimize.least_squares(
                resid, np.zeros(7), jac=jac, method="lm", ftol=TOL, xtol=TOL, gtol=1e-15,
                max_nfev=MAX_ITER * 8,
            )
            converged = bool(sol.status > 0)
            theta_new = to_theta(sol.x)
            S1, _ = _model_and_jac(theta_new, f, want_jac=False)
            if _rms(S1, z, abs(theta_new[4])) <= staged_rms * (1 + 1e-12) and _theta_ok(theta_new):
                theta = theta_new
            else:
                flags.append("refinement_rejected")
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("refinement failed for %r: %s", trace.label, exc)
            converged = False
            flags.append("refinement_failed")

    fr, qi_inv, Qe, phi, amp, alpha, tau = theta
    if amp < 0:
        amp, alpha = -amp, alpha + math.pi
    if qi_inv <= 1.0 / QI_SENTINEL:
        if "Q_i_clamped" not in flags:
            flags.append("Q_i_clamped")
        Qi = QI_SENTINEL
    else:
        Qi = 1.0 / qi_inv
    params = ResonatorParams(f_r=fr, Q_i=Qi, Q_e_mag=Qe, phi=phi, amp=amp, amp_phase=float(_wrap(alpha)), tau=tau)

    S, J = _model_and_jac(theta, f)
    rms = _rms(S, z, amp)
    # amp_phase and tau are nearly collinear at GHz frequencies; invert in the
    # basis with the phase referenced to the window centre, columns normalised
    A = np.eye(7)
    A[5, 6] = 2 * np.pi * 0.5 * (f[0] + f[-1])
    Jp = np.vstack([J.real, J.imag]) @ A
    norms = np.linalg.norm(Jp, axis=0)
    norms[norms == 0] = 1.0
    cov_p = _theta_covariance(Jp / norms, float(np.sum(np.abs(S - z) ** 2)), 2 * f.size) / np.outer(norms, norms)
    # back to natural units, with 1/Q_i -> Q_i
    T = A.copy()
    T[1, :] *= -Qi * Qi
    cov = T @ cov_p @ T.T
    cov = 0.5 * (cov + cov.T)
    sig = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    sigmas = dict(zip(PARAM_NAMES, map(float, sig)))
    if not converged:
        flags.append("not_converged")
    return FitResult(
        params=params,
        sigmas=sigmas,
        rms_residual=rms,
        n_points=f.size,
        converged=converged,
        covariance=cov,
        staged=p0,
        staged_rms=staged_rms,
        flags=flags,
        label=trace.label,
    )


def _theta_ok(th):
    fr, qi_inv, Qe, phi, amp, alpha, tau = th
    return fr > 0 and Qe > 1 and abs(phi) < math.pi / 2 and amp != 0 and np.all(np.isfinite(th))


def fit_many(traces, jobs=1):
    """Fit several traces; results keep input order regardless of ``jobs``."""
    traces = list(traces)
    if jobs <= 1 or len(traces) < 2:
        return [fit_resonance(t) for t in traces]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fit_resonance, traces))


# --------------------------------------------------------------- segmentation

PROMINENCE_DB = 3.0
MIN_SEPARATION_LW = 20.0


def find_dips(trace: ComplexTrace, prominence_db=PROMINENCE_DB, min_separation_lw=MIN_SEPARATION_LW):
    """Indices and linewidths (Hz) of resonance dips in a wide trace."""
    mag_db = 20 * np.log10(np.abs(trace.s21))
    depth = np.median(mag_db) - mag_db
    peaks, props = signal.find_peaks(depth, prominence=prominence_db)
    if peaks.size == 0:
        return peaks, np.array([])
    widths = signal.peak_widths(depth, peaks, rel_height=0.5)[0]
    df = np.mean(np.diff(trace.freqs))
    lw = np.maximum(widths, 1.0) * df
    dist = max(1, int(min_separation_lw * np.median(widths)))
    keep, _ = signal.find_peaks(depth, prominence=prominence_db, distance=dist)
    sel = np.isin(peaks, keep)
    return peaks[sel], lw[sel]


def segment_resonances(trace: ComplexTrace, window_lw=10.0, **kw):
    """Split a multi-resonance trace into one sub-trace per detected dip."""
    peaks, lws = find_dips(trace, **kw)
    f = trace.freqs
    out = []
    for i, (k, lw) in enumerate(zip(peaks, lws)):
        lo = f[k] - window_lw * lw
        hi = f[k] + window_lw * lw
        if i > 0:
            lo = max(lo, 0.5 * (f[peaks[i - 1]] + f[k]))
        if i < peaks.size - 1:
            hi = min(hi, 0.5 * (f[k] + f[peaks[i + 1]]))
        m = (f >= lo) & (f <= hi)
        label = f"{trace.label}#{i}" if trace.label else f"dip{i}"
        out.append(ComplexTrace(f[m], trace.s21[m], trace.temperature_K, trace.power_dBm, label, dict(trace.meta)))
    return out


def _crop_to_deepest(trace: ComplexTrace) -> ComplexTrace:
    try:
        peaks, _ = find_dips(trace)
    except ValueError:
        return trace
    if peaks.size <= 1:
        return trace
    segs = segment_resonances(trace)
    depths = [np.min(np.abs(s.s21)) / np.median(np.abs(s.s21)) for s in segs]
    best = segs[int(np.argmin(depths))]
    return ComplexTrace(best.freqs, best.s21, trace.temperature_K, trace.power_dBm, trace.label, dict(trace.meta))


__all__ = [
    "FitResult",
    "CircleFit",
    "PhaseFit",
    "Preprocessed",
    "circle_fit",
    "phase_fit",
    "preprocess",
    "fit_resonance",
    "fit_many",
    "find_dips",
    "segment_resonances",
    "estimate_delay",
    "ParameterDomainError",
]
