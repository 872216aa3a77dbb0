"""Power-dependent two-level-system loss and its fitter."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .constants import H_PLANCK, K_B
from .errors import FitDegeneracyError, ParameterDomainError

T_SETPOINT = 0.015
PARAM_NAMES = ("n_c", "beta", "F_delta0", "Q_i_sat")


@dataclass(frozen=True)
class TLSParams:
    n_c: float
    beta: float
    F_delta0: float
    Q_i_sat: float

    def __post_init__(self):
        for name in PARAM_NAMES:
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ParameterDomainError(name, f"must be positive and finite (got {v!r})")


@dataclass(frozen=True)
class TLSFitResult(TLSParams):
    f_r: float = 0.0
    T: float = T_SETPOINT
    sigmas: dict = field(default_factory=dict)
    converged: bool = True
    residual_rms: float = float("nan")
    n_points: int = 0
    flags: list = field(default_factory=list)

    def __post_init__(self):
        super().__post_init__()
        if not 0 < self.beta <= 1:
            warnings.warn(f"beta = {self.beta:.3g} outside (0, 1]", RuntimeWarning, stacklevel=3)

    def params(self) -> TLSParams:
        return TLSParams(self.n_c, self.beta, self.F_delta0, self.Q_i_sat)

    def as_dict(self) -> dict:
        return {
            "n_c": self.n_c,
            "beta": self.beta,
            "F_delta0": self.F_delta0,
            "Q_i_sat": self.Q_i_sat,
            "f_r": self.f_r,
            "T": self.T,
            "sigmas": dict(self.sigmas),
            "converged": self.converged,
            "residual_rms": self.residual_rms,
            "n_points": self.n_points,
            "flags": list(self.flags),
        }


def thermal_factor(T, f_r):
    return np.tanh(H_PLANCK * f_r / (2.0 * K_B * np.asarray(T, dtype=float)))


def tls_loss(n, p: TLSParams, T: float = T_SETPOINT, f_r: float = 5e9):
    """Loss tangent 1/Q_i at photon number ``n``."""
    n = np.asarray(n, dtype=float)
    if np.any(n < 0):
        raise ParameterDomainError("n", "photon number must be non-negative")
    if not T > 0:
        raise ParameterDomainError("T", "must be positive")
    val = p.F_delta0 * thermal_factor(T, f_r) / (1.0 + n / p.n_c) ** p.beta + 1.0 / p.Q_i_sat
    return float(val) if val.ndim == 0 else val


def _log_model(x, n, th):
    log_nc, log_beta, log_fd, log_qs_inv = x
    beta = math.exp(log_beta)
    tls = math.exp(log_fd) * th * np.exp(-beta * np.log1p(n * math.exp(-log_nc)))
    return np.log(tls + math.exp(log_qs_inv))


def _initial_guess(n, tand, th):
    """Plateau, depth and half-depth crossing read off the data shape."""
    k = max(2, n.size // 8)
    plateau = float(np.mean(tand[-k:]))
    top = float(np.mean(tand[:k]))
    depth = max(top - plateau, 0.05 * top)
    half = plateau + 0.5 * depth
    below = np.flatnonzero(tand <= half)
    n_c = float(n[below[0]]) if below.size else float(np.sqrt(n[0] * n[-1]))
    return np.log([n_c, 0.15, depth / th, max(plateau, 1e-12)])


def fit_tls_sweep(points, T: float = T_SETPOINT, f_r: float = 5e9, sigma_log_nc_max=1.0) -> TLSFitResult:
    """Fit the TLS loss model to (photon number, Q_i) pairs.

    Residuals are taken on log(tan delta), i.e. multiplicative noise on Q_i.
    Raises FitDegeneracyError when the critical photon number is not
    constrained by the data.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (N, 2) array of (n, Q_i)")
    pts = pts[np.argsort(pts[:, 0])]
    n, qi = pts.T
    if n.size < 8:
        raise FitDegeneracyError(f"need at least 8 points, got {n.size}", parameter="n_c")
    if np.any(qi <= 0) or np.any(n <= 0):
        raise ParameterDomainError("points", "photon numbers and Q_i must be positive")
    if math.log10(n[-1] / n[0]) < 3:
        raise FitDegeneracyError("photon numbers span less than 3 decades", parameter="n_c")
    tand = 1.0 / qi
    y = np.log(tand)
    th = float(thermal_factor(T, f_r))

    def resid(x):
        return _log_model(x, n, th) - y

    starts = [_initial_guess(n, tand, th)]
    lo, hi = math.log(n[0]), math.log(n[-1])
    for log_nc, beta in itertools.product(np.linspace(lo, hi, 7), (0.03, 0.1, 0.3, 0.8)):
        s = starts[0].copy()
        s[0], s[1] = log_nc, math.log(beta)
        starts.append(s)
    best = min(starts, key=lambda s: float(np.sum(resid(s) ** 2)))
    sol = optimize.least_squares(resid, best, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=4000)
    x = sol.x
    r = sol.fun
    dof = max(n.size - 4, 1)
    s2 = float(r @ r) / dof
    J = sol.jac
    with np.errstate(all="ignore"):
        try:
            cov = np.linalg.inv(J.T @ J) * s2
        except np.linalg.LinAlgError:
            cov = np.full((4, 4), np.inf)
    slog = np.sqrt(np.abs(np.diag(cov)))
    vals = np.exp(x)
    n_c, beta, fd, qs_inv = vals
    if not np.isfinite(slog[0]) or slog[0] > sigma_log_nc_max or n_c > n[-1]:
        raise FitDegeneracyError(
            f"critical photon number not identifiable: n_c = {n_c:.3g} "
            f"(relative uncertainty {slog[0]:.2g}, data reach n = {n[-1]:.3g})",
            parameter="n_c",
        )
    sig = vals * slog
    sig[3] = slog[3] / qs_inv
    sigmas = dict(zip(PARAM_NAMES, map(float, sig)))
    flags = [] if sol.status > 0 else ["not_converged"]
    return TLSFitResult(
        n_c=float(n_c), beta=float(beta), F_delta0=float(fd), Q_i_sat=float(1.0 / qs_inv),
        f_r=float(f_r), T=float(T), sigmas=sigmas, converged=sol.status > 0,
        residual_rms=float(math.sqrt(s2)), n_points=int(n.size), flags=flags,
    )


def delta_fr_vs_power(points):
    """Fractional frequency shift relative to the lowest-photon-number point."""
    pts = np.asarray(points, dtype=float)
    pts = pts[np.argsort(pts[:, 0])]
    n, fr = pts.T
    if np.any(fr <= 0):
        raise ParameterDomainError("f_r", "must be positive")
    return np.column_stack([n, (fr - fr[0]) / fr[0]])


def linear_regime_mask(rms_residuals, factor=5.0):
    """Mask of powers (ascending) below the onset of nonlinear distortion.

    Powers from the first trace whose fit residual exceeds ``factor`` times
    the median residual of the lowest-power third are excluded.
    """
    r = np.asarray(rms_residuals, dtype=float)
    k = max(3, r.size // 3)
    ref = float(np.median(r[:k]))
    bad = np.flatnonzero(r > factor * ref)
    mask = np.ones(r.size, dtype=bool)
    if bad.size:
        mask[bad[0]:] = False
    return mask
