"""Kinetic-inductance nonlinearity: bifurcating forward model and fitters.

The reduced detuning convention is ``y0 = Q_l (f - f_r) / f_r``. The
generator detuning ``y`` solves ``y = y0 + a / (1 + 4 y^2)``, i.e. the cubic
``4y^3 - 4 y0 y^2 + y - (y0 + a) = 0``, and replaces ``y0`` in the linear
notch response.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from .constants import A_CRIT
from .errors import FitDegeneracyError, ParameterDomainError
from .model import ComplexTrace, ResonatorParams

BRANCHES = ("up", "down")
GUARD_BINS = 3
N_STARTS = 3


def _cubic_roots(y0, a):
    """Real roots of the detuning cubic, vectorised.

    Returns an (N, 3) array sorted ascending with NaN padding where only a
    single real root exists.
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    a = np.broadcast_to(np.asarray(a, dtype=float), y0.shape)
    # monic form y^3 + b y^2 + c y + d
    b = -y0
    c = 0.25
    d = -(y0 + a) / 4.0
    p = c - b * b / 3.0
    q = 2.0 * b**3 / 27.0 - b * c / 3.0 + d
    disc = -(4.0 * p**3 + 27.0 * q * q)
    out = np.full(y0.shape + (3,), np.nan)
    shift = -b / 3.0

    three = disc > 0
    if np.any(three):
        pp, qq = p[three], q[three]
        m = 2.0 * np.sqrt(-pp / 3.0)
        arg = np.clip(3.0 * qq / (pp * m), -1.0, 1.0)
        th = np.arccos(arg) / 3.0
        k = np.arange(3)
        t = m[:, None] * np.cos(th[:, None] - 2.0 * np.pi * k / 3.0)
        out[three] = t + shift[three, None]

    one = ~three
    if np.any(one):
        pp, qq = p[one], q[one]
        s = np.sqrt(np.maximum(qq * qq / 4.0 + pp**3 / 27.0, 0.0))
        t = np.cbrt(-qq / 2.0 + s) + np.cbrt(-qq / 2.0 - s)
        out[one, 0] = t + shift[one]

    # two Newton steps restore full precision lost in the closed form
    y0c, ac = y0[:, None], a[:, None]
    for _ in range(2):
        g = 4.0 * out**3 - 4.0 * y0c * out**2 + out - (y0c + ac)
        dg = 12.0 * out**2 - 8.0 * y0c * out + 1.0
        with np.errstate(invalid="ignore", divide="ignore"):
            step = np.where(dg != 0, g / dg, 0.0)
        out = out - step
    out.sort(axis=1)  # NaN sorts last
    lin = a == 0
    if np.any(lin):
        out[lin] = np.nan
        out[lin, 0] = y0[lin]
    return out


def nl_detuning_roots(y0: float, a: float) -> np.ndarray:
    """All real roots (sorted) of ``4y^3 - 4 y0 y^2 + y - (y0 + a) = 0``."""
    if not (math.isfinite(y0) and math.isfinite(a)):
        raise ParameterDomainError("y0" if not math.isfinite(y0) else "a", "must be finite")
    if a == 0:
        return np.array([float(y0)])
    r = _cubic_roots(y0, a)[0]
    r = r[np.isfinite(r)]
    if r.size == 3 and np.isclose(r[0], r[1], rtol=0, atol=1e-9) or r.size == 3 and np.isclose(r[1], r[2], rtol=0, atol=1e-9):
        r = np.unique(np.round(r, 9))
    return r


def fold_points(a: float):
    """Edges ``(y0_lo, y0_hi)`` of the bistable window, or None if a <= a_crit.

    Inside the window the cubic has three real roots. An up-sweep jumps at
    ``y0_hi`` and a down-sweep at ``y0_lo``.
    """
    if a <= A_CRIT:
        return None
    # stationary points of y0(y) = y - a/(1+4y^2): (1+4y^2)^2 + 8 a y = 0
    r = np.roots([16.0, 0.0, 8.0, 8.0 * a, 1.0])
    r = np.sort(r[np.abs(r.imag) < 1e-9].real)
    if r.size < 2:
        return None
    y0 = r - a / (1.0 + 4.0 * r * r)
    return float(y0.min()), float(y0.max())


def _select_branch(roots, branch):
    if branch == "up":
        return roots[:, 0]
    return np.nanmax(roots, axis=1)


def _check_branch(branch):
    if branch not in BRANCHES:
        raise ParameterDomainError("branch", f"must be one of {BRANCHES} (got {branch!r})")


def generator_detuning(f, p: ResonatorParams, a: float, branch: str = "up"):
    """Effective detuning ``y`` along a frequency sweep.

    Points are visited in sweep order and each takes the root continuous with
    its predecessor. For this cubic the continuous root is the smallest one
    on an upward sweep and the largest on a downward sweep, because the
    branch the sweep arrives on is the one annihilated at the far fold.
    """
    _check_branch(branch)
    if not (math.isfinite(a) and a >= 0):
        raise ParameterDomainError("a", f"must be non-negative (got {a!r})")
    f = np.asarray(f, dtype=float)
    y0 = p.Q_l * (f - p.f_r) / p.f_r
    if a == 0:
        return y0
    return _select_branch(_cubic_roots(y0.ravel(), a), branch).reshape(f.shape)


def s21_nonlinear(f, p: ResonatorParams, a: float, branch: str = "up"):
    """Notch transmission of a resonator with kinetic-inductance nonlinearity."""
    f = np.asarray(f, dtype=float)
    y = generator_detuning(f, p, a, branch)
    res = 1.0 - (p.Q_l / p.Q_e_mag) * np.exp(1j * p.phi) / (1.0 + 2j * y)
    env = p.complex_amp
    if p.tau != 0.0:
        env = env * np.exp(-2j * np.pi * f * p.tau)
    return env * res


def jump_index(f, p: ResonatorParams, a: float, branch: str = "up") -> Optional[int]:
    """Index ``i`` such that the trace jumps between samples i-1 and i.

    Indices refer to the array as given (ascending frequency). Returns None
    when the fold crossed by the sweep lies outside the sampled span or
    a <= a_crit.
    """
    _check_branch(branch)
    edges = fold_points(a)
    if edges is None:
        return None
    f = np.asarray(f, dtype=float)
    y0 = p.Q_l * (f - p.f_r) / p.f_r
    edge = edges[1] if branch == "up" else edges[0]
    if not (y0[0] < edge < y0[-1]):
        return None
    return int(np.searchsorted(y0, edge))


def has_jump(f, p: ResonatorParams, a: float, branch: str = "up") -> bool:
    return jump_index(f, p, a, branch) is not None


def nonlinearity_from_power(P_d, E_star, p: ResonatorParams):
    """``a = 2 Q_l^3 / (Q_c f_r) * P_d / E*``."""
    return 2.0 * p.Q_l**3 / (p.Q_c * p.f_r) * np.asarray(P_d, dtype=float) / E_star


# ---------------------------------------------------------------------------
# single-trace fit


@dataclass
class NonlinearTraceFit:
    a_param: float
    params: ResonatorParams
    power_W: Optional[float]
    branch: str
    rms_residual: float
    converged: bool
    a_sigma: float = float("nan")
    df_r: float = 0.0
    flags: list = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        if not self.a_param >= 0:
            raise ParameterDomainError("a_param", f"must be non-negative (got {self.a_param})")

    @property
    def is_linear(self) -> bool:
        return "linear" in self.flags

    def as_dict(self) -> dict:
        return {
            "a": self.a_param,
            "a_sigma": self.a_sigma,
            "f_r": self.params.f_r,
            "Q_i": self.params.Q_i,
            "df_r": self.df_r,
            "power_W": self.power_W,
            "branch": self.branch,
            "rms_residual": self.rms_residual,
            "converged": self.converged,
            "flags": list(self.flags),
            "label": self.label,
        }


def _shape(f, ref: ResonatorParams, a, y_shift, branch, log_qi=0.0):
    """Unit-amplitude response; ``y_shift`` moves f_r by y_shift*f_r/Q_l (reference Q_l)
    and ``log_qi`` scales Q_i by exp(log_qi)."""
    p = ref.replace(f_r=ref.f_r * (1.0 + y_shift / ref.Q_l), Q_i=ref.Q_i * math.exp(log_qi),
                    amp=1.0, amp_phase=0.0)
    return s21_nonlinear(f, p, a, branch)


def _grid_costs(f, z, ref: ResonatorParams, a_grid, y_grid, branch):
    """Profiled squared residual on an (a, y_shift) grid, one root solve per a."""
    fr = ref.f_r * (1.0 + np.asarray(y_grid, dtype=float) / ref.Q_l)
    y0 = ref.Q_l * (f[None, :] / fr[:, None] - 1.0)
    env = np.exp(-2j * np.pi * f * ref.tau) if ref.tau != 0.0 else 1.0
    k = (ref.Q_l / ref.Q_e_mag) * np.exp(1j * ref.phi)
    out = np.empty((len(a_grid), len(y_grid)))
    zz = float(np.vdot(z, z).real)
    for i, a in enumerate(a_grid):
        y = y0 if a == 0 else _select_branch(_cubic_roots(y0.ravel(), a), branch).reshape(y0.shape)
        g = env * (1.0 - k / (1.0 + 2j * y))
        gz = g.conj() @ z
        gg = np.sum(np.abs(g) ** 2, axis=1)
        out[i] = zz - np.abs(gz) ** 2 / gg
    return out


def _profile_amp(g, z):
    """Complex scale minimising |z - A g|^2."""
    return complex(np.vdot(g, z) / np.vdot(g, g))


def fit_nonlinear_trace(trace: ComplexTrace, ref: ResonatorParams, branch: str = "up",
                        power_W: Optional[float] = None, a_max: float = 6.0,
                        fit_qi: bool = True) -> NonlinearTraceFit:
    """Fit the nonlinearity parameter, a small f_r drift and the complex scale.

    With ``fit_qi`` the internal Q is refitted too, since TLS saturation
    raises it between the low-power reference and the drive powers used
    here. Q_c and phi (and the cable delay) stay at the reference values.
    If the data jump, a guard band of three bins around the largest step is
    removed from the residual.
    """
    _check_branch(branch)
    trace.require_fittable()
    f, z = trace.freqs, trace.s21
    if power_W is None and trace.power_dBm is not None:
        power_W = 10.0 ** ((trace.power_dBm - 30.0) / 10.0)

    def sse(a, ys, mask):
        g = _shape(f, ref, a, ys, branch)
        A = _profile_amp(g[mask], z[mask])
        r = z[mask] - A * g[mask]
        return float(np.vdot(r, r).real)

    full = np.ones(f.size, dtype=bool)
    a_grid = np.linspace(0.0, a_max, 31)
    y_grid = np.linspace(-2.0, 2.0, 21)
    costs = _grid_costs(f, z, ref, a_grid, y_grid, branch)
    grid = sorted((costs[i, j], a_grid[i], y_grid[j]) for i in range(a_grid.size) for j in range(y_grid.size))

    jump_at = int(np.argmax(np.abs(np.diff(z)))) + 1
    guarded = full.copy()
    guarded[max(jump_at - 1, 0):jump_at + GUARD_BINS - 1] = False

    zq = [z, z[guarded]]
    fq = [f, f[guarded]]

    def refine(a0, y0):
        # the jump moves in whole bins, so the objective is piecewise smooth;
        # polish with a simplex first, then least squares for the covariance
        mask = guarded if a0 > A_CRIT else full
        k = 0 if mask is full else 1
        res = optimize.minimize(lambda x: sse(max(x[0], 0.0), x[1], mask), [a0, y0], method="Nelder-Mead",
                                options={"xatol": 1e-5, "fatol": 1e-10 * max(grid[0][0], 1e-30), "maxiter": 400})
        a1, y1 = max(float(res.x[0]), 0.0), float(res.x[1])
        g = _shape(f, ref, a1, y1, branch)
        A1 = _profile_amp(g[mask], z[mask])
        zm, fm = zq[k], fq[k]

        def resid(x):
            gg = _shape(fm, ref, max(x[0], 0.0), x[1], branch, x[4] if fit_qi else 0.0)
            r = zm - complex(x[2], x[3]) * gg
            return np.concatenate([r.real, r.imag])

        x0 = np.array([a1, y1, A1.real, A1.imag] + ([0.0] if fit_qi else []))
        scale = [max(a1, 0.1), 0.01, abs(A1), abs(A1)] + ([0.05] if fit_qi else [])
        sol = optimize.least_squares(resid, x0, method="trf", x_scale=scale,
                                     diff_step=1e-7, xtol=1e-12, ftol=1e-12)
        x = sol.x if np.sum(sol.fun**2) <= np.sum(resid(x0) ** 2) else x0
        if k == 1 and x[0] <= A_CRIT:
            # no fold in the refined model: score it on every bin
            zm, fm, mask = z, f, full
        r = resid(x)
        return float(r @ r) / r.size, x, r, sol, mask

    # several starts: the best distinct coarse-grid cells
    starts = []
    for _, a0, y0 in grid:
        if all(abs(a0 - b) > 0.15 or abs(y0 - c) > 0.25 for b, c in starts):
            starts.append((a0, y0))
        if len(starts) == N_STARTS:
            break
    cost, x, r, sol, mask = min((refine(a0, y0) for a0, y0 in starts), key=lambda t: t[0])
    zm = z[mask]
    dof = max(r.size - x.size, 1)
    s2 = float(r @ r) / dof
    J = sol.jac
    try:
        cov = np.linalg.pinv(J.T @ J) * s2
        a_sig = float(math.sqrt(abs(cov[0, 0])))
    except np.linalg.LinAlgError:
        a_sig = float("inf")
    a_fit = max(float(x[0]), 0.0)
    A = complex(x[2], x[3])
    rms = float(math.sqrt(float(r @ r) / zm.size))
    flags = []
    if not sol.success:
        flags.append("not_converged")
    if not mask.all():
        flags.append("guard_band")
    if not (a_fit > 3.0 * a_sig):
        flags.append("linear")
        a_fit = 0.0
    f_r = ref.f_r * (1.0 + float(x[1]) / ref.Q_l)
    Q_i = ref.Q_i * math.exp(float(x[4])) if fit_qi else ref.Q_i
    params = ref.replace(f_r=f_r, Q_i=Q_i, amp=abs(A), amp_phase=math.atan2(A.imag, A.real))
    return NonlinearTraceFit(
        a_param=a_fit, params=params, power_W=power_W, branch=branch, rms_residual=rms,
        converged=bool(sol.success), a_sigma=a_sig, df_r=f_r - ref.f_r, flags=flags, label=trace.label,
    )


# ---------------------------------------------------------------------------
# energy and current-density scales


@dataclass
class NonlinearScale:
    E_star: float
    E_star_sigma: float
    slope: float
    slope_sigma: float
    n_powers: int
    J_star: Optional[float] = None
    J_star_sigma: Optional[float] = None
    geometry: Optional[tuple] = None
    L_k: Optional[float] = None
    alpha_k: Optional[float] = None
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if not (self.E_star > 0 and self.slope > 0):
            raise FitDegeneracyError("non-positive a-vs-power slope", parameter="E_star")

    def as_dict(self) -> dict:
        return {
            "E_star": self.E_star,
            "E_star_sigma": self.E_star_sigma,
            "slope": self.slope,
            "slope_sigma": self.slope_sigma,
            "n_powers": self.n_powers,
            "J_star": self.J_star,
            "J_star_sigma": self.J_star_sigma,
            "geometry": list(self.geometry) if self.geometry else None,
            "L_k": self.L_k,
            "alpha_k": self.alpha_k,
            "flags": list(self.flags),
        }


def fit_a_vs_power(fits: Sequence[NonlinearTraceFit], ref: ResonatorParams, powers_W=None) -> NonlinearScale:
    """Zero-intercept weighted regression of a on drive power.

    Each power is first scaled by ``(Q_l / Q_l_ref)^3`` with the Q_l fitted
    on that trace, so ``a = slope * P_eff`` holds even when Q_i changes with
    power. ``E* = 2 Q_l^3 / (Q_c f_r slope)`` with the reference loaded and
    coupling Q. A quadratic term significant beyond 3 sigma raises a warning
    and adds the ``model_violation`` flag.
    """
    if powers_W is None:
        powers_W = [ft.power_W for ft in fits]
    P = np.asarray(powers_W, dtype=float)
    a = np.array([ft.a_param for ft in fits], dtype=float)
    sig = np.array([ft.a_sigma for ft in fits], dtype=float)
    if P.size < 4:
        raise FitDegeneracyError(f"need at least 4 powers, got {P.size}", parameter="E_star")
    if np.any(~np.isfinite(P)) or np.any(P <= 0):
        raise ParameterDomainError("powers_W", "must be positive and finite")
    if not np.all(np.isfinite(sig) & (sig > 0)):
        sig = np.ones_like(a)
    P = P * np.array([(ft.params.Q_l / ref.Q_l) ** 3 for ft in fits])
    w = 1.0 / sig**2
    sxx = float(np.sum(w * P * P))
    slope = float(np.sum(w * P * a)) / sxx
    r = a - slope * P
    chi2 = float(np.sum(w * r * r)) / max(P.size - 1, 1)
    slope_sigma = math.sqrt(max(chi2, 1.0) / sxx)
    flags = []
    # curvature check: a = s P + c P^2
    u = P / P.max()  # scaled so the normal matrix stays well conditioned
    X = np.column_stack([u, u * u]) * np.sqrt(w)[:, None]
    coef, *_ = np.linalg.lstsq(X, a * np.sqrt(w), rcond=None)
    rq = a - np.column_stack([u, u * u]) @ coef
    s2q = max(float(np.sum(w * rq * rq)) / max(P.size - 2, 1), 1.0)
    cov = np.linalg.pinv(X.T @ X) * s2q
    if abs(coef[1]) > 3.0 * math.sqrt(abs(cov[1, 1])):
        flags.append("model_violation")
        warnings.warn("a is not linear in drive power (quadratic term > 3 sigma)", RuntimeWarning, stacklevel=2)
    if not slope > 0:
        raise FitDegeneracyError("a-vs-power slope is not positive", parameter="E_star")
    pref = 2.0 * ref.Q_l**3 / (ref.Q_c * ref.f_r)
    E = pref / slope
    return NonlinearScale(E_star=E, E_star_sigma=E * slope_sigma / slope, slope=slope,
                          slope_sigma=slope_sigma, n_powers=int(P.size), flags=flags)


def _geometry(geometry):
    if geometry is None:
        raise ParameterDomainError(
            "geometry", "inductor (area_m2, length_m) must be given explicitly; there is no default"
        )
    area, length = map(float, geometry)
    if not (area > 0 and length > 0):
        raise ParameterDomainError("geometry", "area and length must be positive")
    return area, length


def geometry_constant(kappa: float, geometry) -> float:
    """``C_geom = kappa / (area * length)``, in 1/m^4 when kappa is in 1/m."""
    area, length = _geometry(geometry)
    return kappa / (area * length)


def calibrate_kappa(E_star, J_star_A_cm2, L_k, alpha_k, geometry) -> float:
    """Proportionality constant that maps one known (E*, J*) pair exactly."""
    area, length = _geometry(geometry)
    J = J_star_A_cm2 * 1e4
    return J * J * L_k * area * length / (E_star * alpha_k)


def j_star_from_e_star(E_star, L_k, alpha_k, geometry=None, kappa: Optional[float] = None) -> float:
    """Current-density scale in A/cm^2 from ``J*^2 = E* alpha_k C_geom / L_k``.

    ``L_k`` is the sheet kinetic inductance in H/sq and ``geometry`` the
    inductor (cross-section area m^2, length m). ``kappa`` must come from
    :func:`calibrate_kappa` or explicit configuration.
    """
    for name, v in (("E_star", E_star), ("L_k", L_k), ("alpha_k", alpha_k)):
        if not (math.isfinite(v) and v > 0):
            raise ParameterDomainError(name, f"must be positive (got {v!r})")
    if kappa is None:
        raise ParameterDomainError("kappa", "geometry constant must be configured or calibrated")
    C = geometry_constant(kappa, geometry)
    return math.sqrt(E_star * alpha_k * C / L_k) * 1e-4


def attach_j_star(scale: NonlinearScale, L_k, alpha_k, geometry, kappa) -> NonlinearScale:
    J = j_star_from_e_star(scale.E_star, L_k, alpha_k, geometry, kappa)
    scale.J_star = J
    scale.J_star_sigma = 0.5 * J * scale.E_star_sigma / scale.E_star
    scale.geometry = tuple(map(float, geometry))
    scale.L_k = float(L_k)
    scale.alpha_k = float(alpha_k)
    return scale
