"""Forward simulator used as the oracle for every fitter.

All randomness flows from one master seed. Each (kind, resonator, condition)
tuple owns an independent PCG64 stream derived through ``SeedSequence``
spawn keys, so results do not depend on evaluation order or thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .constants import H_PLANCK
from .errors import ParameterDomainError, SimulationError
from .mattis_bardeen import MBMaterial, mb_observables
from .model import ComplexTrace, ResonatorParams, dbm_to_watts, s21_notch
from .nonlinear import nonlinearity_from_power, s21_nonlinear
from .tls import TLSParams, tls_loss

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"
T_REF = 0.015
DEFAULT_SIGMA = 1e-3
DEFAULT_ATTENUATION_DB = 60.0
A_THRESHOLD = 0.01
MAX_ITER = 50
FP_TOL = 1e-9
MIN_SEPARATION_LW = 10.0


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the tuple ``key`` under master ``seed``."""
    if seed is None:
        raise ParameterDomainError("seed", "an explicit seed is required")
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class ResonatorSpec:
    """One resonator on the feedline.

    ``params`` holds the low-temperature reference. ``params.Q_i`` is used as
    the power-independent residual quality factor only when ``tls`` is None;
    with TLS parameters, Q_i(n) follows the TLS loss model (whose saturated
    term plays that role). ``tls_shift`` scales a phenomenological fractional
    frequency upshift ``tls_shift * F delta0 * (1 - (1 + n/n_c)^-beta)`` as
    the TLS saturate.
    """

    label: str
    params: ResonatorParams
    material: Optional[MBMaterial] = None
    tls: Optional[TLSParams] = None
    E_star: Optional[float] = None
    tls_shift: float = 0.0
    T_ref: float = T_REF


@dataclass(frozen=True)
class OperatingPoint:
    params: ResonatorParams
    a: float
    n: float
    iterations: int


def operating_point(res: ResonatorSpec, T: float = T_REF, power_dBm: Optional[float] = None) -> OperatingPoint:
    """Resonator parameters at temperature ``T`` and on-chip power.

    The photon number is solved self-consistently with Q_l(n) by fixed-point
    iteration.
    """
    p0 = res.params
    f_r = p0.f_r
    qinv_mb = 0.0
    if res.material is not None:
        obs = mb_observables(res.material, T, p0.f_r, T_ref=res.T_ref)
        f_r = p0.f_r * (1.0 + obs.delta_fr)
        qinv_mb = obs.Q_i_inv
    P = 0.0 if power_dBm is None else float(dbm_to_watts(power_dBm))

    def qi_at(n):
        if res.tls is None:
            return 1.0 / (1.0 / p0.Q_i + qinv_mb)
        return 1.0 / (qinv_mb + tls_loss(n, res.tls, T, p0.f_r))

    def params_at(n):
        q = qi_at(n)
        fr = f_r
        if res.tls is not None and res.tls_shift:
            sat = 1.0 - (1.0 + n / res.tls.n_c) ** (-res.tls.beta)
            fr = f_r * (1.0 + res.tls_shift * res.tls.F_delta0 * sat)
        if qinv_mb == 0.0 and res.tls is None and fr == p0.f_r:
            return p0
        return p0.replace(Q_i=q, f_r=fr)

    n = 0.0
    it = 0
    p = params_at(0.0)
    if P > 0:
        for it in range(1, MAX_ITER + 1):
            n_new = p.Q_l**2 / (math.pi * p.Q_c) * P / (H_PLANCK * p.f_r**2)
            p = params_at(n_new)
            done = abs(n_new - n) <= FP_TOL * max(abs(n_new), 1e-300)
            n = n_new
            if done:
                break
        else:
            raise SimulationError(f"photon number did not converge in {MAX_ITER} iterations ({res.label})")
    a = 0.0
    if res.E_star is not None and P > 0:
        a = float(nonlinearity_from_power(P, res.E_star, p))
    return OperatingPoint(p, a, n, it)


def _noise(rng, n, sigma, jitter):
    z = np.zeros(n, dtype=complex)
    if sigma > 0:
        z = (sigma / math.sqrt(2.0)) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    g = np.ones(n)
    if jitter > 0:
        g = 1.0 + jitter * rng.standard_normal(n)
    return z, g


def simulate_trace(res: ResonatorSpec, f, T: float = T_REF, power_dBm: Optional[float] = None,
                   sweep: str = "up", sigma: float = DEFAULT_SIGMA, jitter: float = 0.0,
                   rng: Optional[np.random.Generator] = None, label: Optional[str] = None,
                   meta: Optional[dict] = None) -> ComplexTrace:
    """Noisy single-resonator trace at (T, on-chip power).

    Noise is complex Gaussian with total variance ``(sigma*amp)^2`` plus an
    optional multiplicative amplitude jitter. ``rng`` is required whenever
    noise is requested.
    """
    f = np.asarray(f, dtype=float)
    op = operating_point(res, T, power_dBm)
    if op.a > A_THRESHOLD:
        z = s21_nonlinear(f, op.params, op.a, sweep)
    else:
        z = s21_notch(f, op.params)
    if sigma > 0 or jitter > 0:
        if rng is None:
            raise ParameterDomainError("rng", "a seeded generator is required for noisy traces")
        add, mul = _noise(rng, f.size, sigma * op.params.amp, jitter)
        z = z * mul + add
    md = {"a": op.a, "n": op.n, "f_r_true": op.params.f_r, "Q_i_true": op.params.Q_i,
          "Q_c_true": op.params.Q_c, "sweep": sweep}
    md.update(meta or {})
    return ComplexTrace(f, z, T, power_dBm, label if label is not None else res.label, md)


def trace_grid(p: ResonatorParams, n_points: int = 801, span_lw: float = 12.0, a: float = 0.0):
    """Uniform grid covering ``span_lw`` linewidths, widened toward low f by the pulling."""
    lw = p.f_r / p.Q_l
    lo = p.f_r - (0.5 * span_lw + a) * lw
    hi = p.f_r + 0.5 * span_lw * lw
    return np.linspace(lo, hi, n_points)


# ----------------------------------------------------------------------- chip


@dataclass(frozen=True)
class ChipSpec:
    """Resonators sharing a feedline plus baseline and noise settings."""

    resonators: tuple
    seed: int
    material_tag: str = ""
    baseline_amp: float = 1.0
    baseline_phase: float = 0.0
    baseline_tau: float = 0.0
    sigma: float = DEFAULT_SIGMA
    jitter: float = 0.0
    attenuation_dB: float = DEFAULT_ATTENUATION_DB
    chip_id: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.seed is None or isinstance(self.seed, bool) or int(self.seed) != self.seed:
            raise ParameterDomainError("seed", "an explicit integer seed is required")
        object.__setattr__(self, "resonators", tuple(self.resonators))
        if not self.attenuation_dB >= 0:
            raise ParameterDomainError("attenuation_dB", "must be non-negative")
        check_separation(self.resonators)

    def index(self, label) -> int:
        for i, r in enumerate(self.resonators):
            if r.label == label:
                return i
        raise KeyError(label)

    def with_baseline(self, res: ResonatorSpec) -> ResonatorSpec:
        """Resonator view carrying the feedline amplitude and delay."""
        p = res.params.replace(amp=self.baseline_amp, amp_phase=self.baseline_phase, tau=self.baseline_tau)
        return replace(res, params=p)


def check_separation(resonators: Sequence[ResonatorSpec], min_lw: float = MIN_SEPARATION_LW):
    if len(resonators) < 2:
        return
    ordered = sorted(resonators, key=lambda r: r.params.f_r)
    for r0, r1 in zip(ordered, ordered[1:]):
        lw = max(r0.params.f_r / r0.params.Q_l, r1.params.f_r / r1.params.Q_l)
        if r1.params.f_r - r0.params.f_r < min_lw * lw:
            raise ParameterDomainError(
                "resonators", f"{r0.label} and {r1.label} are closer than {min_lw:g} linewidths"
            )


def simulate_chip(spec: ChipSpec, f, T: float = T_REF, power_dBm: Optional[float] = None,
                  condition: int = 0, label: str = "chip") -> ComplexTrace:
    """Full feedline transmission: product of unit-scale resonator responses."""
    f = np.asarray(f, dtype=float)
    z = np.full(f.size, spec.baseline_amp * complex(math.cos(spec.baseline_phase), math.sin(spec.baseline_phase)))
    if spec.baseline_tau:
        z = z * np.exp(-2j * np.pi * f * spec.baseline_tau)
    for r in spec.resonators:
        op = operating_point(r, T, power_dBm)
        p = op.params.replace(amp=1.0, amp_phase=0.0, tau=0.0)
        z = z * (s21_nonlinear(f, p, op.a, "up") if op.a > A_THRESHOLD else s21_notch(f, p))
    if spec.sigma > 0 or spec.jitter > 0:
        rng = stream(spec.seed, spec.chip_id, 0, 0, condition)
        add, mul = _noise(rng, f.size, spec.sigma * spec.baseline_amp, spec.jitter)
        z = z * mul + add
    meta = {"rng": RNG_ALGORITHM, "seed": int(spec.seed), "stream": [spec.chip_id, 0, 0, condition],
            "material": spec.material_tag}
    return ComplexTrace(f, z, T, power_dBm, label, meta)


def simulate_resonator(spec: ChipSpec, index: int, f=None, T: float = T_REF, power_dBm=None,
                       sweep: str = "up", condition: int = 0, n_points: int = 801,
                       span_lw: float = 12.0) -> ComplexTrace:
    """Windowed trace of one chip resonator on the chip baseline.

    The noise stream is keyed on (resonator, condition), so the same trace
    comes out whatever order or thread it is generated in.
    """
    res = spec.with_baseline(spec.resonators[index])
    if f is None:
        op = operating_point(res, T, power_dBm)
        f = trace_grid(op.params, n_points, span_lw, a=op.a)
    key = (spec.chip_id, 1, index, condition)
    meta = {"rng": RNG_ALGORITHM, "seed": int(spec.seed), "stream": list(key), "material": spec.material_tag}
    return simulate_trace(res, f, T, power_dBm, sweep, spec.sigma, spec.jitter,
                          rng=stream(spec.seed, *key), label=res.label, meta=meta)


def temperature_sweep(spec: ChipSpec, index: int, temps, power_dBm=-100.0, **kw):
    return [simulate_resonator(spec, index, T=float(T), power_dBm=power_dBm, condition=1000 + i, **kw)
            for i, T in enumerate(temps)]


def power_sweep(spec: ChipSpec, index: int, powers_dBm, T=T_REF, sweep="up", **kw):
    return [simulate_resonator(spec, index, T=T, power_dBm=float(P), sweep=sweep, condition=2000 + i, **kw)
            for i, P in enumerate(powers_dBm)]


def default_power_grid(lo=-120.0, hi=-40.0, step=2.0):
    return np.arange(lo, hi + 0.5 * step, step)


# ------------------------------------------------------------ chip preset

# resonance frequencies (GHz) at low power for the anchor designs
ANCHOR_FR = {
    "Nb": {1: 1.578422, 4: 1.644296, 8: 1.797254},
    "NbAu": {1: 1.551530, 4: 1.613699, 8: 1.753702},
}
# TLS parameters: n_c, beta, F delta0, Q_i_sat
ANCHOR_TLS = {
    "Nb": {1: (1.02e9, 8.46e-2, 2.48e-6, 8.80e5), 4: (7.46e8, 1.14e-1, 1.81e-6, 8.72e5),
           8: (6.93e7, 1.15e-1, 1.97e-6, 9.52e5)},
    "NbAu": {1: (4.41e5, 3.05e-2, 8.77e-7, 9.64e5), 4: (3.40e6, 4.81e-2, 6.07e-7, 9.99e5),
             8: (2.59e6, 4.65e-2, 9.74e-7, 9.91e5)},
}
# nonlinear energy scales (J)
ANCHOR_ESTAR = {
    "Nb": {1: 7.50e-7, 4: 7.28e-7, 8: 5.49e-7},
    "NbAu": {1: 1.16e-7, 4: 9.03e-8, 8: 7.33e-8},
}
# MB fit values and mean kinetic parameters per material
MATERIALS = {
    "Nb": {"T_c": 8.7, "alpha_k": 0.063, "L_k": 0.13e-12, "alpha_k_kin": 0.057, "tls_shift": 1.0},
    "NbAu": {"T_c": 7.3, "alpha_k": 0.103, "L_k": 0.22e-12, "alpha_k_kin": 0.094, "tls_shift": 0.0},
}
MATERIAL_NAMES = {"Nb": "Nb", "NbAu": "Nb/Au"}
L_G = 2.15e-12
Q_C_NOMINAL = 7.90e4
N_DESIGNS = 12


def _design_frequencies(anchors):
    """Twelve frequencies (Hz) through the anchors; linear between, extrapolated after."""
    k = np.arange(1, N_DESIGNS + 1)
    ks = np.array(sorted(anchors))
    fs = np.array([anchors[i] for i in ks])
    out = np.interp(k, ks, fs)
    slope = (fs[-1] - fs[-2]) / (ks[-1] - ks[-2])
    out[k > ks[-1]] = fs[-1] + slope * (k[k > ks[-1]] - ks[-1])
    return out * 1e9


def _interp_log(anchors, j, k):
    """Log-linear interpolation of parameter ``j`` across designs."""
    ks = np.array(sorted(anchors))
    vals = np.log([anchors[i][j] if isinstance(anchors[i], tuple) else anchors[i] for i in ks])
    return float(np.exp(np.interp(k, ks, vals)))


def paper_chip(material: str, seed: int, sigma: float = DEFAULT_SIGMA,
               attenuation_dB: float = DEFAULT_ATTENUATION_DB) -> ChipSpec:
    """Twelve-resonator chip built from the published per-design values.

    Designs 1, 4 and 8 take the tabulated frequencies, TLS parameters and
    energy scales; the other designs interpolate between them.
    """
    if material not in MATERIALS:
        raise ParameterDomainError("material", f"must be one of {sorted(MATERIALS)}")
    m = MATERIALS[material]
    mat = MBMaterial(T_c=m["T_c"], alpha_k=m["alpha_k"])
    freqs = _design_frequencies(ANCHOR_FR[material])
    res = []
    for k in range(1, N_DESIGNS + 1):
        tls = TLSParams(*(_interp_log(ANCHOR_TLS[material], j, k) for j in range(4)))
        E = _interp_log(ANCHOR_ESTAR[material], 0, k)
        qc = Q_C_NOMINAL * (1.0 + 0.04 * math.sin(1.7 * k))
        phi = 0.05 * math.cos(0.9 * k)
        p = ResonatorParams.from_qc(float(freqs[k - 1]), 1.0e6, qc, phi)
        res.append(ResonatorSpec(f"LER{k}", p, mat, tls, E, m["tls_shift"]))
    return ChipSpec(tuple(res), seed=seed, material_tag=MATERIAL_NAMES[material], sigma=sigma,
                    attenuation_dB=attenuation_dB, chip_id=sorted(MATERIALS).index(material),
                    extra={"L_k": m["L_k"], "alpha_k_kin": m["alpha_k_kin"], "L_g": L_G})


def simulated_frequencies():
    """Perfect-conductor design frequencies implied by the Nb chip and mean L_k."""
    f_nb = _design_frequencies(ANCHOR_FR["Nb"])
    return f_nb * math.sqrt(1.0 + MATERIALS["Nb"]["L_k"] / L_G)
