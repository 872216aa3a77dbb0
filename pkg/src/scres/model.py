"""Parameter types and the forward notch-port transmission model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .constants import H_PLANCK
from .errors import ParameterDomainError, TraceError


@dataclass(frozen=True)
class ResonatorParams:
    """Description of a single notch-coupled resonance.

    ``Q_e_mag`` and ``phi`` are the modulus and argument of the complex
    external quality factor; the coupling quality factor follows from
    ``1/Q_c = Re(1/Q_e)``. ``amp`` and ``amp_phase`` form the complex
    off-resonance scale and ``tau`` the cable delay.
    """

    f_r: float
    Q_i: float
    Q_e_mag: float
    phi: float = 0.0
    amp: float = 1.0
    tau: float = 0.0
    amp_phase: float = 0.0

    def __post_init__(self):
        _check(self.f_r > 0 and math.isfinite(self.f_r), "f_r", "must be positive and finite", self.f_r)
        for name in ("Q_i", "Q_e_mag"):
            v = getattr(self, name)
            _check(math.isfinite(v) and v > 1.0, name, "must be finite and > 1", v)
        _check(abs(self.phi) < math.pi / 2, "phi", "must lie in (-pi/2, pi/2)", self.phi)
        _check(math.isfinite(self.amp) and self.amp > 0, "amp", "must be positive", self.amp)
        _check(math.isfinite(self.tau), "tau", "must be finite", self.tau)
        _check(math.isfinite(self.amp_phase), "amp_phase", "must be finite", self.amp_phase)
        _check(math.isfinite(self.Q_c) and self.Q_c > 1.0, "phi", "gives a non-finite Q_c", self.phi)

    @classmethod
    def from_qc(cls, f_r, Q_i, Q_c, phi=0.0, **kw) -> "ResonatorParams":
        """Build from the coupling quality factor instead of ``|Q_e|``."""
        return cls(f_r=f_r, Q_i=Q_i, Q_e_mag=Q_c * math.cos(phi), phi=phi, **kw)

    @property
    def Q_c(self) -> float:
        return self.Q_e_mag / math.cos(self.phi)

    @property
    def Q_l(self) -> float:
        return 1.0 / (1.0 / self.Q_i + 1.0 / self.Q_c)

    @property
    def complex_amp(self) -> complex:
        return self.amp * complex(math.cos(self.amp_phase), math.sin(self.amp_phase))

    def replace(self, **changes) -> "ResonatorParams":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {
            "f_r": self.f_r,
            "Q_i": self.Q_i,
            "Q_e_mag": self.Q_e_mag,
            "phi": self.phi,
            "amp": self.amp,
            "tau": self.tau,
            "amp_phase": self.amp_phase,
            "Q_c": self.Q_c,
            "Q_l": self.Q_l,
        }


def _check(ok, name, message, value):
    if not ok:
        raise ParameterDomainError(name, f"{message} (got {value!r})")


@dataclass(frozen=True, eq=False)
class ComplexTrace:
    """Frequency-ordered complex S21 samples plus measurement metadata."""

    freqs: np.ndarray
    s21: np.ndarray
    temperature_K: Optional[float] = None
    power_dBm: Optional[float] = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = np.asarray(self.freqs, dtype=float)
        z = np.asarray(self.s21, dtype=complex)
        if f.ndim != 1 or z.shape != f.shape:
            raise TraceError(f"freqs and s21 must be 1-D of equal length (got {f.shape} and {z.shape})")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(z))):
            raise TraceError("trace contains non-finite values")
        if f.size > 1 and np.any(np.diff(f) <= 0):
            raise TraceError("freqs must be strictly increasing")
        if self.temperature_K is not None and not self.temperature_K > 0:
            raise TraceError(f"temperature_K must be positive (got {self.temperature_K})")
        object.__setattr__(self, "freqs", f)
        object.__setattr__(self, "s21", z)

    def __len__(self):
        return self.freqs.size

    def with_s21(self, s21) -> "ComplexTrace":
        return replace(self, s21=np.asarray(s21, dtype=complex))

    def require_fittable(self, min_points=8):
        if len(self) < min_points:
            raise TraceError(f"trace {self.label!r} has {len(self)} points; at least {min_points} required")


def s21_notch(f, p: ResonatorParams):
    """Notch-port transmission with complex scale and cable delay.

    With ``tau = 0`` and ``amp_phase = 0`` this is exactly
    ``a * [1 - (Q_l/|Q_e|) e^{i phi} / (1 + 2i Q_l (f - f_r)/f_r)]``.
    """
    f = np.asarray(f, dtype=float)
    Ql = p.Q_l
    res = 1.0 - (Ql / p.Q_e_mag) * np.exp(1j * p.phi) / (1.0 + 2j * Ql * (f - p.f_r) / p.f_r)
    env = p.complex_amp
    if p.tau != 0.0:
        env = env * np.exp(-2j * np.pi * f * p.tau)
    return env * res


def loaded_q(p: ResonatorParams) -> float:
    return p.Q_l


def photon_number(p: ResonatorParams, power_W):
    """Mean intracavity photon number at on-chip drive power ``power_W``."""
    power_W = np.asarray(power_W, dtype=float)
    if np.any(power_W < 0):
        raise ParameterDomainError("power_W", "must be non-negative")
    n = p.Q_l**2 / (math.pi * p.Q_c) * power_W / (H_PLANCK * p.f_r**2)
    return float(n) if n.ndim == 0 else n


def dbm_to_watts(p_dBm):
    return 10.0 ** ((np.asarray(p_dBm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(p_W):
    return 10.0 * np.log10(np.asarray(p_W, dtype=float)) + 30.0
