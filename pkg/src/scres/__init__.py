"""Analysis of superconducting coplanar-waveguide resonators.

Notch-type resonance fitting, Mattis-Bardeen temperature sweeps, TLS power
dependence, kinetic-inductance nonlinearity, paired material comparison and
a synthetic-data generator.
"""

__version__ = "0.1.0"

from .errors import (FitDegeneracyError, GeometryError, PairBreakingError, ParameterDomainError,  # noqa: E402
                     ParseError, ScresError, SimulationError, TraceError)
from .model import ComplexTrace, ResonatorParams, photon_number, s21_notch  # noqa: E402
from .resfit import FitResult, fit_resonance  # noqa: E402

__all__ = [
    "__version__", "ComplexTrace", "ResonatorParams", "FitResult", "fit_resonance", "photon_number",
    "s21_notch", "ScresError", "ParameterDomainError", "TraceError", "GeometryError", "FitDegeneracyError",
    "PairBreakingError", "SimulationError", "ParseError",
]
