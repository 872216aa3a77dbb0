import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scres.model import ComplexTrace, ResonatorParams, s21_notch

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# single-resonance reference point used throughout: f_r, Q_i, Q_c
FIG_FR, FIG_QI, FIG_QC = 1.7537e9, 1.18e6, 7.90e4


@pytest.fixture
def ref_params():
    return ResonatorParams.from_qc(FIG_FR, FIG_QI, FIG_QC, phi=0.03)


def noisy_trace(p, sigma=1e-3, n=801, span_lw=12.0, seed=0, **meta):
    lw = p.f_r / p.Q_l
    f = np.linspace(p.f_r - span_lw * lw, p.f_r + span_lw * lw, n)
    rng = np.random.default_rng(seed)
    z = s21_notch(f, p) + sigma * p.amp * (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)
    return ComplexTrace(f, z, **meta)


# acceptance verdicts, echoed in the terminal summary so they show even when output is captured
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
