"""Physical constants (exact SI values) shared across the package."""

H_PLANCK = 6.62607015e-34  # J s
K_B = 1.380649e-23  # J / K
HBAR = H_PLANCK / (2.0 * 3.141592653589793)

# BCS weak-coupling ratio Delta(0) / (k_B T_c) = pi / exp(Euler gamma)
BCS_GAP_RATIO = 1.7638769006
DEFAULT_GAP_RATIO = 1.764

# bifurcation onset of the reduced-detuning cubic
A_CRIT = 4.0 * 3.0**0.5 / 9.0
