"""
Centralized configuration for epicurve.

All magic numbers, tolerances and tunables in one place.
Environment variables override defaults where applicable.
"""

import os

TOOL_VERSION = "0.3.0"

# =============================================================================
# LOGGING
# =============================================================================
LOG_LEVEL = os.getenv("EPICURVE_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

# =============================================================================
# GRID
# =============================================================================
U_MIN = float(os.getenv("EPICURVE_U_MIN", "-6.0"))
U_MAX = float(os.getenv("EPICURVE_U_MAX", "8.0"))
U_STEP = float(os.getenv("EPICURVE_U_STEP", "0.02"))

# Alignment window for simulated curves (narrower than the solver grid)
ALIGN_U_MIN = -3.0
ALIGN_U_MAX = 5.0

# =============================================================================
# NUMERICS
# =============================================================================
ROOT_XTOL = 1e-14
ROOT_BRACKET_MAX = 60       # doublings before giving up on a bracket

POWER_ITER_TOL = 1e-14
POWER_ITER_MAX = 100_000

QUAD_EPSABS = 1e-14
QUAD_EPSREL = 1e-12
QUAD_LIMIT = 400

GAUSS_NODES = 8             # Gauss-Legendre nodes per grid segment
TAIL_EPS = 1e-14            # kernel mass allowed beyond the truncation point
BOUNDARY_EXTENSION = 34.0   # u-length of seeded grid left of u_min

PICARD_TOL = 1e-12
PICARD_MAX_ITER = 500
PICARD_DAMPING = 0.5        # applied once oscillation is detected
PICARD_REPORT_TOL = 1e-9    # residual above this is a convergence failure

ODE_RTOL = 1e-11
ODE_ATOL = 1e-13

GW_THETA0 = 1e-4            # series region of the Galton-Watson transform

TAIL_TABLE_POINTS = 4000    # interpolation table for kernels without closed-form tails

# =============================================================================
# SIMULATION
# =============================================================================
POPULATION_CAP = int(os.getenv("EPICURVE_POPULATION_CAP", "10000000"))
HISTORY_BLOCK = 1024        # histories pre-sampled per type and refill
LABEL_BLOCK = 4096          # uniform labels pre-sampled per refill
SWEEP_CHUNK = 256           # limit samples advanced together in a generation sweep
W_HORIZON_GROWTH = 1e3      # horizon T chosen so that exp(lambda*T) >= this

# =============================================================================
# HARNESS
# =============================================================================
WORKERS = int(os.getenv("EPICURVE_WORKERS", "1"))
MIN_REPLICATES = 50
MAJOR_ATTEMPT_FACTOR = 20   # attempts allowed per requested major outbreak
STATIONARY_MIN_BIRTHS = 10_000
RESAMPLE_MAX_ATTEMPTS = 25  # tenacity stop for runs that die before the threshold
SHOW_PROGRESS = os.getenv("EPICURVE_PROGRESS", "false").lower() == "true"
RUN_SLOW_TESTS = os.getenv("EPICURVE_SLOW", "0") == "1"

# =============================================================================
# DEFAULT TOLERANCES (run configs override)
# =============================================================================
DEFAULT_TOLERANCES = {
    "convergence": 0.10,      # median sup-distance at the largest N
    "reed_frost": 0.05,       # median |S/N - psi(...)|
    "ks": 0.03,               # stationary-law KS distances
    "birth_fraction": 0.02,   # per-type birth fractions vs zeta
    "final_size": 0.02,       # final susceptible fraction vs fixed point
    "cross_validation": 0.02, # solver vs Monte Carlo curve
    "sigma": 3.0,             # binomial band width for extinction checks
}

# =============================================================================
# OUTPUT
# =============================================================================
OUTPUT_DIR = os.getenv("EPICURVE_OUT", "out")
CSV_FLOAT_FORMAT = "%.12g"
SUMMARY_WIDTH = 100         # fixed console width keeps summaries byte-identical
W_SAMPLES = 10_000          # backward limit samples for Monte Carlo curves
