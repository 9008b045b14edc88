#############################################
# NUMERIC DEFAULTS                          #
#############################################

PRESET_NAMES = ("lqg1d", "lqg2d", "bounded-drift-1d", "doublewell-1d")

DEFAULT_BOX = 4.0
DEFAULT_H = 0.1
DEFAULT_U_MAX = 4.0
DEFAULT_CONTROLS_1D = 41
DEFAULT_CONTROLS_2D = 11

# explicit Euler runs at dt * max|diagonal| <= STABILITY_FACTOR
STABILITY_FACTOR = 0.9
BLOWUP_LEVEL = 1e12

HJB_TOL = 1e-8
MAX_ITER = 100
RHO_CROSSCHECK_TOL = 1e-6
# node count above which Poisson solves go iterative
DIRECT_SOLVE_LIMIT = 40000
ITERATIVE_MAX_ITER = 20000

SNAPSHOT_EVERY = 0.5
PROBE_RADIUS = 1.0
T_EVOLVE = 30.0

MC_PATHS = 10000
MC_T = 200.0
MC_BURN_IN = 20.0
MC_DT = 0.01
MC_HORIZON = 10.0
MC_BLOCK = 512
MC_CLIP_FLAG = 0.01
# policy snapshots may be at most this many simulation steps apart
MC_MAX_SNAPSHOT_GAP = 10
# normals are drawn per path in chunks of this many steps
MC_CHUNK = 256
# Euler-Maruyama plus upwind bias allowed on top of 3 standard errors
MC_SLACK = 0.02

CSV_FLOAT_FORMAT = "%.17g"
