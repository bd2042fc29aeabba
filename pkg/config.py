LOG_FILE = "pglmm.log"
DEFAULT_THREADS = 1
DEFAULT_SEED = 1618
DEFAULT_OUT_DIR = "pglmm_out"

# E-step sampling
NMC_BURNIN = 250
NMC_START_SMALL_Q = 250
NMC_START_LARGE_Q = 100
NMC_MAX_SMALL_Q = 2500
NMC_MAX_LARGE_Q = 1000
NMC_REPORT = 5000
LARGE_Q = 10

SCHEDULE_SWITCH_ITER = 15
SCHEDULE_FACTOR_EARLY = 1.1
SCHEDULE_FACTOR_LATE = 1.2

ADAPT_BATCH = 50
ADAPT_TARGET = 0.44
ADAPT_MAX_STEP = 0.01
LOG_SCALE_BOUND = 10.0
RNG_CHUNK = 200

# M-step
CONV_CD = 0.0005
MAXIT_CD = 50
DIVERGENCE_LIMIT = 1e6
NAIVE_MAXIT = 500

GAMMA_MCP = 3.0
GAMMA_SCAD = 4.0

BINOMIAL_WEIGHT_BOUND = 0.25
GAMMA_PROX_MAXIT = 200

# EM loop
CONV_EM = 0.0015
T_LAG = 2
MCC = 2
MAXIT_EM_GAUSSIAN = 100
MAXIT_EM_OTHER = 50
VARIANCE_SHIFT_TOL = 0.05
VARIANCE_SHIFT_FLOOR = 0.05

VAR_START_FLOOR = 0.1
VAR_START_MULTIPLIER = 2.0
VAR_START_MAXIT_EM = 15
VAR_START_NMC_MAX = 500

PRESCREEN_MIN_Q = 5
PRESCREEN_VAR_THRESHOLD = 1e-2
PRESCREEN_CONV_FACTOR = 10.0

# Tuning parameters
LAMBDA_MIN_RATIO = 0.01
NLAMBDA = 10
LAMBDA_MIN_PRESC = 0.01
LAMBDA_MIN_PRESC_LARGE_Q = 0.05
LARGE_Q_PRESC = 50
MINPEN_MIN_Q = 5

# Marginal likelihood
CAME_M_STAR = 5000
CAME_THIN = 10
CAME_RIDGE = 1e-6

# Diagnostics
HIST_BINS = 30
MAX_LAG = 40
MU_EPS = 1e-10
