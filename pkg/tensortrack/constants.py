"""Constants used by various tensortrack modules"""

APP_NAME = "tensortrack"

# sampling period of the periodic TACC_Stats collection, in seconds
DEFAULT_PERIOD = 600

# 18 ten-minute slices = 3 hours
DEFAULT_WINDOW_LEN = 18

DEFAULT_NODE_RANK = 50
DEFAULT_TIME_RANK = 18
DEFAULT_METRIC_RANK = 30

DEFAULT_CLUSTERS = 5
DEFAULT_THRESHOLD = 3.0

# HOOI / CP-ALS stopping rule
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 50

# EWMA / CUSUM control chart defaults; warmup is one week of 3-hour windows
DEFAULT_EWMA_LAMBDA = 0.3
DEFAULT_EWMA_L = 3.0
DEFAULT_CUSUM_K = 0.5
DEFAULT_CUSUM_H = 5.0
DEFAULT_WARMUP = 56

# CP forecast defaults
DEFAULT_CP_RANK = 10
DEFAULT_RHO = 0.5

# windows with more than this fraction of filled-in cells are marked degraded
DEGRADED_FRACTION = 0.2

# significant digits used when writing statistics to CSV/JSON
SIGNIFICANT_DIGITS = 12

# exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_INPUT_ERROR = 3
EXIT_NUMERICAL_ERROR = 4


class TensorTrackError(Exception):
    """Base class for all tensortrack errors"""

    pass
