"""Defaults shared by the library and the CLI.

The CLI takes everything from flags; these constants are what the flags
fall back to.
"""

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s — %(message)s"

DEFAULT_SEED = 0
DEFAULT_RESOLUTION = 224
CIFAR_RESOLUTION = 32

# Gradient verification contract
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-5
GRADCHECK_PROBES = 3
GRADCHECK_MAX_KINK_RETRIES = 8
GRADCHECK_BATCH = 4
GRADCHECK_SPATIAL = 6

# Batch normalisation
BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5

# SK defaults, SK[2, 32, 16] with L = 32
SK_GROUPS = 32
SK_REDUCTION = 16
SK_MIN_DIM = 32
SE_REDUCTION = 16

# Attention analysis
ANALYSIS_SCALES = (1.0, 1.5, 2.0)
ANALYSIS_IMAGES = 64
ANALYSIS_WINDOW = 16

# CIFAR distribution
CIFAR_URLS = {
    10: "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
    100: "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
}
HTTP_TIMEOUT = 60.0
USER_AGENT = "sknet/0.1 (dataset fetch)"
CHANNEL_STATS_FILE = "channel_stats.json"
SCALE_TABLE_FILE = "scales.csv"

# Checkpoints
CHECKPOINT_MAGIC = b"SKNETCKP"
CHECKPOINT_VERSION = 1
