import logging
import os
from datetime import datetime

# Debugging Toggle
DEBUG_MODE = os.environ.get("REPACT_DEBUG", "0") == "1"

# Log files go here when the CLI enables file logging
LOG_DIR = os.environ.get("REPACT_LOG_DIR", "logs")

# Create a logger instance shared by every module
logger = logging.getLogger("repact")
logger.setLevel(logging.DEBUG if DEBUG_MODE else logging.INFO)

formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

# Handlers attached by enable_*_logging, replaced on repeated calls
_handlers = {}


def _attach(kind, handler):
    old = _handlers.pop(kind, None)
    if old is not None:
        logger.removeHandler(old)
        old.close()
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    _handlers[kind] = handler


def enable_file_logging(log_dir=LOG_DIR):
    """Attach a timestamped file handler to the package logger and return the log path."""
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    timestamp = datetime.now().strftime("%Y-%m-%d_%H-%M")
    log_file = os.path.join(log_dir, f"repact_{timestamp}.log")

    _attach("file", logging.FileHandler(log_file))
    return log_file


def enable_console_logging():
    """Echo log records to stderr (used by the command line)."""
    _attach("console", logging.StreamHandler())


def _thread_count(value):
    try:
        requested = int(value)
    except ValueError:
        logger.warning(f"REPACT_THREADS={value!r} is not an integer, using the machine default")
        requested = 0
    return requested if requested > 0 else (os.cpu_count() or 1)


# Parallelism cap for prefetch and chunked evaluation
THREADS = _thread_count(os.environ.get("REPACT_THREADS", "0"))

# --- Piecewise polynomial settings ---
BREAKPOINT_MERGE_TOL = 1e-9    # breakpoints closer than this are one breakpoint
MAX_DEGREE = 2
POLY_FORMAT_VERSION = 1

# --- RepAct layer defaults ---
PRELU_SLOPE_INIT = 0.25
BN_EPS = 1e-6                  # the constant printed in the BN folding formula
BN_MOMENTUM = 0.1
HARDSWISH_KNEE = 3.0

# --- Network batch norm (conv blocks) ---
CONV_BN_EPS = 1e-5
CONV_BN_MOMENTUM = 0.1

# --- Training defaults ---
SGD_MOMENTUM = 0.9
WEIGHT_DECAY = 5e-4
CIFAR_LABEL_SMOOTHING = 0.1
CHECKPOINT_FORMAT_VERSION = 1

# --- verify / bench / gradcheck defaults ---
VERIFY_SAMPLES = 10_000
VERIFY_TOL = 1e-4
VERIFY_RANGE = (-10.0, 10.0)
GRADCHECK_STEP = 1e-3
GRADCHECK_TOL = 1e-4
GRADCHECK_SCALE_FLOOR = 1e-5   # relative error denominator never drops below this
GRADCHECK_FALLBACK_DIVISORS = (1, 10, 100)   # h, then h/10 and h/100 for samples that cross a breakpoint
GRADCHECK_DRAW_FACTOR = 4      # elements tried per wanted sample
BENCH_ELEMENTS = 1_000_000
BENCH_REPEATS = 5
