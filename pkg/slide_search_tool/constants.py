import importlib.metadata
import math
from typing import Final

PACKAGE_NAME: Final = "slide_search_tool"

try:
    VERSION_STRING: Final = importlib.metadata.version(PACKAGE_NAME)
except importlib.metadata.PackageNotFoundError:
    VERSION_STRING = "0.0.0"  # type: ignore

CONFIG_FILE = ".slide_search_settings.yml"
ENVVAR_PREFIX = "SLIDE_SEARCH"

# on-disk formats, little-endian throughout
PEMB_MAGIC: Final = b"PEMB"
PEMB_VERSION: Final = 1
PSIX_MAGIC: Final = b"PSIX"
PSIX_VERSION: Final = 1
NO_LABEL: Final = 0xFFFF
VALID_FLOAT_WIDTHS = (4, 8)

MANIFEST_FILE = "manifest.csv"
SLIDES_DIR = "slides"

DEFAULT_DIM = 768
DEFAULT_MOSAICS = 16
DEFAULT_HIDDEN_DIM = 256
DEFAULT_FLOAT_WIDTH = 8
DEFAULT_TEMPERATURE_LOGIT = math.log(1 / 0.07)

DEFAULT_BETA = 1.0
DEFAULT_EPSILON = 1e-8
DEFAULT_TOP_K = 5

SYNTH_SIGMA = 0.3
VALIDATION_FRACTION = 0.1

# below this many discordant pairs McNemar uses the exact binomial test
MCNEMAR_EXACT_LIMIT = 25

BASELINE_FRACTIONS = (0.05, 0.10, 0.15)
PLOT_PATCH_COUNTS = (1000, 5000, 20000)
STORAGE_MOSAIC_COUNTS = (16, 32, 48)


class ExitCodes:
    SUCCESS = 0
    USAGE = 1
    DATA = 2
    NUMERIC = 3


class OutputFormats:
    TABLE = "table"
    CSV = "csv"
    JSON_LINES = "json-lines"

    ALL = (TABLE, CSV, JSON_LINES)


class RetrievalModes:
    FUSED = "fused"
    MOSAIC = "mosaic"
    SEMANTIC = "semantic"

    ALL = (FUSED, MOSAIC, SEMANTIC)


class QueryTargets:
    IMAGE = "image"
    TEXT = "text"


class BenchMethods:
    FIXED_MOSAIC = "fixed-mosaic"
    FRACTIONAL_SAMPLING = "fractional-sampling"


KAPPA_BANDS = (
    (0.20, "slight"),
    (0.40, "fair"),
    (0.60, "moderate"),
    (0.80, "substantial"),
    (1.00, "almost perfect"),
)
