from pathlib import Path
import logging
import os
from dotenv import load_dotenv

load_dotenv()

# Paths
PACKAGE_DIR = Path(__file__).resolve().parent
PROJECT_ROOT = Path(__file__).resolve().parents[2]

# Use env var for OUTPUT_DIR if available, else default to relative path
if os.getenv("MESHFL_OUTPUT_DIR"):
    OUTPUT_DIR = Path(os.getenv("MESHFL_OUTPUT_DIR"))
else:
    # Fallback for local dev: project_root/../../results
    OUTPUT_DIR = PROJECT_ROOT.parents[1] / "results"

PRESETS_DIR = PACKAGE_DIR / "presets"
TOPOLOGIES_DIR = PRESETS_DIR / "topologies"

# Logging
LOG_LEVEL = (os.getenv("MESHFL_LOG_LEVEL") or "INFO").strip().upper()
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Network
DEFAULT_MTU_BYTES = 1500
DEFAULT_TTL_FACTOR = 4
DEFAULT_RETRANSMIT_TIMEOUT_MS = 200.0
DEFAULT_MAX_SIM_TIME_MS = 48 * 3600 * 1000.0

# Routing
DEFAULT_REPORT_PERIOD_MS = 5000.0
EXHAUSTIVE_CEILING = 12
DEFAULT_K_SHORTEST = 16

# Federated learning
WEIGHT_BYTES = 8
MODEL_HEADER_BYTES = 64
ACK_BYTES = 64
MODEL_REPO_VERSIONS = 4

# Data
MAX_PARTITION_RETRIES = 20

# Metrics
LOSS_STEP_ROUNDS = (50, 170)


def configure_logging(level: str | None = None) -> None:
    """Installs the process-wide log format once; later calls only adjust the level."""
    root = logging.getLogger()
    resolved = (level or LOG_LEVEL).upper()
    if not root.handlers:
        logging.basicConfig(level=resolved, format=LOG_FORMAT)
    root.setLevel(resolved)
