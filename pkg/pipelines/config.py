from pathlib import Path
import os
from dotenv import load_dotenv

load_dotenv()

# Paths
PROJECT_ROOT = Path(__file__).resolve().parents[1]

# Use env var for RESULTS_DIR if available, else default to relative path
if os.getenv("RESULTS_DIR"):
    RESULTS_DIR = Path(os.getenv("RESULTS_DIR"))
else:
    RESULTS_DIR = PROJECT_ROOT / "results"

# Sweep settings
REPLICATES = int(os.getenv("MESHFL_REPLICATES", "5"))
JOBS = int(os.getenv("MESHFL_JOBS", "1"))
PRESETS = [p for p in os.getenv("MESHFL_PRESETS", "").split(",") if p]

REPORT_PATH = RESULTS_DIR / "report.csv"
