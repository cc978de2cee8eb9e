"""Make sibling test helpers (e.g. the pipeline replay oracle) importable."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
