from pathlib import Path
import time
import uuid

from .config import settings
from .utils import safe_filename

RUNS = Path(settings.runs_dir)


def new_run_id(label: str = "run") -> str:
    return f"{time.strftime('%Y%m%d-%H%M%S')}-{safe_filename(label)}-{uuid.uuid4().hex[:6]}"


def run_dir(output_dir: str | Path | None = None, label: str = "run") -> Path:
    """Directory for one run's artifacts; created on demand under RUNS_DIR unless given."""
    d = Path(output_dir) if output_dir else RUNS / new_run_id(label)
    d.mkdir(parents=True, exist_ok=True)
    (d / "audit").mkdir(exist_ok=True)
    return d


def case_dir(root: Path, case_id: int) -> Path:
    d = Path(root) / "cases" / f"{case_id:04d}"
    d.mkdir(parents=True, exist_ok=True)
    return d
