import json, time
from pathlib import Path

from .utils import safe_filename


def _default(o):
    # numpy scalars and arrays
    if hasattr(o, "tolist"):
        return o.tolist()
    return str(o)


def write_audit(run_dir, name: str, payload: dict) -> Path:
    ts = time.strftime("%Y%m%d-%H%M%S")
    d = Path(run_dir) / "audit"
    d.mkdir(parents=True, exist_ok=True)
    p = d / f"{ts}-{safe_filename(name)}.json"
    p.write_text(json.dumps(payload, ensure_ascii=False, indent=2, default=_default), encoding="utf-8")
    return p
