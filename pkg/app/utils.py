import hashlib, json, re
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

RANGES = {
    "heat_side": (0.1, 1.0, "length"),
    "heat_bc_top": (0.1, 1.0, "field"),
    "heat_bc_right": (0.0, 1.0, "field"),
    "helmholtz_gamma": (0.0, 1.0, "-"),
}


def check_range(name: str, value: float | None) -> tuple[bool, str | None]:
    if value is None:
        return False, f"{name} missing"
    lo, hi, unit = RANGES.get(name, (None, None, None))
    if lo is None:
        return True, None
    if not (lo <= value <= hi):
        return False, f"{name} out of range ({value} {unit}, expected {lo}-{hi})"
    return True, None


def hash_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_digest(payload: dict) -> str:
    """Stable digest of a JSON-serialisable config (sorted keys)."""
    return hash_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))[:16]


def safe_filename(s: str) -> str:
    return re.sub(r"[^a-zA-Z0-9._-]", "_", s)


def spawn_streams(rng: np.random.Generator, n: int) -> List[np.random.Generator]:
    """n independent generators derived from one draw of `rng`; the i-th depends only on (draw, i)."""
    base = int(rng.integers(0, 2**63 - 1))
    return [np.random.default_rng([base, i]) for i in range(n)]


def stream(seed: int, *index: int) -> np.random.Generator:
    """Generator for a fixed (seed, index...) tuple."""
    return np.random.default_rng([int(seed) & (2**64 - 1), *[int(i) for i in index]])


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """map() that may fan out over threads but always returns results in input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
