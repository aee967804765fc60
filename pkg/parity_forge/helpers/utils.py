import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np


# formatting
def format_number(value: int) -> str:
    return f"{value:,}"


def format_pvalue(p: float) -> str:
    """Scientific notation with two decimals, e.g. ``8.84E-08``."""
    if p is None or np.isnan(p):
        return "NA"
    return f"{p:.2E}"


# files
def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(payload), indent=2, sort_keys=True), encoding="utf-8")
    return path


def to_jsonable(value: Any) -> Any:
    """Recursively turn numpy/pandas scalars and arrays into plain JSON values."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    if hasattr(value, "model_dump"):
        return to_jsonable(value.model_dump(mode="json"))
    return value
