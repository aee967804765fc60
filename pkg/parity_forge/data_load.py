import json
import os
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from parity_forge.core import ColumnSpec, Dataset, Scale
from parity_forge.errors import ColumnTypeError, ConfigError, MissingValueError, SchemaError

MISSING_TOKENS = {"", "NA", "NaN", "nan", "null", "NULL", "None"}


def read_json_source(raw: str | os.PathLike) -> dict:
    """Parse JSON from a file path, or from the string itself when it is not a path."""
    text = str(raw)
    if os.path.exists(text):
        with open(text, encoding="utf-8") as f:
            text = f.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e


# -----------------------------
# CSV ingestion
# -----------------------------
def load_csv(path: str | os.PathLike, schema: list[ColumnSpec]) -> Dataset:
    if not Path(path).exists():
        raise SchemaError(f"data file not found: {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[], encoding="utf-8")
    missing_cols = [c.name for c in schema if c.name not in raw.columns]
    if missing_cols:
        raise SchemaError(f"columns missing from {Path(path).name}: {', '.join(missing_cols)}")
    extra = [c for c in raw.columns if c not in {s.name for s in schema}]
    if extra:
        logger.debug(f"ignoring {len(extra)} columns not in schema: {', '.join(extra)}")

    frame = pd.DataFrame(index=pd.RangeIndex(len(raw)))
    levels: dict[str, tuple] = {}
    for spec in schema:
        cells = raw[spec.name].str.strip()
        blank = cells.isin(MISSING_TOKENS).to_numpy()
        if blank.any():
            raise MissingValueError(spec.name, np.flatnonzero(blank).tolist())
        frame[spec.name], col_levels = _convert(spec, cells)
        if col_levels is not None:
            levels[spec.name] = col_levels

    logger.info(f"loaded {len(frame):,} rows x {len(schema)} columns from {Path(path).name}")
    return Dataset(tuple(schema), frame, levels)


def _convert(spec: ColumnSpec, cells: pd.Series):
    if spec.scale == Scale.categorical:
        cats = tuple(sorted(cells.unique()))
        return pd.Categorical(cells, categories=list(cats)), cats

    numeric = pd.to_numeric(cells, errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(numeric))
    if bad.size:
        raise ColumnTypeError(spec.name, int(bad[0]), cells.iloc[bad[0]], "a finite number")

    if spec.scale == Scale.continuous:
        if spec.transform == "log" and (numeric <= 0).any():
            row = int(np.flatnonzero(numeric <= 0)[0])
            raise ColumnTypeError(spec.name, row, cells.iloc[row], "positive (log pre-transform)")
        return spec.forward(numeric), None

    if spec.scale == Scale.count:
        bad = np.flatnonzero((numeric < 0) | (numeric != np.floor(numeric)))
        if bad.size:
            raise ColumnTypeError(spec.name, int(bad[0]), cells.iloc[bad[0]], "a non-negative integer")
        return numeric.astype(np.int64), None

    # binary
    bad = np.flatnonzero((numeric != 0) & (numeric != 1))
    if bad.size:
        raise ColumnTypeError(spec.name, int(bad[0]), cells.iloc[bad[0]], "0 or 1")
    return numeric.astype(np.int64), (0, 1)


# -----------------------------
# Export
# -----------------------------
def to_export_frame(ds: Dataset, names: list[str] | None = None) -> pd.DataFrame:
    names = ds.names if names is None else names
    out = pd.DataFrame(index=ds.frame.index)
    for name in names:
        spec = ds.spec(name)
        vals = ds.frame[name]
        out[name] = spec.inverse(vals.to_numpy()) if spec.transform != "none" else vals
    return out


def write_frame(frame: pd.DataFrame, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    return path


def write_csv(ds: Dataset, path: str | os.PathLike, names: list[str] | None = None) -> Path:
    """Write a dataset on its raw scale (pre-transforms inverted)."""
    return write_frame(to_export_frame(ds, names), path)
