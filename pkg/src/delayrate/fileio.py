"""Readers and writers for the command-line file formats.

Formats
-------
paths CSV
    ``path,t,r`` in long format, one row per path and recorded time.
model JSON
    ``{"a", "b", "c", "tau", "sigma"}`` as produced by
    :meth:`ModelParams.to_dict`, optionally under a ``"params"`` key.
yield CSV
    ``maturity_years,yield`` with continuously compounded decimal yields.
caplet CSV
    ``expiry_years,strike[,price]``; priced output adds
    ``model_price,abs_err,sq_rel_err``.
series CSV
    ``date,rate`` with ISO dates and decimal rates. Observations are taken
    as consecutive business days, each ``1/252`` of a year apart (ACT/252).
report JSON
    Sorted keys, two-space indent, and a ``convention`` block.

Floats are written with ``repr`` so every emitted CSV reads back exactly.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .shortrate import ModelParams

__all__ = [
    "DataError",
    "DAY_COUNT",
    "TRADING_DAYS",
    "CONVENTION",
    "read_table",
    "write_table",
    "read_model",
    "write_model",
    "read_yields",
    "write_yields",
    "read_caplets",
    "read_series",
    "write_series",
    "business_dates",
    "read_paths",
    "write_paths",
    "write_json",
    "read_json",
]

DAY_COUNT = "ACT/252"
TRADING_DAYS = 252

CONVENTION = {
    "day_count": DAY_COUNT,
    "time_unit": "years",
    "rates": "decimal, continuously compounded",
    "caplet_expiry": "accrual end T, accrual start T - delta",
    "caplet_notional": 100.0,
}


class DataError(ValueError):
    """Malformed or missing input file."""


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def read_table(path, required: Sequence[str] = ()) -> dict[str, list[str]]:
    """Columns of a CSV file as lists of strings."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path} is empty")
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path} lacks columns {missing}")
        cols: dict[str, list[str]] = {h: [] for h in header}
        for row in reader:
            for raw, h in zip(reader.fieldnames, header):
                cols[h].append((row.get(raw) or "").strip())
    return cols


def _floats(path, cols: Mapping[str, list[str]], name: str) -> np.ndarray:
    try:
        out = np.array([float(v) for v in cols[name]], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: column {name!r} is not numeric ({exc})") from None
    if not np.all(np.isfinite(out)):
        raise DataError(f"{path}: column {name!r} has non-finite values")
    return out


def write_table(path, columns: Mapping[str, Iterable]) -> Path:
    """Write equal-length columns to CSV in the given key order."""
    path = Path(path)
    names = list(columns)
    data = [list(columns[n]) for n in names]
    if len({len(d) for d in data}) > 1:
        raise ValueError("columns differ in length")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*data):
            w.writerow([_fmt(v) for v in row])
    return path


def _clean(obj):
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, payload: Mapping, convention: bool = True) -> Path:
    """Deterministic JSON report; non-finite floats become ``null``."""
    path = Path(path)
    body = dict(payload)
    if convention:
        body.setdefault("convention", dict(CONVENTION))
    body.setdefault("format_version", 1)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(body), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def read_model(path) -> ModelParams:
    data = read_json(path)
    if "params" in data and isinstance(data["params"], Mapping):
        data = data["params"]
    try:
        return ModelParams.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: {exc}") from None


def write_model(path, model: ModelParams) -> Path:
    return write_json(path, model.to_dict(), convention=False)


def read_yields(path) -> tuple[np.ndarray, np.ndarray]:
    cols = read_table(path, ["maturity_years", "yield"])
    m = _floats(path, cols, "maturity_years")
    y = _floats(path, cols, "yield")
    if m.size < 2 or np.any(np.diff(m) <= 0) or m[0] <= 0:
        raise DataError(f"{path}: maturities must be positive and increasing, at least two rows")
    return m, y


def write_yields(path, maturities, yields) -> Path:
    return write_table(path, {"maturity_years": maturities, "yield": yields})


def read_caplets(path, delta: float = 0.25):
    """Caplet quotes with ``S = expiry - delta``; missing prices are ``nan``."""
    from .rfr_caplets import CapletQuote

    cols = read_table(path, ["expiry_years", "strike"])
    T = _floats(path, cols, "expiry_years")
    K = _floats(path, cols, "strike")
    if "price" in cols:
        try:
            P = np.array([float(v) if v else math.nan for v in cols["price"]])
        except ValueError as exc:
            raise DataError(f"{path}: column 'price' is not numeric ({exc})") from None
    else:
        P = np.full(T.size, math.nan)
    if np.any(T <= delta):
        raise DataError(f"{path}: every expiry must exceed the accrual length {delta}")
    return [CapletQuote(S=float(t) - delta, T=float(t), K=float(k), price=float(p), Delta=delta)
            for t, k, p in zip(T, K, P)]


def read_series(path, dt: float | None = None) -> tuple[np.ndarray, float, list[str]]:
    """Rates, step and dates of a ``date,rate`` file.

    The step defaults to ``1/252``; dates must be strictly increasing.
    """
    cols = read_table(path, ["date", "rate"])
    dates = cols["date"]
    try:
        parsed = [_dt.date.fromisoformat(d) for d in dates]
    except ValueError as exc:
        raise DataError(f"{path}: bad date ({exc})") from None
    if any(b <= a for a, b in zip(parsed, parsed[1:])):
        raise DataError(f"{path}: dates must be strictly increasing")
    rates = _floats(path, cols, "rate")
    return rates, (1.0 / TRADING_DAYS if dt is None else float(dt)), dates


def write_series(path, dates: Sequence[str], rates) -> Path:
    return write_table(path, {"date": list(dates), "rate": rates})


def business_dates(n: int, start: str = "2000-01-03") -> list[str]:
    """``n`` consecutive weekdays from ``start`` as ISO strings."""
    days = np.busday_offset(np.datetime64(start), np.arange(n), roll="forward")
    return [str(d) for d in days]


def read_paths(path) -> tuple[np.ndarray, np.ndarray]:
    """Times and an ``(n_paths, n_times)`` rate array."""
    cols = read_table(path, ["path", "t", "r"])
    idx = np.array([int(v) for v in cols["path"]])
    t = _floats(path, cols, "t")
    r = _floats(path, cols, "r")
    n = int(idx.max()) + 1 if idx.size else 0
    times = t[idx == 0]
    return times, r.reshape(n, times.size)


def write_paths(path, times, rates) -> Path:
    rates = np.atleast_2d(rates)
    n, m = rates.shape
    return write_table(path, {
        "path": np.repeat(np.arange(n), m),
        "t": np.tile(np.asarray(times, dtype=float), n),
        "r": rates.ravel(),
    })
