"""Loaders for the bundled reference data."""

from __future__ import annotations

import csv
import json
from functools import lru_cache
from importlib import resources

import numpy as np

__all__ = [
    "data_path",
    "load_yield_curve",
    "load_smoothed_curve",
    "load_caplet_quotes",
    "load_bond_reference",
    "load_phi_reference",
    "reference_tables",
    "bond_calibration_params",
]


def data_path(name: str):
    """Path of a bundled data file."""
    return resources.files("delayrate") / "data" / name


def _read_csv(name: str) -> dict[str, np.ndarray]:
    with data_path(name).open() as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def load_yield_curve():
    """The 20-point US spot curve as a :class:`~delayrate.marketfit.YieldCurve`."""
    from .marketfit import YieldCurve

    data = _read_csv("us_yields_2024-04-19.csv")
    return YieldCurve(data["maturity_years"], data["yield"])


def load_smoothed_curve():
    """Svensson curve behind the bundled reference bond and initial-curve series.

    Its parameters were recovered from the reference market bond prices;
    it is not a least-squares fit to the bundled yields.
    """
    from .marketfit import SvenssonCurve

    p = reference_tables()["smoothed_market_curve"]
    mats = load_bond_reference()["maturity_years"]
    return SvenssonCurve(p["beta0"], p["beta1"], p["beta2"], p["beta3"], p["lam1"], p["lam2"], maturities=mats)


def load_caplet_quotes(which: str = "short", delta: float = 0.25):
    """Caplet quotes as a list of :class:`~delayrate.rfr_caplets.CapletQuote`.

    ``which`` is ``"short"``, ``"long"`` or ``"entire"``.
    """
    from .rfr_caplets import CapletQuote

    names = {"short": ["caplets_short.csv"], "long": ["caplets_long.csv"],
             "entire": ["caplets_short.csv", "caplets_long.csv"]}[which]
    quotes = []
    for name in names:
        d = _read_csv(name)
        for T, K, p in zip(d["expiry_years"], d["strike"], d["price"]):
            quotes.append(CapletQuote(S=float(T) - delta, T=float(T), K=float(K), price=float(p), Delta=delta))
    return quotes


def load_bond_reference() -> dict[str, np.ndarray]:
    return _read_csv("bond_fit_reference.csv")


def load_phi_reference(tau1: float) -> tuple[np.ndarray, np.ndarray]:
    d = _read_csv("implied_phi_reference.csv")
    mask = np.isclose(d["tau1"], tau1)
    return d["s"][mask], d["phi"][mask]


@lru_cache(maxsize=1)
def reference_tables() -> dict:
    with data_path("reference_tables.json").open() as fh:
        return json.load(fh)


def bond_calibration_params(tau1: float):
    """Published bond-calibration parameters for one delay as ``ModelParams``."""
    from .shortrate import ModelParams

    t = reference_tables()["bond_calibration"]
    i = [float(x) for x in t["tau1"]].index(float(tau1))
    return ModelParams.from_values(t["a"][i], t["b"][i], [t["c1"][i]], [float(tau1)], t["sigma"][i])
