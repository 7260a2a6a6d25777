"""Batch command-line front end.

Every subcommand reads its inputs, writes CSV/JSON results into
``--out-dir`` and prints the written paths. Parameters come from the
command line first, then from the matching block of a ``--config`` JSON
file (``{"format_version": 1, "<command>": {...}}``), then from defaults.

Exit codes: 0 success, 1 usage, 2 data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fileio
from .exceptions import DelayRateError
from .fileio import DataError

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

_PATH_KEYS = ("model", "yields", "caplets", "series", "init")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


class _Options:
    """Command-line values backed by a config block."""

    def __init__(self, ns: argparse.Namespace, block: dict):
        self._ns = ns
        self._block = block

    def get(self, name: str, default=None):
        value = getattr(self._ns, name, None)
        if value is None:
            value = self._block.get(name, self._block.get(name.replace("_", "-")))
        if value is None:
            return default
        if name in _PATH_KEYS and not Path(value).is_file():
            raise DataError(f"file not found: {value}")
        return value


def _load_config(path) -> dict:
    if path is None:
        return {}
    cfg = fileio.read_json(path)
    if cfg.get("format_version", 1) != 1:
        raise DataError(f"{path}: unsupported format_version {cfg.get('format_version')}")
    return cfg


# ---------------------------------------------------------------------------
# shared inputs


def _model(opts: _Options, required: bool = True):
    path = opts.get("model")
    if path is None:
        if required:
            raise UsageError("a model JSON file is required (--model)")
        return None
    return fileio.read_model(path)


def _curve(opts: _Options):
    """Yield curve from ``--yields`` or a bundled one named by ``--curve``."""
    from .datasets import load_smoothed_curve, load_yield_curve
    from .marketfit import YieldCurve

    path = opts.get("yields")
    if path is not None:
        return YieldCurve(*fileio.read_yields(path))
    kind = opts.get("curve", "bundled")
    if kind == "bundled":
        return load_yield_curve()
    if kind == "smoothed":
        return load_smoothed_curve()
    raise UsageError(f"unknown curve {kind!r}; use 'bundled', 'smoothed' or --yields")


def _maturities(opts: _Options, curve=None) -> np.ndarray:
    mats = opts.get("maturities")
    if mats is None:
        if curve is None:
            raise UsageError("--maturities is required")
        mats = curve.maturities
    mats = np.asarray(mats, dtype=float)
    if mats.size == 0:
        raise UsageError("the maturity grid is empty")
    if np.any(mats <= 0):
        raise UsageError("maturities must be positive")
    return mats


def _caplet_quotes(opts: _Options, delta: float):
    from .datasets import load_caplet_quotes

    path = opts.get("caplets")
    if path is not None:
        return fileio.read_caplets(path, delta)
    expiries, strikes = opts.get("expiries"), opts.get("strikes")
    if expiries is not None and strikes is not None:
        from .rfr_caplets import CapletQuote

        if not expiries or not strikes:
            raise UsageError("the caplet grid is empty")
        return [CapletQuote(S=T - delta, T=T, K=K, Delta=delta) for T in expiries for K in strikes]
    return load_caplet_quotes(opts.get("set", "short"), delta)


def _nelson_siegel(opts: _Options):
    from .marketfit import NelsonSiegelForward

    params = opts.get("ns_curve")
    if params is not None:
        if len(params) != 4:
            raise UsageError("--ns-curve takes beta0,beta1,beta2,lam")
        return NelsonSiegelForward(*params)
    return NelsonSiegelForward.fit(_curve(opts))


def _caplet_table(quotes, model_prices) -> dict:
    T = [q.T for q in quotes]
    K = [q.K for q in quotes]
    P = np.array([q.price for q in quotes], dtype=float)
    cols = {"expiry_years": T, "strike": K}
    if np.all(np.isfinite(P)):
        err = P - model_prices
        cols.update(price=P, model_price=model_prices, abs_err=np.abs(err), sq_rel_err=err * err / P)
    else:
        cols["model_price"] = model_prices
    return cols


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(opts: _Options, out: Path, seed: int) -> list[Path]:
    from .shortrate import InitialCurve, conditional_law, simulate_paths

    model = _model(opts)
    dt = float(opts.get("dt", 1.0 / 252))
    horizon = float(opts.get("horizon", 1.0))
    n_paths = int(opts.get("n_paths", 10))
    if n_paths < 1 or horizon <= 0 or dt <= 0:
        raise UsageError("n_paths, horizon and dt must be positive")
    r0 = float(opts.get("r0", 0.05))
    steps = int(round(model.coeffs.tau_max / dt))
    phi = InitialCurve.flat(float(opts.get("phi", r0)), model.coeffs.tau_max, points_per_tau=max(steps, 1), r0=r0)
    sim = simulate_paths(model, phi, r0, horizon, dt, n_paths, seed, scheme=opts.get("scheme", "exact"),
                         record_every=int(opts.get("record_every", 1)))
    law = conditional_law(model, phi, 0.0, float(sim.times[-1]))
    terminal = sim.rates[:, -1]
    summary = {
        "command": "simulate",
        "seed": seed,
        "model": model.to_dict(),
        "n_paths": n_paths,
        "horizon": float(sim.times[-1]),
        "dt": dt,
        "terminal": {
            "sample_mean": float(np.mean(terminal)),
            "sample_variance": float(np.var(terminal, ddof=1)) if n_paths > 1 else None,
            "law_mean": law.mean,
            "law_variance": law.variance,
        },
    }
    return [fileio.write_paths(out / "paths.csv", sim.times, sim.rates),
            fileio.write_json(out / "simulate_summary.json", summary)]


def cmd_price_bonds(opts: _Options, out: Path, seed: int) -> list[Path]:
    from .bonds import bond_prices
    from .marketfit import implied_phi
    from .shortrate import InitialCurve

    model = _model(opts)
    curve = _curve(opts)
    mats = _maturities(opts, curve)
    flat = opts.get("phi")
    if flat is None:
        phi = implied_phi(curve, model)
    else:
        phi = InitialCurve.flat(float(flat), model.coeffs.tau_max)
    model_b = bond_prices(model, phi, mats)
    cols = {"maturity_years": mats, "model_price": model_b}
    inside = mats <= curve.max_maturity
    if np.all(inside):
        market = np.asarray(curve.discount(mats), dtype=float)
        cols.update(market_price=market, abs_err=np.abs(model_b - market))
    return [fileio.write_table(out / "bonds.csv", cols)]


def cmd_price_caplets(opts: _Options, out: Path, seed: int) -> list[Path]:
    from .marketfit import caplet_model_prices, relative_sse

    delta = float(opts.get("delta", 0.25))
    quotes = _caplet_quotes(opts, delta)
    curve = _nelson_siegel(opts)
    kind = opts.get("kind", "proposed")
    if kind == "proposed":
        params = _model(opts)
    else:
        params = {"sigma": opts.get("sigma"), "b": opts.get("b")}
        if params["sigma"] is None or (kind == "vasicek" and params["b"] is None):
            raise UsageError(f"{kind} needs --sigma" + (" and --b" if kind == "vasicek" else ""))
    prices = caplet_model_prices(kind, params, quotes, curve, float(opts.get("notional", 100.0)))
    cols = _caplet_table(quotes, prices)
    paths = [fileio.write_table(out / "caplets_priced.csv", cols)]
    if "price" in cols:
        paths.append(fileio.write_json(out / "caplets_summary.json", {
            "command": "price-caplets", "kind": kind, "curve": curve.to_array(),
            "relative_sse": relative_sse(cols["price"], prices),
            "sse": float(np.sum((cols["price"] - prices) ** 2)),
        }))
    return paths


def cmd_forward_curve(opts: _Options, out: Path, seed: int) -> list[Path]:
    from .marketfit import market_forward

    curve = _curve(opts)
    mats = opts.get("maturities")
    if mats is None:
        mats = np.round(np.linspace(0.0, curve.max_maturity, int(opts.get("n_points", 121))), 12)
    mats = np.asarray(mats, dtype=float)
    if mats.size == 0:
        raise UsageError("the maturity grid is empty")
    fwd = np.atleast_1d(market_forward(curve, mats))
    safe = np.where(mats > 0, mats, np.nan)
    y = np.where(mats > 0, -np.log(np.asarray(curve.discount(np.where(mats > 0, mats, 1.0)))) / safe, fwd)
    return [fileio.write_table(out / "forward_curve.csv", {"maturity_years": mats, "yield": y, "forward": fwd})]


def cmd_implied_phi(opts: _Options, out: Path, seed: int) -> list[Path]:
    from .marketfit import implied_phi

    model = _model(opts)
    curve = _curve(opts)
    phi = implied_phi(curve, model, int(opts.get("n_points", 257)))
    return [fileio.write_table(out / "implied_phi.csv", {"s": phi.grid, "phi": phi.values}),
            fileio.write_json(out / "implied_phi.json", {
                "command": "implied-phi", "model": model.to_dict(), "r0": phi.r0,
                "consistency_residual": phi.meta.get("consistency_residual")})]


def cmd_estimate(opts: _Options, out: Path, seed: int) -> list[Path]:
    from .estimation import fit_transition, incremental_delay_sweep, select_delays

    path = opts.get("series")
    if path is None:
        raise UsageError("a date,rate series is required (--series)")
    x, dt, dates = fileio.read_series(path, opts.get("dt"))
    delays = opts.get("delays")
    candidates = None
    if delays is None:
        candidates = select_delays((x, dt), int(opts.get("max_candidates", 5)))
        delays = list(candidates.delays)
    fits = incremental_delay_sweep((x, dt), delays)
    n_boot = int(opts.get("n_bootstrap", 0))
    final = fit_transition((x, dt), delays, n_bootstrap=n_boot, seed=seed) if n_boot > 0 else fits[-1]
    base = fits[0].mse
    report = {
        "command": "estimate",
        "seed": seed,
        "n_observations": int(x.size),
        "first_date": dates[0],
        "last_date": dates[-1],
        "dt": dt,
        "delays": [float(d) for d in delays],
        "candidates": None if candidates is None else {
            "delays": list(candidates.delays), "powers": list(candidates.powers),
            "low_power": candidates.low_power},
        "sweep": [dict(f.to_dict(), n_delays=i, mse_improvement=(base - f.mse) / base if base > 0 else 0.0)
                  for i, f in enumerate(fits)],
        "final": dict(final.to_dict(), n_bootstrap=n_boot),
    }
    table = {
        "n_delays": list(range(len(fits))),
        "mse": [f.mse for f in fits],
        "lb_pvalue": [f.lb_pvalue for f in fits],
    }
    return [fileio.write_json(out / "estimate_report.json", report),
            fileio.write_table(out / "estimate_sweep.csv", table)]


def cmd_calibrate_bonds(opts: _Options, out: Path, seed: int) -> list[Path]:
    from .datasets import bond_calibration_params, reference_tables
    from .marketfit import bond_objective, calibrate_bonds

    curve = _curve(opts)
    tau1 = float(opts.get("tau1", 1.0))
    init = _model(opts, required=False) if opts.get("init") is None else fileio.read_model(opts.get("init"))
    table = reference_tables()["bond_calibration"]
    published = None
    if tau1 in [float(t) for t in table["tau1"]]:
        published = bond_calibration_params(tau1)
    if init is None:
        if published is None:
            raise UsageError("no published point for this delay; pass --init")
        init = published
    res = calibrate_bonds(curve, tau1, init, n_starts=int(opts.get("n_starts", 8)), seed=seed)
    report = {
        "command": "calibrate-bonds",
        "seed": seed,
        "tau1": tau1,
        "params": res.params.to_dict(),
        "objective": res.objective,
        "objective_at_init": bond_objective(curve, init),
        "objective_at_reference": None if published is None else bond_objective(curve, published),
        "reference_params": None if published is None else published.to_dict(),
        "converged": res.converged,
        "consistency_residual": res.extra["consistency_residual"],
    }
    bonds = {"maturity_years": res.extra["maturities"], "market_price": res.extra["market"],
             "model_price": res.extra["model"],
             "abs_err": np.abs(np.subtract(res.extra["model"], res.extra["market"]))}
    return [fileio.write_json(out / "calibrate_bonds.json", report),
            fileio.write_table(out / "calibrated_bonds.csv", bonds)]


def cmd_calibrate_caplets(opts: _Options, out: Path, seed: int) -> list[Path]:
    from .datasets import reference_tables
    from .marketfit import calibrate_caplets, default_tau_grid

    delta = float(opts.get("delta", 0.25))
    quotes = _caplet_quotes(opts, delta)
    if not all(math.isfinite(q.price) and q.price > 0 for q in quotes):
        raise DataError("caplet calibration needs positive prices for every quote")
    curve0 = _nelson_siegel(opts)
    grid = opts.get("tau_grid")
    if grid is not None:
        if len(grid) != 3 or not 0 < grid[0] <= grid[1] or not grid[2] > 0:
            raise UsageError("--tau-grid takes lo,hi,step with 0 < lo <= hi and step > 0")
        grid = default_tau_grid(*grid)
    kinds = opts.get("kinds", ["proposed", "bachelier", "black", "vasicek"])
    maxfev = int(opts.get("maxfev", 3000))
    init = _model(opts, required=False) if opts.get("init") is None else fileio.read_model(opts.get("init"))

    results = {}
    shared = curve0
    if "proposed" in kinds:
        res = calibrate_caplets(quotes, curve0, "proposed", init=init, tau_grid=grid, maxfev=maxfev)
        shared = res.extra["curve"]
        results["proposed"] = res
    for kind in kinds:
        if kind != "proposed":
            results[kind] = calibrate_caplets(quotes, shared, kind, maxfev=maxfev)

    ref = reference_tables()["caplet_relative_sse"]
    which = opts.get("set", "short") if opts.get("caplets") is None else None
    col = {"short": 0, "long": 1, "entire": 2}.get(which)
    models = {}
    for kind, res in results.items():
        entry = {"relative_sse": res.objective, "sse": res.extra["sse"],
                 "reference_relative_sse": None if col is None else ref[kind][col]}
        if kind == "proposed":
            entry.update(params=res.params.to_dict(), tau1=res.tau1, init_objective=res.extra["init_objective"],
                         tau_profile=[list(p) for p in res.extra["profile"]])
        else:
            entry["params"] = res.extra["benchmark_params"]
        models[kind] = entry
    report = {"command": "calibrate-caplets", "set": which, "n_quotes": len(quotes),
              "curve": {"kind": "nelson-siegel forward", "params": shared.to_array()}, "models": models}
    first = "proposed" if "proposed" in results else next(iter(results))
    prices = results[first].extra["model_prices"]
    return [fileio.write_json(out / "calibrate_caplets.json", report),
            fileio.write_table(out / "caplets_priced.csv", _caplet_table(quotes, prices))]


def cmd_stability(opts: _Options, out: Path, seed: int) -> list[Path]:
    from .shortrate import Stability, limiting_distribution, stability_check

    model = _model(opts)
    status = stability_check(model.coeffs)
    report = {"command": "stability", "model": model.to_dict(), "status": status.value, "limiting_law": None}
    if status is Stability.STABLE_FOR_ALL_DELAYS and model.a.is_constant and model.sigma.is_constant:
        law = limiting_distribution(model)
        report["limiting_law"] = {"mean": law.mean, "variance": law.variance}
    return [fileio.write_json(out / "stability.json", report)]


COMMANDS = {
    "simulate": cmd_simulate,
    "price-bonds": cmd_price_bonds,
    "price-caplets": cmd_price_caplets,
    "forward-curve": cmd_forward_curve,
    "implied-phi": cmd_implied_phi,
    "estimate": cmd_estimate,
    "calibrate-bonds": cmd_calibrate_bonds,
    "calibrate-caplets": cmd_calibrate_caplets,
    "stability": cmd_stability,
}


def build_parser() -> argparse.ArgumentParser:
    def common(default):
        # global flags are accepted before and after the subcommand
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--config", default=default, help="JSON file with a block per command")
        p.add_argument("--seed", type=int, default=default, help="random seed (default 0)")
        p.add_argument("--out-dir", default=default, help="output directory (default '.')")
        p.add_argument("--threads", type=int, default=default, help="cap on BLAS threads")
        return p

    parser = _Parser(prog="delayrate", description="Delay short-rate pricing and calibration.",
                     parents=[common(None)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub_common = common(argparse.SUPPRESS)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[sub_common])

    p = add("simulate", "simulate short-rate paths")
    p.add_argument("--model")
    p.add_argument("--r0", type=float)
    p.add_argument("--phi", type=float, help="flat initial function value (default r0)")
    p.add_argument("--horizon", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--n-paths", dest="n_paths", type=int)
    p.add_argument("--scheme", choices=["exact", "euler"])
    p.add_argument("--record-every", dest="record_every", type=int)

    for name, help_ in (("price-bonds", "zero-coupon bond prices at time 0"),
                        ("forward-curve", "market yields and instantaneous forwards"),
                        ("implied-phi", "initial function that reprices the market curve")):
        p = add(name, help_)
        p.add_argument("--yields", help="maturity_years,yield CSV")
        p.add_argument("--curve", choices=["bundled", "smoothed"])
        if name != "forward-curve":
            p.add_argument("--model")
        if name == "price-bonds":
            p.add_argument("--phi", type=float, help="flat initial function instead of the implied one")
        if name in ("price-bonds", "forward-curve"):
            p.add_argument("--maturities", type=_floats)
        if name in ("forward-curve", "implied-phi"):
            p.add_argument("--n-points", dest="n_points", type=int)

    for name, help_ in (("price-caplets", "caplet prices on a Nelson-Siegel forward curve"),
                        ("calibrate-caplets", "fit caplet models and compare them")):
        p = add(name, help_)
        p.add_argument("--caplets", help="expiry_years,strike[,price] CSV")
        p.add_argument("--set", choices=["short", "long", "entire"], help="bundled quote set")
        p.add_argument("--delta", type=float)
        p.add_argument("--yields")
        p.add_argument("--curve", choices=["bundled", "smoothed"])
        p.add_argument("--ns-curve", dest="ns_curve", type=_floats, help="beta0,beta1,beta2,lam")
        if name == "price-caplets":
            p.add_argument("--model")
            p.add_argument("--kind", choices=["proposed", "bachelier", "black", "vasicek"])
            p.add_argument("--sigma", type=float)
            p.add_argument("--b", type=float)
            p.add_argument("--expiries", type=_floats)
            p.add_argument("--strikes", type=_floats)
            p.add_argument("--notional", type=float)
        else:
            p.add_argument("--init", help="start point as model JSON")
            p.add_argument("--kinds", type=lambda s: [k.strip() for k in s.split(",") if k.strip()])
            p.add_argument("--tau-grid", dest="tau_grid", type=_floats,
                           help="delay grid as lo,hi,step")
            p.add_argument("--maxfev", type=int)

    p = add("estimate", "fit the discretised transition to a rate series")
    p.add_argument("--series", help="date,rate CSV")
    p.add_argument("--delays", type=_floats, help="fixed delays in years; default from the periodogram")
    p.add_argument("--max-candidates", dest="max_candidates", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--n-bootstrap", dest="n_bootstrap", type=int)

    p = add("calibrate-bonds", "fit a one-delay model to a yield curve")
    p.add_argument("--yields")
    p.add_argument("--curve", choices=["bundled", "smoothed"])
    p.add_argument("--tau1", type=float)
    p.add_argument("--init", help="start point as model JSON")
    p.add_argument("--n-starts", dest="n_starts", type=int)

    p = add("stability", "delay-independent stability and limiting law")
    p.add_argument("--model")
    return parser


def _run(ns: argparse.Namespace) -> list[Path]:
    cfg = _load_config(ns.config)
    block = dict(cfg.get(ns.command, {}))
    seed = ns.seed if ns.seed is not None else int(cfg.get("seed", 0))
    out = Path(ns.out_dir if ns.out_dir is not None else cfg.get("out_dir", "."))
    threads = ns.threads if ns.threads is not None else cfg.get("threads")
    if threads is not None and int(threads) < 1:
        raise UsageError("--threads must be at least 1")
    opts = _Options(ns, block)
    if threads is None:
        return COMMANDS[ns.command](opts, out, seed)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(threads)):
        return COMMANDS[ns.command](opts, out, seed)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        written = _run(ns)
    except UsageError as exc:
        print(f"delayrate: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"delayrate: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, DelayRateError) as exc:
        print(f"delayrate: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"delayrate: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
