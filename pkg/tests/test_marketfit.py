import math

import numpy as np
import pytest

from delayrate.bonds import bond_prices
from delayrate.datasets import load_caplet_quotes, load_phi_reference, load_smoothed_curve, reference_tables
from delayrate.exceptions import CurveTooShort, DegenerateC, OutOfRange
from delayrate.marketfit import (
    CalibrationResult,
    CapletSet,
    NelsonSiegelForward,
    SvenssonCurve,
    YieldCurve,
    bond_objective,
    calibrate_bonds,
    calibrate_caplets,
    caplet_model_prices,
    caplet_objective,
    default_tau_grid,
    implied_phi,
    market_forward,
    nelder_mead_restarts,
    relative_sse,
)
from delayrate.rfr_caplets import CapletQuote, benchmark_price, caplet_formula, caplet_variance_nu
from delayrate.shortrate import ModelParams

GRID = np.array([0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0])


def test_curve_validation():
    with pytest.raises(ValueError):
        YieldCurve([1.0, 0.5], [0.04, 0.04])
    with pytest.raises(ValueError):
        YieldCurve([0.0, 1.0], [0.04, 0.04])
    curve = YieldCurve([1.0, 2.0], [0.04, 0.05])
    with pytest.raises(OutOfRange):
        curve.forward(2.5)


def test_forward_examples():
    flat = YieldCurve(GRID, np.full(GRID.size, 0.05))
    assert np.allclose(flat.forward(np.array([0.0, 0.1, 3.3, 10.0])), 0.05)
    lin = YieldCurve(GRID, 0.04 + 0.002 * GRID)
    s = np.array([0.3, 1.7, 4.2, 9.0])
    assert np.allclose(lin.forward(s), 0.04 + 0.004 * s, atol=1e-14)
    assert np.allclose(lin.discount(s), np.exp(-(0.04 + 0.002 * s) * s))


def test_forward_continuous_below_first_knot(yield_curve):
    m0 = yield_curve.maturities[0]
    h = 1e-9
    assert yield_curve.forward(m0 - h) == pytest.approx(yield_curve.forward(m0 + h), abs=1e-7)


FIXTURE_GAP = ("the reference series rest on a smoothed curve that the bundled yields do not "
               "reproduce; monotone cubic interpolation differentiates the raw quotes")


@pytest.mark.xfail(strict=True, reason="on a falling curve the 1Y forward sits about 3e-3 below the 1Y yield")
def test_fixture_forward_near_one_year(yield_curve):
    assert market_forward(yield_curve, 1.0) == pytest.approx(0.0517, abs=2e-3)


def test_fixture_one_year_point(yield_curve):
    assert yield_curve.yield_(1.0) == pytest.approx(0.0517, abs=1e-12)
    h = 1e-6
    dy = (yield_curve.yield_(1.0 + h) - yield_curve.yield_(1.0 - h)) / (2 * h)
    assert market_forward(yield_curve, 1.0) == pytest.approx(0.0517 + dy, abs=1e-8)


def test_implied_phi_flat_curve():
    flat = YieldCurve(GRID, np.full(GRID.size, 0.05))
    c = -0.3
    a = 0.05 * (1.0 - c)  # nu = -b f = 0.05 with b = -1
    model = ModelParams.from_values(a, -1.0, [c], [1.0], 1e-12)
    phi = implied_phi(flat, model)
    assert np.allclose(phi.values, 0.05, atol=1e-12)
    assert phi.r0 == pytest.approx(0.05)
    assert phi.meta["consistency_residual"] == pytest.approx(0.0, abs=1e-12)


def test_implied_phi_zero_sigma_term(yield_curve):
    base = ModelParams.from_values(0.05, -1.0, [-0.2], [1.0], 1e-300)
    phi = implied_phi(yield_curve, base)
    s = np.linspace(-1.0, 0.0, 9)
    expect = (yield_curve.forward_slope(s + 1.0) + 1.0 * yield_curve.forward(s + 1.0) - 0.05) / -0.2
    assert np.allclose(phi.phi(s), expect, rtol=0, atol=1e-14)


def test_implied_phi_errors(yield_curve):
    with pytest.raises(DegenerateC):
        implied_phi(yield_curve, ModelParams.from_values(0.05, -1.0, [0.0], [1.0], 0.004))
    short = YieldCurve([0.25, 0.5], [0.05, 0.05])
    with pytest.raises(CurveTooShort):
        implied_phi(short, ModelParams.from_values(0.05, -1.0, [-0.1], [1.0], 0.004))


@pytest.mark.xfail(strict=True, reason=FIXTURE_GAP)
def test_implied_phi_reference_from_fixture_yields(table1_models, yield_curve):
    s, ref = load_phi_reference(1.0)
    phi = implied_phi(yield_curve, table1_models[1.0])
    assert np.max(np.abs(phi.phi(s) - ref)) < 2e-3


@pytest.mark.parametrize("tau1", [1.0, 2.0, 3.0, 4.0])
def test_implied_phi_reference_from_smoothed_curve(table1_models, tau1):
    s, ref = load_phi_reference(tau1)
    phi = implied_phi(load_smoothed_curve(), table1_models[tau1])
    assert np.max(np.abs(phi.phi(s) - ref)) < 2e-3
    if tau1 == 1.0:
        assert phi.phi(0.0) == pytest.approx(0.0555631803431222, abs=2e-3)


def test_svensson_curve_accessors():
    c = load_smoothed_curve()
    s = np.array([0.0, 0.7, 4.0, 12.0])
    h = 1e-6
    fd = -(np.log(c.discount(s[1:] + h)) - np.log(c.discount(s[1:] - h))) / (2 * h)
    assert np.allclose(fd, c.forward(s[1:]), atol=1e-8)
    fd = (c.forward(s[1:] + h) - c.forward(s[1:] - h)) / (2 * h)
    assert np.allclose(fd, c.forward_slope(s[1:]), atol=1e-7)
    assert c.yield_(0.0) == pytest.approx(c.forward(0.0))
    with pytest.raises(OutOfRange):
        c.forward(c.max_maturity + 1)
    refit = SvenssonCurve.fit_discounts(c.maturities, c.discount(c.maturities), x0=c.params * 1.01)
    assert np.allclose(refit.discount(c.maturities), c.discount(c.maturities), atol=1e-10)


def test_short_end_replication(table1_models, yield_curve):
    for tau1, model in table1_models.items():
        phi = implied_phi(yield_curve, model)
        T = np.linspace(0.01, tau1, 40)
        assert np.max(np.abs(bond_prices(model, phi, T) - yield_curve.discount(T))) < 5e-6


def test_bond_objective_recomputation(model_tau1, yield_curve):
    mats = yield_curve.maturities[yield_curve.maturities > 1.0]
    phi = implied_phi(yield_curve, model_tau1)
    err = yield_curve.discount(mats) - bond_prices(model_tau1, phi, mats)
    assert bond_objective(yield_curve, model_tau1) == pytest.approx(float(np.mean(err**2)), rel=1e-15)
    with pytest.raises(CurveTooShort):
        bond_objective(yield_curve, model_tau1, maturities=[0.5])


def test_nelder_mead_restarts_deterministic():
    f = lambda x: (x[0] - 1.3) ** 2 + 10 * (x[1] + 0.4) ** 2
    a = nelder_mead_restarts(f, np.array([1.0, -1.0]), n_starts=4, seed=3)
    b = nelder_mead_restarts(f, np.array([1.0, -1.0]), n_starts=4, seed=3)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    assert np.allclose(a[0], [1.3, -0.4], atol=1e-6)


def test_calibrate_bonds_synthetic_floor(yield_curve):
    truth = ModelParams.from_values(0.06, -1.0, [-0.3], [2.0], 0.006)
    phi = implied_phi(yield_curve, truth)
    mats = yield_curve.maturities
    synth = YieldCurve.from_discounts(mats, bond_prices(truth, phi, mats))
    floor = bond_objective(synth, truth)
    init = ModelParams.from_values(0.063, -0.95, [-0.28], [2.0], 0.0062)
    res = calibrate_bonds(synth, 2.0, init, n_starts=2, maxiter=300)
    assert res.objective <= max(floor, 1e-12)
    assert isinstance(res, CalibrationResult) and res.tau1 == 2.0
    with pytest.raises(CurveTooShort):
        calibrate_bonds(YieldCurve([0.5, 1.0], [0.05, 0.05]), 2.0, init)


def test_calibration_result_contract():
    with pytest.raises(ValueError):
        CalibrationResult(None, -1.0, 0, True)


def test_nelson_siegel_curve():
    ns = NelsonSiegelForward(0.04, -0.01, 0.02, 1.5)
    t = np.array([0.5, 2.0, 7.0])
    num = [np.trapezoid(ns.forward(np.linspace(0, x, 20001)), np.linspace(0, x, 20001)) for x in t]
    assert np.allclose(ns.integral(t), num, rtol=1e-9)
    assert ns.growth(1.0, 1.25) == pytest.approx(ns.discount(1.0) / ns.discount(1.25))
    with pytest.raises(ValueError):
        NelsonSiegelForward(0.04, 0.0, 0.0, 0.0)
    curve = YieldCurve(GRID, ns.integral(GRID) / GRID)
    fit = NelsonSiegelForward.fit(curve)
    assert np.allclose(fit.to_array(), ns.to_array(), atol=1e-6)


@pytest.fixture(scope="module")
def short_quotes():
    return load_caplet_quotes("short")


@pytest.fixture(scope="module")
def ns_curve(yield_curve):
    return NelsonSiegelForward.fit(yield_curve)


def test_vectorised_prices_match_scalar(short_quotes, ns_curve):
    model = ModelParams.from_values(0.0, -4925.94, [-794.774], [1.87482], 292.825)
    got = caplet_model_prices("proposed", model, short_quotes, ns_curve)
    for q, p in zip(short_quotes[::17], got[::17]):
        nu = caplet_variance_nu(model, 0.0, q.S, q)
        ref = 100 * caplet_formula(float(ns_curve.discount(q.T)), float(ns_curve.growth(q.S, q.T)), q.K_hat, nu)
        assert p == pytest.approx(ref, rel=1e-11)
    for kind, params in [("bachelier", {"sigma": 0.015}), ("black", {"sigma": 0.4}), ("vasicek", {"b": -0.2, "sigma": 0.015})]:
        got = caplet_model_prices(kind, params, short_quotes, ns_curve)
        for q, p in zip(short_quotes[::17], got[::17]):
            F = float((ns_curve.growth(q.S, q.T) - 1) / q.Delta)
            ref = 100 * benchmark_price(kind, params, q, float(ns_curve.discount(q.T)), F)
            assert p == pytest.approx(ref, rel=1e-11, abs=1e-15)


def test_relative_sse_recomputation(short_quotes, ns_curve):
    model = caplet_model_prices("bachelier", {"sigma": 0.015}, short_quotes, ns_curve)
    market = np.array([q.price for q in short_quotes])
    direct = sum((m - p) ** 2 / m for m, p in zip(market, model))
    assert relative_sse(market, model) == pytest.approx(direct, rel=1e-13)


def test_objective_invariant_under_reordering(short_quotes, ns_curve):
    model = ModelParams.from_values(0.0, -4925.94, [-794.774], [1.87482], 292.825)
    perm = np.random.default_rng(2).permutation(len(short_quotes))
    shuffled = [short_quotes[i] for i in perm]
    a = caplet_objective("proposed", model, short_quotes, ns_curve)
    b = caplet_objective("proposed", model, shuffled, ns_curve)
    assert a == pytest.approx(b, rel=1e-13)


def test_single_quote_exact_fit(ns_curve):
    target = CapletQuote(1.0, 1.25, 0.05)
    price = float(caplet_model_prices("bachelier", {"sigma": 0.0123}, [target], ns_curve)[0])
    quote = CapletQuote(1.0, 1.25, 0.05, price=price)
    res = calibrate_caplets([quote], ns_curve, kind="bachelier")
    assert res.objective < 1e-14
    assert res.extra["benchmark_params"]["sigma"] == pytest.approx(0.0123, rel=1e-5)


def test_caplet_calibration_needs_positive_prices(ns_curve):
    with pytest.raises(ValueError):
        calibrate_caplets([CapletQuote(1.0, 1.25, 0.05, price=0.0)], ns_curve, kind="bachelier")


def test_tau_grid():
    g = default_tau_grid()
    assert g[0] == 0.25 and g[-1] == 4.0 and g.size == 376


def test_proposed_calibration_dominates_start(short_quotes, yield_curve):
    # one delay, small budget: the polish from the start point keeps dominance
    ref = reference_tables()["caplet_calibration"]["short"]
    init = ModelParams.from_values(0.0, ref["b"], [ref["c1"]], [ref["tau1"]], ref["sigma"])
    res = calibrate_caplets(short_quotes, yield_curve, init=init, tau_grid=[ref["tau1"]], refine_step=None,
                            maxfev=300)
    assert res.objective <= res.extra["init_objective"]
    again = calibrate_caplets(short_quotes, yield_curve, init=init, tau_grid=[ref["tau1"]], refine_step=None,
                              maxfev=300)
    assert again.objective == res.objective
    assert isinstance(res.extra["curve"], NelsonSiegelForward)
    assert res.extra["model_prices"].shape == (len(short_quotes),)
