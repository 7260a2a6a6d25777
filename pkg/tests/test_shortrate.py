import math
import warnings

import numpy as np
import pytest
from scipy import stats

from delayrate.exceptions import DelayMismatch, HistoryTooShort, NotConverged, StabilityBoundaryWarning
from delayrate.series_kernel import DelayCoefficients, dde_oracle
from delayrate.shortrate import (
    InitialCurve,
    ModelParams,
    PathSample,
    PiecewiseConstant,
    Stability,
    conditional_law,
    limiting_distribution,
    market_price_of_risk,
    martingale_bound_xi,
    simulate_euler,
    simulate_exact,
    simulate_paths,
    stability_check,
)


def test_params_validation_and_roundtrip():
    with pytest.raises(ValueError):
        ModelParams.from_values(0.05, -1.0, [0.1], [1.0], -0.01)
    m = ModelParams.from_values([0.05, 0.06], -1.0, [0.1, -0.2], [0.5, 1.0], 0.01, a_breaks=[2.0])
    assert ModelParams.from_dict(m.to_dict()) == m
    assert m.a(1.0) == 0.05 and m.a(2.0) == 0.06


def test_piecewise_constant_is_right_continuous():
    f = PiecewiseConstant((1.0, 2.0, 3.0), (1.0, 2.0))
    assert list(f(np.array([0.5, 1.0, 1.999, 2.0, 9.0]))) == [1.0, 2.0, 2.0, 3.0, 3.0]


def test_initial_curve_grid():
    phi = InitialCurve.flat(0.05, 2.0)
    assert phi.start == -2.0 and phi.end == 0.0
    assert phi.rate(-1.3) == 0.05
    with pytest.raises(ValueError):
        InitialCurve(np.array([-1.0, 0.0]), np.array([np.nan, 0.0]))


def test_vasicek_conditional_moments(vasicek):
    hist = InitialCurve.flat(0.05, 1.0)
    law = conditional_law(vasicek, hist, 0.0, 1.0)
    theta = 0.05
    assert law.mean == pytest.approx(theta + (0.05 - theta) * math.exp(-1), rel=1e-12)
    assert law.variance == pytest.approx(0.004**2 * (1 - math.exp(-2)) / 2, rel=1e-12)
    hist = InitialCurve.flat(0.03, 1.0)
    law = conditional_law(vasicek, hist, 0.0, 1.0)
    assert law.mean == pytest.approx(theta + (0.03 - theta) * math.exp(-1), rel=1e-12)


def test_degenerate_horizon(model_tau1, flat_phi):
    law = conditional_law(model_tau1, flat_phi, 0.0, 1e-10)
    assert law.mean == pytest.approx(0.0555, abs=1e-10)
    assert law.variance < 1e-14


def test_history_too_short(model_tau1):
    path = PathSample(0.0, 0.01, np.full(51, 0.05), n_pre=50)
    with pytest.raises(HistoryTooShort):
        conditional_law(model_tau1, path, 0.0, 1.0)


def test_variance_monotone_in_horizon(model_tau1, flat_phi):
    v = [conditional_law(model_tau1, flat_phi, 0.0, T).variance for T in (0.2, 0.7, 1.5, 3.0)]
    assert np.all(np.diff(v) > 0)


def test_conditional_law_matches_euler(model_tau1, flat_phi):
    law = conditional_law(model_tau1, flat_phi, 0.0, 0.5)
    sim = simulate_paths(model_tau1, flat_phi, None, 0.5, 1.0 / 512, 20000, seed=3, scheme="euler")
    x = sim.rates[:, -1]
    se_mean = x.std(ddof=1) / math.sqrt(x.size)
    assert abs(x.mean() - law.mean) < 3 * se_mean
    se_var = law.variance * math.sqrt(2.0 / (x.size - 1))
    assert abs(x.var(ddof=1) - law.variance) < 3 * se_var


def test_exact_simulation_vasicek_moments(vasicek):
    phi = InitialCurve.flat(0.03, 1.0)
    sim = simulate_paths(vasicek, phi, None, 2.0, 0.25, 20000, seed=11)
    x = sim.rates[:, -1]
    mean = 0.05 + (0.03 - 0.05) * math.exp(-2.0)
    var = 0.004**2 * (1 - math.exp(-4.0)) / 2
    assert abs(x.mean() - mean) < 3 * math.sqrt(var / x.size)
    assert abs(x.var(ddof=1) - var) < 3 * var * math.sqrt(2.0 / x.size)


def test_zero_noise_follows_deterministic_solution(model_tau1):
    quiet = model_tau1.with_values(sigma=1e-12)
    phi = InitialCurve.flat(0.05, 1.0)
    paths = simulate_exact(quiet, phi, None, 3.0, 1.0 / 64, 2, seed=0)
    co, a = quiet.coeffs, float(quiet.a(0.0))
    sol = dde_oracle(co, lambda s: 0.05, a, 3.0)
    p = paths[0]
    mask = p.times >= 0
    assert np.max(np.abs(p.values[mask] - sol(p.times[mask]))) < 1e-6


def test_simulation_is_deterministic(model_tau1, flat_phi):
    a = simulate_exact(model_tau1, flat_phi, None, 1.0, 1.0 / 16, 5, seed=42)
    b = simulate_exact(model_tau1, flat_phi, None, 1.0, 1.0 / 16, 5, seed=42)
    for p, q in zip(a, b):
        assert np.array_equal(p.values, q.values)
    c = simulate_euler(model_tau1, flat_phi, None, 1.0, 1.0 / 16, 5, seed=43)
    assert not np.array_equal(a[0].values, c[0].values)
    assert simulate_euler(model_tau1, flat_phi, None, 1.0, 1.0 / 16, 0, seed=1) == []


def test_exact_and_euler_agree(model_tau1, flat_phi):
    ex = simulate_paths(model_tau1, flat_phi, None, 2.0, 1.0 / 8, 20000, seed=5)
    eu = simulate_paths(model_tau1, flat_phi, None, 2.0, 1.0 / 256, 20000, seed=6, scheme="euler")
    x, y = ex.rates[:, -1], eu.rates[:, -1]
    se = math.sqrt(x.var() / x.size + y.var() / y.size)
    assert abs(x.mean() - y.mean()) < 3 * se


def test_euler_weak_order_trend():
    # strong mean reversion makes the drift discretisation visible; sigma small
    model = ModelParams.from_values(0.5, -8.0, [2.0], [0.25], 1e-9)
    phi = InitialCurve.flat(0.0, 0.25)
    target = simulate_paths(model, phi, 0.1, 1.0, 0.25 / 512, 1, seed=0).rates[0, -1]
    errs = []
    for k in (64, 128, 256):
        end = simulate_paths(model, phi, 0.1, 1.0, 0.25 / k, 1, seed=0, scheme="euler").rates[0, -1]
        errs.append(abs(end - target))
    assert errs[0] > errs[1] > errs[2]


def test_normality_of_terminal_law(model_tau1, flat_phi):
    sim = simulate_paths(model_tau1, flat_phi, None, 1.5, 0.125, 10000, seed=8)
    x = sim.rates[:, -1]
    z = (x - x.mean()) / x.std()
    jb = stats.jarque_bera(z).statistic
    assert jb < stats.chi2.ppf(0.99, 2)


def test_stability_examples():
    assert stability_check(DelayCoefficients(-1.00232, (-0.14587,), (1.0,))) is Stability.STABLE_FOR_ALL_DELAYS
    assert stability_check(DelayCoefficients(1.0, (0.0,), (1.0,))) is Stability.NOT_GUARANTEED
    with pytest.warns(StabilityBoundaryWarning):
        verdict = stability_check(DelayCoefficients(-1.0, (-1.0,), (1.0,)))
    assert verdict is Stability.STABLE_FOR_ALL_DELAYS


def test_stability_grid_matches_transcription():
    values = np.linspace(-2.0, 2.0, 10)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StabilityBoundaryWarning)
        for b in values:
            for c1 in values:
                for c2 in values:
                    expect = (b + c1 + c2 != 0) and (abs(b) >= abs(c1) + abs(c2)) and (b < 0)
                    got = stability_check(DelayCoefficients(b, (c1, c2), (1.0, 2.0)))
                    assert (got is Stability.STABLE_FOR_ALL_DELAYS) == expect


def test_limiting_distribution_vasicek():
    m = ModelParams.from_values(0.05, -1.0, [0.0], [1.0], 0.01)
    law = limiting_distribution(m)
    assert law.mean == pytest.approx(0.05, rel=1e-8)
    assert law.variance == pytest.approx(0.01**2 / 2, rel=1e-8)
    zero = limiting_distribution(m.with_values(a=0.0))
    assert zero.mean == 0.0


def test_limiting_distribution_requires_stability():
    with pytest.raises(ValueError):
        limiting_distribution(ModelParams.from_values(0.05, 0.5, [0.0], [1.0], 0.01))
    slow = ModelParams.from_values(0.05, -0.001, [0.0], [1.0], 0.01)
    with pytest.raises(NotConverged):
        limiting_distribution(slow, t_grid_cap=64.0)


def test_market_price_of_risk():
    hist = InitialCurve.flat(0.04, 1.0)
    q = ModelParams.from_values(0.06, -1.0, [-0.2], [1.0], 0.004)
    assert market_price_of_risk(q, q, hist, 0.0) == 0.0
    p = q.with_values(a=0.05)
    assert market_price_of_risk(q, p, hist, 0.0) == pytest.approx(2.5)
    p2 = ModelParams.from_values(0.05, -0.8, [-0.1], [1.0], 0.004)
    expect = (0.06 - 0.05 + (-1.0 + 0.8) * 0.04 + (-0.2 + 0.1) * 0.04) / 0.004
    assert market_price_of_risk(q, p2, hist, 0.0) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(DelayMismatch):
        market_price_of_risk(q, ModelParams.from_values(0.05, -1.0, [-0.2], [2.0], 0.004), hist, 0.0)


def test_martingale_bound():
    zero = ModelParams.from_values(0.0, 0.0, [0.0], [1.0], 1e-300)
    phi0 = InitialCurve.flat(0.0, 1.0)
    assert martingale_bound_xi(zero, zero, phi0, 0.0, 1.0) == pytest.approx(0.0, abs=1e-12)
    q = ModelParams.from_values(0.05219, -1.00232, [-0.14587], [1.0], 0.00402)
    phi = InitialCurve.flat(0.05, 1.0)
    xis = [martingale_bound_xi(q, q.with_values(b=q.b + d), phi, 0.05, 5.0) for d in (0.1, 0.2, 0.4)]
    assert all(np.isfinite(xis)) and xis[0] > 0
    assert xis[0] <= xis[1] <= xis[2]
