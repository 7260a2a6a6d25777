import itertools
import math
import warnings

import numpy as np
import pytest

from delayrate.exceptions import CatastrophicCancellation, SeriesOverflow, StepTooLarge
from delayrate.series_kernel import (
    DelayCoefficients,
    SeriesConfig,
    dde_oracle,
    dnalpha_direct,
    enumerate_terms,
    eval_A,
    eval_D,
    eval_R,
    eval_S,
    incomplete_exp_moment,
    kernel_breakpoints,
)

TABLE1 = DelayCoefficients(-1.00232, (-0.14587,), (1.0,))


def test_coefficients_validate():
    with pytest.raises(ValueError):
        DelayCoefficients(-1.0, (0.1, 0.2), (2.0, 1.0))
    with pytest.raises(ValueError):
        DelayCoefficients(-1.0, (0.1,), (0.0,))
    with pytest.raises(ValueError):
        DelayCoefficients(-1.0, (0.1, 0.2), (1.0,))


def test_R_vasicek_collapse():
    co = DelayCoefficients(-1.0, (0.0,), (1.0,))
    assert eval_R(co, 2.0) == pytest.approx(math.exp(-2.0), rel=1e-14)


def test_R_finite_sum_b_zero():
    co = DelayCoefficients(0.0, (-1.0,), (1.0,))
    assert eval_R(co, 1.5) == pytest.approx(0.5, abs=1e-14)


def test_R_initial_condition():
    assert eval_R(TABLE1, -0.3) == 0.0
    assert eval_R(TABLE1, 0.0) == 1.0
    assert np.all(eval_R(TABLE1, np.array([-2.0, -1e-9])) == 0.0)


def test_D_examples():
    zero = DelayCoefficients(0.0, (0.0,), (1.0,))
    assert eval_D(zero, 2.0, 0.0, -1.0) == pytest.approx(-2.0)
    vas = DelayCoefficients(-1.0, (0.0,), (1.0,))
    assert eval_D(vas, 1.0, 0.0, -1.0) == pytest.approx(-(1.0 - math.exp(-1.0)), rel=1e-13)
    assert eval_D(TABLE1, -0.5) == 0.0


def test_D_matches_oracle_at_three():
    oracle = dde_oracle(TABLE1, 0.0, -1.0, 5.0)
    assert abs(eval_D(TABLE1, 3.0) - oracle(3.0)) < 1e-8


def test_D_bond_case_non_positive():
    co = DelayCoefficients(-0.5, (-0.2, -0.1), (0.7, 1.3))
    ell = np.linspace(0, 6, 301)
    assert np.all(eval_D(co, ell) <= 0.0)


@pytest.mark.parametrize("z,d1", [(0.3, 0.0), (0.0, 2.0), (1.0, -1.0)])
def test_D_general_z_d1_matches_oracle(z, d1):
    co = DelayCoefficients(-0.8, (0.4,), (0.6,))
    oracle = dde_oracle(co, lambda s: 0.0, d1, 4.0, x0=z)
    t = np.linspace(0.01, 4.0, 97)
    assert np.max(np.abs(eval_D(co, t, z, d1) - oracle(t))) < 1e-8


def test_vasicek_degeneration_identities():
    for b in (-2.0, -0.3, 0.7):
        co = DelayCoefficients(b, (0.0,), (1.0,))
        t = np.linspace(0, 3, 31)
        assert np.allclose(eval_R(co, t), np.exp(b * t), rtol=1e-12, atol=0)
        z, d1 = 0.4, -1.3
        expect = d1 / b * (np.exp(b * t) - 1) + z * np.exp(b * t)
        assert np.allclose(eval_D(co, t, z, d1), expect, rtol=1e-12, atol=1e-14)


def test_R_satisfies_delay_equation_between_breakpoints():
    co = DelayCoefficients(-0.7, (0.5, -0.3), (0.8, 1.9))
    h = 1e-5
    t = np.array([0.3, 1.1, 2.05, 3.3, 4.4])
    lhs = (eval_R(co, t + h) - eval_R(co, t - h)) / (2 * h)
    rhs = co.b * eval_R(co, t) + sum(c * eval_R(co, t - tau) for c, tau in zip(co.c, co.tau))
    assert np.max(np.abs(lhs - rhs)) < 1e-6


def test_dD_equals_minus_R():
    h = 1e-5
    ell = np.array([0.37, 1.41, 2.66, 4.2])
    fd = (eval_D(TABLE1, ell + h) - eval_D(TABLE1, ell - h)) / (2 * h)
    assert np.max(np.abs(fd + eval_R(TABLE1, ell))) < 1e-6


def test_S_is_integral_of_R():
    co = DelayCoefficients(-0.4, (0.9,), (0.5,))
    t = np.linspace(0, 3, 3001)
    r = eval_R(co, t)
    trap = np.concatenate(([0.0], np.cumsum(0.5 * (r[1:] + r[:-1]) * np.diff(t))))
    assert np.max(np.abs(eval_S(co, t) - trap)) < 1e-5


def _brute_force_count(tau, t):
    n_max = int(t / min(tau)) + 1
    count = 0
    for alpha in itertools.product(range(n_max + 1), repeat=len(tau)):
        if np.dot(alpha, tau) <= t + 1e-12:
            count += 1
    return count


@pytest.mark.parametrize("tau", [(1.0,), (0.7, 1.3), (0.5, 0.8, 1.7)])
def test_term_count_matches_brute_force(tau):
    co = DelayCoefficients(-1.0, tuple(0.1 for _ in tau), tau)
    for t in (0.0, 1.9, 6 * tau[0]):
        terms = enumerate_terms(co, t)
        assert len(terms) == _brute_force_count(tau, t)
        for term in terms:
            assert term.order == sum(term.alpha)
            assert term.lag == pytest.approx(np.dot(term.alpha, tau))
            assert term.lag <= t + 1e-12


def test_term_weights():
    co = DelayCoefficients(-1.0, (0.5, -2.0), (1.0, 1.5))
    for term in enumerate_terms(co, 4.0):
        a1, a2 = term.alpha
        expect = 0.5**a1 * (-2.0) ** a2 / (math.factorial(a1) * math.factorial(a2))
        assert term.weight == pytest.approx(expect, rel=1e-14)


def test_incomplete_moment_against_direct_form():
    for n in range(0, 6):
        for b, y in [(-2.0, 3.0), (-0.5, 1.7), (1.2, 2.0), (-40.0, 0.9)]:
            got = float(incomplete_exp_moment(n, b, np.array([y]))[0])
            assert got == pytest.approx(dnalpha_direct(n, b, y), rel=1e-10)


def test_incomplete_moment_small_argument_is_accurate():
    # |b y| small: the series branch is exact where the closed form cancels
    n, b, y = 4, 1e-6, 0.5
    exact = y ** (n + 1) / (n + 1) + b * y ** (n + 2) / (n + 2)
    assert float(incomplete_exp_moment(n, b, np.array([y]))[0]) == pytest.approx(exact, rel=1e-12)
    with pytest.warns(CatastrophicCancellation):
        dnalpha_direct(n, b, y)


def test_A_zero_and_vasicek():
    assert eval_A(TABLE1, 0.05, 0.004, 5.0, 0.0) == 0.0
    co = DelayCoefficients(-1.0, (0.0,), (1.0,))
    a, s, T, k = 0.05, 0.004, 5.0, 1.0
    Bv = (1 - math.exp(-k * T)) / k
    theta = a / k
    # textbook log-price: A = (theta - s^2 / 2k^2)(B - T) - s^2 B^2 / 4k
    expect = (theta - s * s / (2 * k * k)) * (Bv - T) - s * s * Bv * Bv / (4 * k)
    assert eval_A(co, a, s, T, T) == pytest.approx(expect, rel=1e-12)


def test_A_refinement_agrees():
    coarse = eval_A(TABLE1, 0.05219, 0.00402, 2.0, 2.0, config=SeriesConfig(quadrature_nodes=16))
    fine = eval_A(TABLE1, 0.05219, 0.00402, 2.0, 2.0, config=SeriesConfig(quadrature_nodes=40))
    assert coarse == pytest.approx(fine, rel=1e-12)


def test_breakpoints_are_lags():
    co = DelayCoefficients(-1.0, (0.1, 0.1), (1.0, 1.5))
    pts = kernel_breakpoints(co, 3.0)
    assert np.allclose(pts, [0.0, 1.0, 1.5, 2.0, 2.5, 3.0])


def test_oracle_examples():
    co = DelayCoefficients(-1.0, (0.0,), (1.0,))
    sol = dde_oracle(co, lambda s: 0.0, 0.0, 2.0, x0=1.0)
    t = np.linspace(0, 2, 50)
    assert np.max(np.abs(sol(t) - np.exp(-t))) < 1e-10
    co = DelayCoefficients(0.0, (-1.0,), (1.0,))
    sol = dde_oracle(co, lambda s: 0.0, 0.0, 5.0, x0=1.0)
    t = np.linspace(0, 5, 500)
    assert np.max(np.abs(sol(t) - eval_R(co, t))) < 1e-8
    with pytest.raises(StepTooLarge):
        dde_oracle(co, 0.0, 0.0, 1.0, step=0.2)


def test_overflow_is_reported():
    co = DelayCoefficients(700.0, (1e200,), (0.5,))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(SeriesOverflow):
            eval_R(co, 2.0)
