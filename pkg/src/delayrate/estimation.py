"""Estimation of the short-rate parameters from an observed series.

Over one observation step ``dt`` the exact transition reads

    r_i = e^{b dt} r_{i-1} + a W(b) + sum_j c_j int e^{b(t_i - s)} r_{s - tau_j} ds + noise,

with ``W(b) = (e^{b dt} - 1) / b``. Replacing the delay integrals by the
trapezoid rule makes the model linear in ``(a W, e^{b dt}, c)`` once the
weights ``e^{b(t_i - s)}`` are fixed, so the fit is ordinary least squares
done in two stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal, stats

from .exceptions import SingularDesign, TooShort
from .shortrate import ModelParams, PathSample

__all__ = [
    "DelayCandidateSet",
    "EstimationResult",
    "LjungBoxResult",
    "select_delays",
    "fit_transition",
    "ljung_box",
    "incremental_delay_sweep",
    "one_step_mean",
]

_LOW_POWER_RATIO = 4.0
_NULL_LEVEL = 0.95


def _null_peak_ratio(m: int, level: float = _NULL_LEVEL) -> float:
    """Quantile of max/median over ``m`` white-noise periodogram ordinates.

    Ordinates are iid exponential under the null, so the peak has CDF
    ``(1 - e^{-x})^m`` in units of the mean and the median is ``ln 2``.
    """
    q = -math.log1p(-(level ** (1.0 / max(m, 1))))
    return max(_LOW_POWER_RATIO, q / math.log(2.0))
_COND_LIMIT = 1e12
_MAX_REWEIGHT = 50


@dataclass(frozen=True)
class DelayCandidateSet:
    """Candidate delays in descending order of periodogram power.

    ``low_power`` is set when the strongest peak over the median power does
    not exceed the 95% quantile of that ratio under white noise (never below
    four), so the peak is indistinguishable from noise.
    """

    delays: tuple[float, ...]
    powers: tuple[float, ...] = ()
    low_power: bool = False

    def __len__(self) -> int:
        return len(self.delays)


@dataclass(frozen=True)
class LjungBoxResult:
    statistic: float
    pvalue: float
    degenerate: bool = False


@dataclass
class EstimationResult:
    """Fitted parameters with 95% confidence intervals.

    Attributes
    ----------
    params : ModelParams
    mse : float
        Mean squared one-step prediction error.
    residuals : ndarray
        Standardised one-step residuals.
    lb_pvalue : float
        Ljung-Box p-value at lag 1.
    ci : dict
        ``name -> (low, high)`` for ``a``, ``b``, ``c1..cN`` and ``sigma``.
    stderr : dict
        Standard errors on the same keys.
    """

    params: ModelParams
    mse: float
    residuals: np.ndarray = field(repr=False)
    lb_pvalue: float
    ci: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)
    n_obs: int = 0

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "mse": self.mse,
            "lb_pvalue": self.lb_pvalue,
            "ci": {k: list(v) for k, v in self.ci.items()},
            "stderr": dict(self.stderr),
            "n_obs": self.n_obs,
        }


def _values(series) -> tuple[np.ndarray, float]:
    if isinstance(series, PathSample):
        return np.asarray(series.values, dtype=float), float(series.dt)
    arr, dt = series
    return np.asarray(arr, dtype=float), float(dt)


def select_delays(series, max_candidates: int = 5) -> DelayCandidateSet:
    """Nominate delays from the periodogram of the de-meaned series.

    Peaks are strict local maxima above the median power; their periods
    ``1/f`` are returned by descending power. Periods not longer than the
    sampling step are dropped.

    Parameters
    ----------
    series : PathSample or (values, dt)
    max_candidates : int

    Raises
    ------
    TooShort
        With fewer than 64 observations.
    """
    x, dt = _values(series)
    if x.size < 64:
        raise TooShort("periodogram needs at least 64 observations")
    freqs, power = signal.periodogram(x - x.mean(), fs=1.0 / dt, detrend=False)
    freqs, power = freqs[1:], power[1:]
    if not np.any(power > 1e-30 * max(1.0, float(np.max(np.abs(x))) ** 2)):
        return DelayCandidateSet(())
    median = float(np.median(power))
    peaks, _ = signal.find_peaks(power, height=median, distance=1)
    peaks = peaks[1.0 / freqs[peaks] > dt]
    order = peaks[np.argsort(power[peaks], kind="stable")[::-1]][: int(max_candidates)]
    low = bool(order.size == 0 or power[order[0]] < _null_peak_ratio(power.size) * median)
    return DelayCandidateSet(tuple(float(1.0 / freqs[k]) for k in order), tuple(float(power[k]) for k in order), low)


def _weight_integral(b: float, dt: float, factor: float = 1.0) -> float:
    """``int_0^dt exp(factor * b * u) du``."""
    x = factor * b * dt
    return dt if abs(x) < 1e-12 else dt * math.expm1(x) / x


def _design(x: np.ndarray, lags: Sequence[int], b: float, dt: float, start: int):
    idx = np.arange(start, x.size)
    e = math.exp(b * dt)
    cols = [np.ones(idx.size), x[idx - 1]]
    for m in lags:
        cols.append(0.5 * dt * (e * x[idx - 1 - m] + x[idx - m]))
    return np.column_stack(cols), x[idx]


def one_step_mean(model: ModelParams, series, first_index: int | None = None) -> np.ndarray:
    """Predicted ``r_i`` given the past, for ``i >= first_index``.

    Uses the same trapezoid transition as the fit; delays with ``c_j = 0``
    are skipped.
    """
    x, dt = _values(series)
    lags = [int(round(t / dt)) for c, t in zip(model.c, model.tau) if c != 0.0]
    cs = [c for c in model.c if c != 0.0]
    start = max(lags, default=0) + 1 if first_index is None else int(first_index)
    if start < max(lags, default=0) + 1 or start >= x.size:
        raise ValueError("first_index out of range")
    b = model.b
    X, _ = _design(x, lags, b, dt, start)
    beta = np.array([float(model.a(0.0)) * _weight_integral(b, dt), math.exp(b * dt), *cs])
    return X @ beta


def _ols(X: np.ndarray, y: np.ndarray):
    if X.shape[0] <= X.shape[1]:
        raise TooShort("not enough observations for the regression")
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    if np.linalg.cond(X / scale) > _COND_LIMIT:
        raise SingularDesign("regressors are collinear")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = X.shape[0] - X.shape[1]
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    return beta, resid, cov, dof


def fit_transition(series, delays: Sequence[float] = (), first_index: int | None = None,
                   n_bootstrap: int = 0, seed: int = 0) -> EstimationResult:
    """Two-stage least-squares fit of ``(a, b, c, sigma)``.

    Stage one regresses ``r_i`` on ``r_{i-1}`` alone to get a starting
    ``b``; stage two adds the trapezoid delay regressors with weights at that
    ``b`` and is re-solved with updated weights until ``b`` is stationary. Intervals are 95% Wald intervals, mapped from
    the regression coefficients by the delta method; the ``sigma`` interval
    uses the chi-square law of the residual variance.

    Parameters
    ----------
    series : PathSample or (values, dt)
        Equally spaced observations.
    delays : sequence of float
        Each delay must be at least one step; it is rounded to whole steps.
    first_index : int, optional
        First observation used as a response. Defaults to the earliest one
        whose delayed values are all observed; nested comparisons pass a
        common value.
    n_bootstrap : int
        When positive, refit on this many series simulated from the fit
        (parametric bootstrap, same length, same starting window). Point
        estimates are bias corrected and intervals become
        ``theta +- 1.96 sd*`` with the bootstrap standard deviation, which
        stays honest when the autoregressive root is close to one and the
        Wald intervals undercover.
    seed : int
        Seed of the bootstrap simulations.

    Raises
    ------
    SingularDesign
        If the design matrix is numerically rank deficient.
    """
    fit = _fit(series, delays, first_index)
    if n_bootstrap > 0:
        fit = _debias(fit, series, delays, first_index, int(n_bootstrap), seed)
    return fit


def _fit(series, delays, first_index) -> EstimationResult:
    x, dt = _values(series)
    lags = []
    for tau in delays:
        m = int(round(tau / dt))
        if m < 1:
            raise ValueError(f"delay {tau} is shorter than the sampling step")
        lags.append(m)
    start = max(lags, default=0) + 1
    if first_index is not None:
        if first_index < start:
            raise ValueError(f"first_index must be at least {start}")
        start = int(first_index)
    if x.size < start + 12:
        raise TooShort("series shorter than the delay window")
    X0, y0 = _design(x, [], 0.0, dt, start)
    beta0, *_ = _ols(X0, y0)
    b = math.log(beta0[1]) / dt if beta0[1] > 0 else 0.0
    # the delay weights depend on b; repeat until b settles
    for _ in range(_MAX_REWEIGHT):
        X, y = _design(x, lags, b, dt, start)
        beta, resid, cov, dof = _ols(X, y)
        rho = beta[1]
        if rho <= 0:
            raise SingularDesign("autoregressive coefficient is not positive")
        b_new = math.log(rho) / dt
        done = abs(b_new - b) <= 1e-12 * max(1.0, abs(b)) or not lags
        b = b_new
        if done:
            break
    w = _weight_integral(b, dt)
    a = beta[0] / w
    # gradients of b and a = beta0 / W(b) with respect to (beta0, rho)
    db_drho = 1.0 / (rho * dt)
    dw_db = (dt * rho - w) / b if abs(b) > 1e-12 else 0.5 * dt * dt
    grad_a = np.zeros(len(beta))
    grad_a[0] = 1.0 / w
    grad_a[1] = -beta[0] / (w * w) * dw_db * db_drho
    se_a = math.sqrt(max(float(grad_a @ cov @ grad_a), 0.0))
    se_b = math.sqrt(cov[1, 1]) * db_drho
    s2 = float(resid @ resid) / dof
    sigma = math.sqrt(s2 / _weight_integral(b, dt, 2.0))
    z = stats.norm.ppf(0.975)
    ci = {"a": (a - z * se_a, a + z * se_a), "b": (b - z * se_b, b + z * se_b)}
    stderr = {"a": se_a, "b": se_b}
    cs = []
    for j in range(len(lags)):
        c = float(beta[2 + j])
        se = math.sqrt(cov[2 + j, 2 + j])
        cs.append(c)
        ci[f"c{j + 1}"] = (c - z * se, c + z * se)
        stderr[f"c{j + 1}"] = se
    chi_lo, chi_hi = stats.chi2.ppf([0.975, 0.025], dof)
    ci["sigma"] = (sigma * math.sqrt(dof / chi_lo), sigma * math.sqrt(dof / chi_hi))
    stderr["sigma"] = sigma / math.sqrt(2.0 * dof)
    taus = [m * dt for m in lags]
    if not lags:
        cs, taus = [0.0], [dt]
    model = ModelParams.from_values(a, b, cs, taus, sigma if sigma > 0 else 1e-300)
    std_resid = resid / math.sqrt(s2) if s2 > 0 else np.zeros_like(resid)
    lb = ljung_box(std_resid, 1) if resid.size > 10 else LjungBoxResult(float("nan"), 1.0, True)
    return EstimationResult(model, float(np.mean(resid * resid)), std_resid, lb.pvalue, ci, stderr, int(y.size))


def _estimates(fit: EstimationResult, n_delays: int) -> np.ndarray:
    p = fit.params
    cs = list(p.c)[:n_delays]
    return np.array([float(p.a(0.0)), p.b, *cs, float(p.sigma(0.0))])


def _debias(fit: EstimationResult, series, delays, first_index, n_boot: int, seed: int) -> EstimationResult:
    from .shortrate import InitialCurve, simulate_paths

    x, dt = _values(series)
    k = len(delays)
    lags = [int(round(t / dt)) for t in delays]
    m = max(lags, default=1)
    model = fit.params
    if k == 0:
        model = ModelParams.from_values(float(model.a(0.0)), model.b, [0.0], [m * dt], float(model.sigma(0.0)))
    window = x[: m + 1]
    phi = InitialCurve(dt * (np.arange(m + 1) - m), window)
    sim = simulate_paths(model, phi, None, (x.size - m - 1) * dt, dt, n_boot, seed)
    names = ["a", "b", *[f"c{j + 1}" for j in range(k)], "sigma"]
    boot = []
    for path in sim.rates:
        try:
            refit = _fit((np.concatenate((window[:-1], path)), dt), delays, first_index)
        except (SingularDesign, TooShort, ValueError):
            continue
        boot.append(_estimates(refit, k))
    if len(boot) < 2:
        return fit
    boot = np.asarray(boot)
    est = _estimates(fit, k)
    new = 2.0 * est - boot.mean(axis=0)
    sd = boot.std(axis=0, ddof=1)
    z = stats.norm.ppf(0.975)
    ci = {n: (new[i] - z * sd[i], new[i] + z * sd[i]) for i, n in enumerate(names)}
    stderr = {n: float(sd[i]) for i, n in enumerate(names)}
    a, b, *cs, sigma = new
    taus = list(fit.params.tau) if k else [dt]
    params = ModelParams.from_values(a, b, cs if k else [0.0], taus, max(sigma, 1e-300))
    return EstimationResult(params, fit.mse, fit.residuals, fit.lb_pvalue, ci, stderr, fit.n_obs)


def ljung_box(residuals, lag: int = 1) -> LjungBoxResult:
    """Ljung-Box portmanteau test.

    ``Q = n(n+2) sum_{k<=lag} rho_k^2 / (n-k)`` against a chi-square law with
    ``lag`` degrees of freedom. An all-constant input is flagged degenerate
    and given ``p = 1``.

    Raises
    ------
    TooShort
        Unless there are more than ``10 * lag`` residuals.
    """
    e = np.asarray(residuals, dtype=float)
    if lag < 1:
        raise ValueError("lag must be at least 1")
    n = e.size
    if n <= 10 * lag:
        raise TooShort(f"need more than {10 * lag} residuals")
    e = e - e.mean()
    denom = float(e @ e)
    if denom <= 1e-300:
        return LjungBoxResult(0.0, 1.0, True)
    q = 0.0
    for k in range(1, lag + 1):
        rho = float(e[k:] @ e[:-k]) / denom
        q += rho * rho / (n - k)
    q *= n * (n + 2)
    return LjungBoxResult(q, float(stats.chi2.sf(q, lag)))


def incremental_delay_sweep(series, candidates: DelayCandidateSet | Sequence[float]) -> list[EstimationResult]:
    """Fits with the first ``0, 1, 2, ...`` candidate delays.

    All fits share the response sample of the largest delay, so their
    in-sample errors are nested least-squares problems.
    """
    delays = list(candidates.delays if isinstance(candidates, DelayCandidateSet) else candidates)
    _, dt = _values(series)
    first = max((int(round(t / dt)) for t in delays), default=0) + 1
    return [fit_transition(series, delays[:k], first) for k in range(len(delays) + 1)]
