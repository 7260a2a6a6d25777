"""scikit-learn style wrappers around the calibration and estimation routines.

The wrappers follow the estimator conventions: constructor arguments are
stored unchanged, ``fit`` returns ``self`` and sets trailing-underscore
attributes, and ``predict`` checks that the estimator was fitted.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from .bonds import bond_prices
from .estimation import fit_transition, one_step_mean
from .marketfit import (
    CapletSet,
    NelsonSiegelForward,
    YieldCurve,
    calibrate_bonds,
    calibrate_caplets,
    caplet_model_prices,
    implied_phi,
)
from .rfr_caplets import CapletQuote
from .shortrate import ModelParams

__all__ = ["BondCurveCalibrator", "CapletCalibrator", "DelayRegressionEstimator"]


def _column(X, name: str = "X") -> np.ndarray:
    X = check_array(X, ensure_2d=False, dtype=float, input_name=name)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ValueError(f"{name} must have a single column")
        X = X[:, 0]
    return X


class BondCurveCalibrator(RegressorMixin, BaseEstimator):
    """Fit the one-delay model to a spot yield curve.

    ``X`` holds maturities and ``y`` continuously compounded yields.
    ``predict`` returns model bond prices ``B(0, T)`` with the implied
    initial curve installed.

    Parameters
    ----------
    tau1 : float
    init : ModelParams, optional
        Start point; defaults to ``a=0.05, b=-1, c1=-0.2, sigma=0.005``.
    n_starts, seed, maxiter
        Passed to :func:`~delayrate.marketfit.calibrate_bonds`.
    """

    def __init__(self, tau1: float = 1.0, init=None, n_starts: int = 8, seed: int = 0, maxiter: int = 400):
        self.tau1 = tau1
        self.init = init
        self.n_starts = n_starts
        self.seed = seed
        self.maxiter = maxiter

    def fit(self, X, y):
        T = _column(X)
        y = _column(y, "y")
        check_consistent_length(T, y)
        order = np.argsort(T)
        self.curve_ = YieldCurve(T[order], y[order])
        init = self.init or ModelParams.from_values(0.05, -1.0, [-0.2], [self.tau1], 0.005)
        init = ModelParams.from_values(float(init.a(0.0)), init.b, [init.c[0]], [self.tau1], float(init.sigma(0.0)))
        self.result_ = calibrate_bonds(self.curve_, self.tau1, init, self.n_starts, self.seed, maxiter=self.maxiter)
        self.params_ = self.result_.params
        self.phi_ = implied_phi(self.curve_, self.params_)
        self.objective_ = self.result_.objective
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return bond_prices(self.params_, self.phi_, _column(X))


def _quotes(X, delta: float, y=None) -> list[CapletQuote]:
    X = check_array(X, dtype=float)
    if X.shape[1] != 2:
        raise ValueError("X must have columns (expiry, strike)")
    prices = np.full(X.shape[0], np.nan) if y is None else _column(y, "y")
    check_consistent_length(X, prices)
    return [CapletQuote(S=T - delta, T=T, K=K, price=p, Delta=delta) for (T, K), p in zip(X, prices)]


class CapletCalibrator(RegressorMixin, BaseEstimator):
    """Fit a caplet model to quotes.

    ``X`` has columns ``(expiry, strike)`` where the expiry is the accrual
    end; ``y`` holds prices per ``notional``.

    Parameters
    ----------
    curve : YieldCurve or NelsonSiegelForward
    kind : {"proposed", "bachelier", "black", "vasicek"}
    delta : float
        Accrual length.
    Other parameters are passed to :func:`~delayrate.marketfit.calibrate_caplets`.
    """

    def __init__(self, curve=None, kind: str = "proposed", init=None, free_curve=None, tau_grid=None,
                 delta: float = 0.25, maxfev: int = 3000, notional: float = 100.0):
        self.curve = curve
        self.kind = kind
        self.init = init
        self.free_curve = free_curve
        self.tau_grid = tau_grid
        self.delta = delta
        self.maxfev = maxfev
        self.notional = notional

    def fit(self, X, y):
        if self.curve is None:
            raise ValueError("a bond curve is required")
        quotes = _quotes(X, self.delta, y)
        self.result_ = calibrate_caplets(quotes, self.curve, self.kind, self.init, self.free_curve, self.tau_grid,
                                         maxfev=self.maxfev, notional=self.notional)
        self.curve_ = self.result_.extra["curve"]
        self.params_ = self.result_.params if self.kind == "proposed" else self.result_.extra["benchmark_params"]
        self.objective_ = self.result_.objective
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        q = CapletSet.from_quotes(_quotes(X, self.delta))
        return caplet_model_prices(self.kind, self.params_, q, self.curve_, self.notional)


class DelayRegressionEstimator(BaseEstimator):
    """Two-stage regression estimator for an equally spaced rate series.

    ``fit(X)`` takes the series as a single column. ``predict(X)`` returns
    one-step-ahead means for every observation after the delay window and
    ``transform(X)`` the corresponding residuals.
    """

    def __init__(self, delays=(), dt: float = 1.0, n_bootstrap: int = 0, seed: int = 0):
        self.delays = delays
        self.dt = dt
        self.n_bootstrap = n_bootstrap
        self.seed = seed

    def fit(self, X, y=None):
        x = _column(X)
        self.result_ = fit_transition((x, self.dt), tuple(self.delays), n_bootstrap=self.n_bootstrap, seed=self.seed)
        self.params_ = self.result_.params
        self.ci_ = self.result_.ci
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return one_step_mean(self.params_, (_column(X), self.dt))

    def transform(self, X) -> np.ndarray:
        x = _column(X)
        pred = self.predict(x)
        return x[x.size - pred.size:] - pred
