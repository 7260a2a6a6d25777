"""Caplets on compounded overnight rates.

Extended bonds ``B*(t, T)`` equal ``B(t, T)`` before ``T`` and the money-market
ratio ``exp(int_T^t r)`` after it. Under the extended ``T``-forward measure
the bond ratio ``Y = B*(t, S) / B*(t, T)`` is a lognormal martingale with
total variance

    nu(t, ell) = int_t^ell sigma(u)^2 (D(S - u) - D(T - u))^2 du,

so caplets have a Black-type closed form. ``ell = S`` prices the
forward-looking caplet and ``ell = T`` the backward-looking one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.stats import norm

from . import quadrature
from .bonds import bond_price
from .exceptions import (
    InvalidStrike,
    MissingRealizedPath,
    NegativeForward,
    NegativeVariance,
)
from .series_kernel import DEFAULT_CONFIG, SeriesConfig, eval_D, kernel_breakpoints, layer_width
from .shortrate import ModelParams, PathSample, _rng

__all__ = [
    "CapletStyle",
    "CapletQuote",
    "RateState",
    "VolatilityProfile",
    "extended_bond",
    "backward_rate",
    "caplet_variance_nu",
    "caplet_variance_strip",
    "caplet_formula",
    "caplet_price",
    "simulate_Y_exact",
    "rate_from_psi",
    "volatility_decay_profile",
    "benchmark_price",
]


class CapletStyle(enum.Enum):
    FORWARD_LOOKING = "forward"
    BACKWARD_LOOKING = "backward"


@dataclass(frozen=True)
class CapletQuote:
    """Caplet on the rate compounded over ``[S, T]``.

    Attributes
    ----------
    S, T : float
        Accrual start and end.
    K : float
        Strike rate.
    price : float
        Market premium, or ``nan`` when unknown.
    Delta : float, optional
        Accrual fraction; defaults to ``T - S``.
    style : CapletStyle
    """

    S: float
    T: float
    K: float
    price: float = float("nan")
    Delta: float | None = None
    style: CapletStyle = CapletStyle.FORWARD_LOOKING

    def __post_init__(self):
        if self.Delta is None:
            object.__setattr__(self, "Delta", float(self.T - self.S))
        if not (self.T >= self.S >= 0.0):
            raise ValueError("need T >= S >= 0")
        if self.T > self.S and not self.Delta > 0:
            raise ValueError("Delta must be positive")
        if self.Delta > 0 and self.K_hat <= 0:
            raise InvalidStrike(f"1 + K*Delta = {self.K_hat} is not positive")

    @property
    def K_hat(self) -> float:
        return 1.0 + self.K * self.Delta

    @property
    def fixing(self) -> float:
        """Time at which the payoff is known (``S`` or ``T``)."""
        return self.S if self.style is CapletStyle.FORWARD_LOOKING else self.T


@dataclass(frozen=True)
class RateState:
    """Bond ratio ``Y`` and the backward-looking rate ``R = (Y - 1)/Delta``."""

    Y: float
    R: float


def extended_bond(model: ModelParams, history, t: float, T: float, path: PathSample | None = None,
                  config: SeriesConfig = DEFAULT_CONFIG) -> float:
    """Extended zero-coupon bond ``B*(t, T)``.

    For ``t <= T`` this is the bond price; for ``t > T`` it is
    ``exp(int_T^t r du)`` on the realized ``path`` (trapezoid rule).

    Raises
    ------
    MissingRealizedPath
        When ``t > T`` and no path is given.
    """
    if t == T:
        return 1.0
    if t < T:
        return bond_price(model, history, t, T, config)
    if path is None:
        raise MissingRealizedPath("a realized path is needed after maturity")
    if path.start > T + 1e-12 or path.end < t - 1e-12:
        raise MissingRealizedPath(f"path must cover [{T}, {t}]")
    return math.exp(path.integrate(lambda u: np.ones_like(u), T, t))


def backward_rate(model: ModelParams, history, t: float, quote: CapletQuote, path: PathSample | None = None,
                  config: SeriesConfig = DEFAULT_CONFIG) -> RateState:
    """Bond ratio and backward-looking rate seen at ``t``."""
    if t >= quote.T:
        if path is None:
            raise MissingRealizedPath("a realized path is needed after the accrual end")
        Y = math.exp(path.integrate(lambda u: np.ones_like(u), quote.S, quote.T))
    else:
        hist_T = history if t < quote.S or path is None else path
        Y = extended_bond(model, history, t, quote.S, path, config) / bond_price(model, hist_T, t, quote.T, config)
    return RateState(Y, (Y - 1.0) / quote.Delta)


def _nu_integrand(model: ModelParams, quote: CapletQuote, config: SeriesConfig):
    coeffs = model.coeffs

    def g2(u):
        d = eval_D(coeffs, quote.S - u, 0.0, -1.0, config) - eval_D(coeffs, quote.T - u, 0.0, -1.0, config)
        s = model.sigma(u)
        return s * s * d * d

    return g2


def _nu_breakpoints(model: ModelParams, quote: CapletQuote, lo: float, hi: float, config: SeriesConfig):
    lags = kernel_breakpoints(model.coeffs, max(quote.T - lo, 0.0), config)
    pts = np.concatenate([quote.S - lags, quote.T - lags, np.asarray(model.sigma.breaks, dtype=float)])
    return pts[(pts > lo) & (pts < hi)]


def caplet_variance_nu(model: ModelParams, t: float, ell: float, quote: CapletQuote,
                       config: SeriesConfig = DEFAULT_CONFIG) -> float:
    """Total log-variance ``nu(t, ell)`` of the bond ratio.

    Breakpoint-aligned Gauss-Legendre quadrature of
    ``sigma(u)^2 (D(S-u) - D(T-u))^2`` over ``[t, ell]``. Zero when
    ``t = ell`` or ``S = T``.
    """
    if ell < t:
        raise ValueError("need t <= ell")
    if ell == t or quote.T == quote.S:
        return 0.0
    hi = min(ell, quote.T)  # integrand vanishes after T
    if hi <= t:
        return 0.0
    pts = _nu_breakpoints(model, quote, t, hi, config)
    val = quadrature.integrate(_nu_integrand(model, quote, config), t, hi, pts, layer_width(model.coeffs),
                               config.quadrature_nodes)
    val = float(val)
    if val < 0:
        raise NegativeVariance(f"nu = {val}")
    return val


def caplet_variance_strip(model: ModelParams, starts, Delta: float,
                          config: SeriesConfig = DEFAULT_CONFIG) -> np.ndarray:
    """``nu(0, S)`` for forward-looking caplets on ``[S, S + Delta]`` at many ``S``.

    With ``t = 0``, ``ell = S`` and constant ``sigma`` the substitution
    ``v = S - u`` gives ``nu = sigma^2 int_0^S (D(v) - D(v + Delta))^2 dv``,
    so one integrand serves every start date and the strip is a cumulative
    sum over panels whose edges include all ``S``.
    """
    if not model.sigma.is_constant:
        raise ValueError("the strip evaluator assumes constant sigma")
    starts = np.asarray(starts, dtype=float)
    if starts.size == 0:
        return np.zeros(0)
    if np.any(starts < 0) or Delta < 0:
        raise ValueError("need S >= 0 and Delta >= 0")
    s_max = float(starts.max())
    if s_max == 0.0 or Delta == 0.0:
        return np.zeros_like(starts)
    lags = kernel_breakpoints(model.coeffs, s_max + Delta, config)
    pts = np.concatenate([lags, lags - Delta, starts])
    edges = quadrature.panel_edges(0.0, s_max, pts, layer_width(model.coeffs))
    u, w = quadrature.nodes_on(edges, config.quadrature_nodes)
    d = eval_D(model.coeffs, u, 0.0, -1.0, config) - eval_D(model.coeffs, u + Delta, 0.0, -1.0, config)
    panel = (w * d * d).reshape(edges.size - 1, -1).sum(axis=1)
    cum = np.concatenate(([0.0], np.cumsum(panel)))
    idx = np.searchsorted(edges, starts)
    sigma = float(model.sigma(0.0))
    out = sigma * sigma * cum[idx]
    if np.any(out < 0):
        raise NegativeVariance("negative strip variance")
    return out


def caplet_formula(discount: float, Y: float, K_hat: float, nu: float) -> float:
    """``discount * (Y N(d+) - K_hat N(d-))`` with ``d = [ln(Y/K_hat) +- nu/2]/sqrt(nu)``.

    Returns the intrinsic value ``discount * max(Y - K_hat, 0)`` when
    ``nu = 0``.
    """
    if K_hat <= 0:
        raise InvalidStrike(f"K_hat = {K_hat}")
    if nu < 0:
        raise NegativeVariance(f"nu = {nu}")
    if nu == 0.0:
        return discount * max(Y - K_hat, 0.0)
    sq = math.sqrt(nu)
    d_plus = (math.log(Y / K_hat) + 0.5 * nu) / sq
    return discount * (Y * norm.cdf(d_plus) - K_hat * norm.cdf(d_plus - sq))


def caplet_price(model: ModelParams, history, t: float, quote: CapletQuote, ell: float | None = None,
                 config: SeriesConfig = DEFAULT_CONFIG) -> float:
    """Caplet price at ``t`` per unit notional.

    ``ell`` defaults to the quote's fixing time (``S`` for forward-looking,
    ``T`` for backward-looking). ``Y`` and ``B(t, T)`` come from the model
    bonds on ``history``.
    """
    ell = quote.fixing if ell is None else ell
    if not (t <= ell <= quote.T and ell >= quote.S):
        raise ValueError("need t <= ell <= T and ell >= S")
    state = backward_rate(model, history, t, quote, config=config)
    disc = bond_price(model, history, t, quote.T, config)
    nu = caplet_variance_nu(model, t, ell, quote, config)
    return caplet_formula(disc, state.Y, quote.K_hat, nu)


def simulate_Y_exact(model: ModelParams, quote: CapletQuote, t: float, ell: float, n_samples: int, seed: int,
                     Y_t: float, config: SeriesConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Exact draws of ``Y(ell)`` under the extended ``T``-forward measure.

    ``Y(ell) = Y(t) exp(-nu/2 + sqrt(nu) Z)`` with ``Z`` standard normal.
    """
    nu = caplet_variance_nu(model, t, ell, quote, config)
    z = _rng(seed).standard_normal(int(n_samples))
    return Y_t * np.exp(-0.5 * nu + math.sqrt(nu) * z)


def rate_from_psi(R0: float, Delta: float, g: np.ndarray, dW: np.ndarray, dt: float) -> np.ndarray:
    """Backward rate along a discretised path from its ``psi`` factorisation.

    ``psi_t = exp(int g dW - int g^2/2 du)`` and
    ``R_t = R_0 psi_t - psi_t int g^2 / (Delta psi) du + psi_t int g / (Delta psi) dW``,
    with left-point (Ito) sums. ``g`` holds the volatility at the left end
    of each step.
    """
    g = np.asarray(g, dtype=float)
    dW = np.asarray(dW, dtype=float)
    log_psi = np.concatenate(([0.0], np.cumsum(g * dW - 0.5 * g * g * dt)))
    psi = np.exp(log_psi)
    inv = 1.0 / (Delta * psi[:-1])
    drift = np.concatenate(([0.0], np.cumsum(inv * g * g * dt)))
    noise = np.concatenate(([0.0], np.cumsum(inv * g * dW)))
    return R0 * psi - psi * drift + psi * noise


@dataclass(frozen=True)
class VolatilityProfile:
    """Samples of ``g(u) = sigma(u) (D(S-u) - D(T-u))``.

    ``monotone`` is ``True`` or ``False`` when the sign hypothesis on the
    coefficients holds (all ``c_j >= 0``) and ``None`` otherwise.
    """

    grid: np.ndarray
    values: np.ndarray
    monotone: bool | None


def volatility_decay_profile(model: ModelParams, quote: CapletQuote, grid, config: SeriesConfig = DEFAULT_CONFIG) -> VolatilityProfile:
    """Volatility of ``ln Y`` as a function of time.

    It vanishes from ``T`` on. With constant ``sigma`` and every ``c_j >= 0``
    all weights ``c^alpha`` are non-negative, ``R >= 0`` and ``|g|`` decays on
    ``[S, T]``; the profile reports whether that holds on the grid.
    """
    grid = np.asarray(grid, dtype=float)
    coeffs = model.coeffs
    d = eval_D(coeffs, quote.S - grid, 0.0, -1.0, config) - eval_D(coeffs, quote.T - grid, 0.0, -1.0, config)
    g = model.sigma(grid) * d
    g = np.where(grid >= quote.T, 0.0, g)
    monotone = None
    if model.sigma.is_constant and all(c >= 0 for c in coeffs.c):
        inside = np.abs(g[(grid >= quote.S) & (grid <= quote.T)])
        monotone = bool(np.all(np.diff(inside) <= 1e-15 * max(1.0, inside.max(initial=0.0))))
    return VolatilityProfile(grid, g, monotone)


def benchmark_price(kind: str, params: Mapping[str, float], quote: CapletQuote, discount: float, forward: float,
                    t: float = 0.0, config: SeriesConfig = DEFAULT_CONFIG) -> float:
    """Reference caplet prices per unit notional.

    Parameters
    ----------
    kind : {"bachelier", "black", "vasicek"}
    params : mapping
        ``sigma`` for every kind, plus ``b`` for the Vasicek kind.
    quote : CapletQuote
    discount : float
        ``B(t, T)``.
    forward : float
        Simple forward rate ``(Y - 1)/Delta`` over the accrual period.

    Notes
    -----
    Bachelier and Black use the option expiry ``fixing - t``. The Vasicek
    kind is :func:`caplet_formula` with ``nu`` from a delay-free model, the
    same code path as the delayed model with ``c = 0``.
    """
    if not discount > 0:
        raise ValueError("discount must be positive")
    kind = kind.lower()
    sigma = float(params["sigma"])
    expiry = max(quote.fixing - t, 0.0)
    D = quote.Delta
    intrinsic = discount * D * max(forward - quote.K, 0.0)
    if kind == "bachelier":
        s = abs(sigma) * math.sqrt(expiry)
        if s == 0.0:
            return intrinsic
        d = (forward - quote.K) / s
        return discount * D * ((forward - quote.K) * norm.cdf(d) + s * norm.pdf(d))
    if kind == "black":
        if forward <= 0:
            raise NegativeForward(f"forward {forward} is not positive")
        s = abs(sigma) * math.sqrt(expiry)
        if s == 0.0 or quote.K <= 0:
            return intrinsic if s == 0.0 else discount * D * (forward - quote.K)
        d1 = (math.log(forward / quote.K) + 0.5 * s * s) / s
        return discount * D * (forward * norm.cdf(d1) - quote.K * norm.cdf(d1 - s))
    if kind == "vasicek":
        if sigma == 0.0:
            return intrinsic
        model = ModelParams.from_values(0.0, float(params["b"]), [0.0], [1.0], abs(sigma))
        nu = caplet_variance_nu(model, t, quote.fixing, quote, config)
        return caplet_formula(discount, 1.0 + forward * D, quote.K_hat, nu)
    raise ValueError(f"unknown benchmark kind {kind!r}")
