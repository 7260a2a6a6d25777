"""Yield curves, the implied initial curve and calibration to market data.

With one delay the drift on ``[0, tau]`` is ``a + c phi(t - tau) + b r``,
a Hull-White drift with known ``theta``. Choosing ``phi`` so that ``theta``
matches the market forward curve reprices every bond up to ``tau`` exactly;
the remaining parameters are fitted to longer maturities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import least_squares, minimize
from scipy.stats import norm, qmc

from .bonds import bond_price, bond_prices
from .exceptions import CurveTooShort, DegenerateC, InvalidStrike, NegativeForward, OptimizerDiverged, OutOfRange
from .rfr_caplets import CapletQuote, CapletStyle, caplet_variance_nu, caplet_variance_strip
from .series_kernel import DEFAULT_CONFIG, SeriesConfig
from .shortrate import InitialCurve, ModelParams

__all__ = [
    "YieldCurve",
    "SvenssonCurve",
    "CalibrationResult",
    "market_forward",
    "implied_phi",
    "bond_objective",
    "calibrate_bonds",
    "nelder_mead_restarts",
    "NelsonSiegelForward",
    "CapletSet",
    "caplet_model_prices",
    "relative_sse",
    "caplet_objective",
    "calibrate_caplets",
    "default_tau_grid",
]


@dataclass(frozen=True)
class YieldCurve:
    """Continuously compounded spot yields with monotone cubic interpolation.

    Below the first maturity the yield is extended linearly with the slope
    at that knot, which keeps the forward curve continuous; beyond the last
    maturity the curve is undefined.
    """

    maturities: np.ndarray
    yields: np.ndarray
    interpolation: str = "pchip"
    _spline: PchipInterpolator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.maturities, dtype=float)
        y = np.asarray(self.yields, dtype=float)
        if m.ndim != 1 or m.shape != y.shape or m.size < 2:
            raise ValueError("maturities and yields must be matching 1-d arrays of length >= 2")
        if not m[0] > 0 or np.any(np.diff(m) <= 0):
            raise ValueError("maturities must be positive and strictly increasing")
        if not np.all(np.isfinite(y)):
            raise ValueError("yields must be finite")
        if self.interpolation != "pchip":
            raise ValueError("only 'pchip' interpolation is supported")
        m.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "maturities", m)
        object.__setattr__(self, "yields", y)
        object.__setattr__(self, "_spline", PchipInterpolator(m, y, extrapolate=False))

    @classmethod
    def from_discounts(cls, maturities, discounts) -> "YieldCurve":
        m = np.asarray(maturities, dtype=float)
        return cls(m, -np.log(np.asarray(discounts, dtype=float)) / m)

    @property
    def max_maturity(self) -> float:
        return float(self.maturities[-1])

    def _check(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if np.any(s > self.max_maturity * (1 + 1e-12)) or np.any(s < 0):
            raise OutOfRange(f"curve covers [0, {self.max_maturity}]")
        return np.minimum(s, self.max_maturity)

    def _derivs(self, s):
        s = self._check(s)
        inside = s >= self.maturities[0]
        m0 = self.maturities[0]
        slope0 = float(self._spline(m0, 1))
        clipped = np.where(inside, s, m0)
        y = np.where(inside, self._spline(clipped), self.yields[0] + slope0 * (s - m0))
        dy = np.where(inside, self._spline(clipped, 1), slope0)
        d2y = np.where(inside, self._spline(clipped, 2), 0.0)
        return s, y, dy, d2y

    def yield_(self, s):
        return self._derivs(s)[1]

    def discount(self, T):
        s, y, _, _ = self._derivs(T)
        return np.exp(-y * s)

    def forward(self, s):
        """Instantaneous forward ``f(0, s) = y(s) + s y'(s)``."""
        s, y, dy, _ = self._derivs(s)
        return y + s * dy

    def forward_slope(self, s):
        """``d f(0, s) / ds = 2 y'(s) + s y''(s)`` from the interpolant."""
        s, _, dy, d2y = self._derivs(s)
        return 2.0 * dy + s * d2y

    @property
    def kinks(self) -> np.ndarray:
        """Points where the forward slope may jump."""
        return self.maturities


@dataclass(frozen=True)
class SvenssonCurve:
    """Nelson-Siegel-Svensson forward curve on ``[0, max_maturity]``.

    ``f(s) = beta0 + beta1 e^{-x1} + beta2 x1 e^{-x1} + beta3 x2 e^{-x2}``
    with ``x_i = s / lam_i``. Exposes the same accessors as
    :class:`YieldCurve`, so it can stand in for it wherever a smooth
    market curve is wanted.
    """

    beta0: float
    beta1: float
    beta2: float
    beta3: float
    lam1: float
    lam2: float
    maturities: np.ndarray = field(default_factory=lambda: np.array([30.0]))
    interpolation: str = "svensson"

    def __post_init__(self):
        if not (self.lam1 > 0 and self.lam2 > 0):
            raise ValueError("lam1 and lam2 must be positive")
        m = np.asarray(self.maturities, dtype=float)
        if m.ndim != 1 or m.size == 0 or np.any(m <= 0):
            raise ValueError("maturities must be positive")
        object.__setattr__(self, "maturities", m)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2, self.beta3, self.lam1, self.lam2])

    @property
    def max_maturity(self) -> float:
        return float(self.maturities[-1])

    @property
    def kinks(self) -> np.ndarray:
        return np.zeros(0)

    def _check(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if np.any(s < 0) or np.any(s > self.max_maturity * (1 + 1e-12)):
            raise OutOfRange(f"curve covers [0, {self.max_maturity}]")
        return s

    @staticmethod
    def _yield(p, s):
        b0, b1, b2, b3, l1, l2 = p
        x1, x2 = s / l1, s / l2
        with np.errstate(invalid="ignore", divide="ignore"):
            g1 = np.where(x1 > 0, -np.expm1(-x1) / x1, 1.0)
            g2 = np.where(x2 > 0, -np.expm1(-x2) / x2, 1.0)
        return b0 + b1 * g1 + b2 * (g1 - np.exp(-x1)) + b3 * (g2 - np.exp(-x2))

    def yield_(self, s):
        return self._yield(self.params, self._check(s))

    def discount(self, T):
        T = self._check(T)
        return np.exp(-self._yield(self.params, T) * T)

    def forward(self, s):
        s = self._check(s)
        x1, x2 = s / self.lam1, s / self.lam2
        return self.beta0 + (self.beta1 + self.beta2 * x1) * np.exp(-x1) + self.beta3 * x2 * np.exp(-x2)

    def forward_slope(self, s):
        s = self._check(s)
        x1, x2 = s / self.lam1, s / self.lam2
        return ((self.beta2 * (1 - x1) - self.beta1) * np.exp(-x1) / self.lam1
                + self.beta3 * (1 - x2) * np.exp(-x2) / self.lam2)

    @classmethod
    def fit_discounts(cls, maturities, discounts, x0=None) -> "SvenssonCurve":
        """Least-squares fit to discount factors."""
        m = np.asarray(maturities, dtype=float)
        d = np.asarray(discounts, dtype=float)
        lo = [-1, -1, -1, -1, 0.05, 0.05]
        hi = [1, 1, 1, 1, 30, 30]
        starts = [x0] if x0 is not None else [
            [0.045, 0.01, -0.01, 0.01, l1, l2] for l1 in (0.5, 1.0, 2.0, 3.0) for l2 in (3.0, 5.0, 8.0, 12.0)
        ]
        best = None
        for x in starts:
            res = least_squares(lambda p: np.exp(-cls._yield(p, m) * m) - d, x, bounds=(lo, hi),
                                xtol=1e-15, ftol=1e-15)
            if best is None or res.cost < best.cost:
                best = res
        return cls(*best.x, maturities=m)


def market_forward(curve, s):
    """Market instantaneous forward rate ``f^M(0, s)``."""
    out = curve.forward(s)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class CalibrationResult:
    """Outcome of a calibration run.

    ``extra`` holds model-specific output such as benchmark parameters,
    fitted curve parameters or per-quote residuals.
    """

    params: ModelParams | None
    objective: float
    iterations: int
    converged: bool
    tau1: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.objective >= 0:
            raise ValueError("objective must be non-negative")


def _convexity(b: float, sigma: float, s):
    """``-sigma^2 / (2b) (1 - exp(2 b s))`` with its ``b -> 0`` limit."""
    s = np.asarray(s, dtype=float)
    if abs(b) * max(float(np.max(np.abs(s), initial=0.0)), 1.0) < 1e-8:
        return sigma * sigma * s
    return -sigma * sigma / (2.0 * b) * (-np.expm1(2.0 * b * s))


def implied_phi(curve, model: ModelParams, n_points: int = 257) -> InitialCurve:
    """Initial curve that reprices the market curve up to the delay.

    ``phi(s) = (nu(s + tau) - a) / c`` on ``[-tau, 0]`` with
    ``nu(s) = f'(s) - b f(s) - sigma^2 / (2b) (1 - exp(2bs))`` and
    ``r0 = f(0)``. The mismatch ``r0 - (nu(tau) - a) / c`` is stored in
    ``meta["consistency_residual"]``.

    Raises
    ------
    DegenerateC
        If ``c`` is zero.
    CurveTooShort
        If the curve ends before ``tau``.
    """
    if model.coeffs.N != 1:
        raise ValueError("the implied initial curve needs exactly one delay")
    (c,) = model.c
    (tau,) = model.tau
    b = model.b
    if c == 0.0:
        raise DegenerateC("c1 must be non-zero")
    if curve.max_maturity < tau:
        raise CurveTooShort(f"curve ends at {curve.max_maturity} < tau = {tau}")
    if not model.sigma.is_constant or not model.a.is_constant:
        raise ValueError("the implied initial curve assumes constant a and sigma")
    a = float(model.a(0.0))
    sigma = float(model.sigma(0.0))

    def nu(s):
        return curve.forward_slope(s) - b * curve.forward(s) + _convexity(b, sigma, s)

    def phi(s):
        return (nu(np.asarray(s, dtype=float) + tau) - a) / c

    r0 = float(curve.forward(0.0))
    residual = r0 - float(phi(0.0))
    kinks = tuple(float(m - tau) for m in curve.kinks if m < tau)
    meta = {"consistency_residual": residual, "interpolation": curve.interpolation}
    return InitialCurve.from_function(phi, tau, n_points, r0, kinks, meta)


def _model_bonds(model: ModelParams, phi: InitialCurve, maturities, config: SeriesConfig, check: bool) -> np.ndarray:
    if not check:
        return bond_prices(model, phi, maturities, config)
    return np.array([bond_price(model, phi, 0.0, float(T), config, check) for T in maturities])


def bond_objective(curve: YieldCurve, model: ModelParams, maturities=None,
                   config: SeriesConfig = DEFAULT_CONFIG, check: bool = False) -> float:
    """Mean squared bond-price error over maturities beyond the delay.

    The initial curve is rebuilt from ``model`` with :func:`implied_phi`.
    """
    (tau,) = model.tau
    mats = np.asarray(curve.maturities if maturities is None else maturities, dtype=float)
    mats = mats[mats > tau]
    if mats.size == 0:
        raise CurveTooShort(f"no maturities beyond tau = {tau}")
    phi = implied_phi(curve, model)
    err = curve.discount(mats) - _model_bonds(model, phi, mats, config, check)
    return float(np.mean(err * err))


def nelder_mead_restarts(
    fun: Callable[[np.ndarray], float],
    x0: np.ndarray,
    n_starts: int = 8,
    seed: int = 0,
    spread: float = 0.5,
    xatol: float = 1e-9,
    fatol: float = 0.0,
    maxiter: int | None = None,
):
    """Nelder-Mead from ``x0`` and from a seeded Latin hypercube around it.

    Coordinates are expected to be scaled to order one. The hypercube spans
    ``x0 * (1 +- spread)``. Returns ``(x, f, iterations, converged)`` for
    the best finite end point; ties favour the earlier start, so the
    ``x0`` run wins when it is as good as any other.
    """
    x0 = np.asarray(x0, dtype=float)
    starts = [x0]
    if n_starts > 1:
        lhs = qmc.LatinHypercube(d=x0.size, seed=seed).random(n_starts - 1)
        starts += list(x0 * (1.0 + spread * (2.0 * lhs - 1.0)))
    best = None
    iterations = 0
    options = {"xatol": xatol, "fatol": fatol, "adaptive": x0.size > 3}
    if maxiter is not None:
        options["maxiter"] = maxiter
        options["maxfev"] = 2 * maxiter
    for start in starts:
        res = minimize(fun, start, method="Nelder-Mead", options=options)
        iterations += int(res.nit)
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best[1]:
            best = (np.asarray(res.x), float(res.fun), bool(res.success))
    if best is None:
        raise OptimizerDiverged("no start produced a finite objective")
    return best[0], best[1], iterations, best[2]


def _scale(values: Sequence[float]) -> np.ndarray:
    v = np.abs(np.asarray(values, dtype=float))
    return np.where(v > 0, v, 1.0)


def calibrate_bonds(curve: YieldCurve, tau1: float, init: ModelParams, n_starts: int = 8, seed: int = 0,
                    config: SeriesConfig = DEFAULT_CONFIG, maxiter: int | None = 400) -> CalibrationResult:
    """Fit ``(a, b, c1, sigma)`` to bonds beyond ``tau1`` with ``phi`` implied.

    The search runs in coordinates scaled by ``|init|``. Points with
    ``sigma <= 0`` or ``c1 = 0`` score ``inf``.
    """
    if curve.max_maturity <= tau1:
        raise CurveTooShort(f"curve ends at {curve.max_maturity} <= tau1 = {tau1}")
    p0 = np.array([float(init.a(0.0)), init.b, init.c[0], float(init.sigma(0.0))])
    scale = _scale(p0)

    def to_model(x):
        a, b, c, s = x * scale
        return ModelParams.from_values(a, b, [c], [tau1], s)

    def fun(x):
        a, b, c, s = x * scale
        if s <= 0 or c == 0.0:
            return math.inf
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                val = bond_objective(curve, to_model(x), config=config)
        except (ArithmeticError, ValueError):
            return math.inf
        return val if math.isfinite(val) else math.inf

    x, f, nit, ok = nelder_mead_restarts(fun, p0 / scale, n_starts, seed, maxiter=maxiter)
    model = to_model(x)
    phi = implied_phi(curve, model)
    mats = curve.maturities
    model_b = _model_bonds(model, phi, mats, config, False)
    extra = {
        "maturities": mats.tolist(),
        "market": curve.discount(mats).tolist(),
        "model": model_b.tolist(),
        "consistency_residual": phi.meta["consistency_residual"],
    }
    return CalibrationResult(model, f, nit, ok, tau1, extra)


# ---------------------------------------------------------------------------
# caplets


@dataclass(frozen=True)
class NelsonSiegelForward:
    """Nelson-Siegel instantaneous forward curve.

    ``f(t) = beta0 + beta1 e^{-t/lam} + beta2 (t/lam) e^{-t/lam}``, with the
    integral ``F(t) = int_0^t f`` in closed form. Caplet calibration uses it
    for both the bond ratio ``Y = exp(F(T) - F(S))`` and the discount
    factor ``B(0, T) = exp(-F(T))``.
    """

    beta0: float
    beta1: float
    beta2: float
    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")

    def to_array(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2, self.lam])

    @classmethod
    def from_array(cls, x) -> "NelsonSiegelForward":
        return cls(*(float(v) for v in x))

    @staticmethod
    def _integral(t, beta0, beta1, beta2, lam):
        t = np.asarray(t, dtype=float)
        x = t / lam
        e1 = -np.expm1(-x)
        return beta0 * t + beta1 * lam * e1 + beta2 * lam * (e1 - x * np.exp(-x))

    def integral(self, t):
        return self._integral(t, self.beta0, self.beta1, self.beta2, self.lam)

    def forward(self, t):
        x = np.asarray(t, dtype=float) / self.lam
        return self.beta0 + (self.beta1 + self.beta2 * x) * np.exp(-x)

    def discount(self, T):
        return np.exp(-self.integral(T))

    def growth(self, S, T):
        """``Y(0) = exp(int_S^T f)``."""
        return np.exp(self.integral(T) - self.integral(S))

    @classmethod
    def fit(cls, curve: YieldCurve) -> "NelsonSiegelForward":
        """Least-squares fit of ``F(T)/T`` to the spot yields of ``curve``."""
        m, y = curve.maturities, curve.yields
        x0 = np.array([y[-1], y[0] - y[-1], 0.0, 1.0])

        def resid(p):
            return cls._integral(m, *p) / m - y

        lo = [-np.inf, -np.inf, -np.inf, 1e-3]
        res = least_squares(resid, x0, bounds=(lo, np.inf), x_scale=[0.01, 0.01, 0.01, 1.0])
        return cls.from_array(res.x)


@dataclass(frozen=True)
class CapletSet:
    """Quotes stored column-wise for vectorised pricing."""

    S: np.ndarray
    T: np.ndarray
    K: np.ndarray
    Delta: np.ndarray
    price: np.ndarray
    forward_looking: bool

    @classmethod
    def from_quotes(cls, quotes: Sequence[CapletQuote]) -> "CapletSet":
        if len(quotes) == 0:
            raise ValueError("need at least one quote")
        styles = {q.style for q in quotes}
        if len(styles) != 1:
            raise ValueError("quotes must share one style")
        arr = {k: np.array([getattr(q, k) for q in quotes], dtype=float) for k in ("S", "T", "K", "Delta", "price")}
        return cls(forward_looking=styles.pop() is CapletStyle.FORWARD_LOOKING, **arr)

    def __len__(self) -> int:
        return self.S.size

    @property
    def K_hat(self) -> np.ndarray:
        return 1.0 + self.K * self.Delta

    @property
    def fixing(self) -> np.ndarray:
        return self.S if self.forward_looking else self.T


def _unit_variance(model: ModelParams, quotes: CapletSet, config: SeriesConfig) -> np.ndarray:
    """``nu(0, fixing)`` per quote for ``model`` with ``sigma = 1``."""
    unit = ModelParams.from_values(0.0, model.b, list(model.c), list(model.tau), 1.0)
    out = np.empty(len(quotes))
    if quotes.forward_looking:
        for D in np.unique(quotes.Delta):
            sel = quotes.Delta == D
            out[sel] = caplet_variance_strip(unit, quotes.S[sel], float(D), config)
        return out
    for i in range(len(quotes)):
        q = CapletQuote(quotes.S[i], quotes.T[i], quotes.K[i], Delta=quotes.Delta[i], style=CapletStyle.BACKWARD_LOOKING)
        out[i] = caplet_variance_nu(unit, 0.0, q.fixing, q, config)
    return out


def _lognormal_caplet(discount, Y, K_hat, nu):
    sq = np.sqrt(nu)
    with np.errstate(divide="ignore", invalid="ignore"):
        d_plus = (np.log(Y / K_hat) + 0.5 * nu) / sq
        val = discount * (Y * norm.cdf(d_plus) - K_hat * norm.cdf(d_plus - sq))
    return np.where(nu > 0, val, discount * np.maximum(Y - K_hat, 0.0))


def caplet_model_prices(kind: str, params, quotes, curve: NelsonSiegelForward, notional: float = 100.0,
                        config: SeriesConfig = DEFAULT_CONFIG, unit_variance: np.ndarray | None = None) -> np.ndarray:
    """Model prices of ``quotes`` at time 0 with bond inputs from ``curve``.

    Parameters
    ----------
    kind : {"proposed", "bachelier", "black", "vasicek"}
    params : ModelParams or mapping
        A one-delay :class:`ModelParams` for ``"proposed"``; otherwise a
        mapping with ``sigma`` (and ``b`` for Vasicek).
    quotes : sequence of CapletQuote or CapletSet
    curve : NelsonSiegelForward
    unit_variance : array, optional
        Precomputed ``nu`` at ``sigma = 1`` for the proposed model.

    Returns
    -------
    ndarray
        Prices per ``notional``; same order as ``quotes``.
    """
    q = quotes if isinstance(quotes, CapletSet) else CapletSet.from_quotes(quotes)
    if np.any(q.K_hat <= 0):
        raise InvalidStrike("1 + K Delta must be positive")
    disc = curve.discount(q.T)
    Y = curve.growth(q.S, q.T)
    expiry = q.fixing
    kind = kind.lower()
    if kind == "proposed":
        if not isinstance(params, ModelParams) or params.coeffs.N != 1:
            raise ValueError("the proposed model needs one-delay ModelParams")
        unit = _unit_variance(params, q, config) if unit_variance is None else unit_variance
        sigma = float(params.sigma(0.0))
        return notional * _lognormal_caplet(disc, Y, q.K_hat, sigma * sigma * unit)
    sigma = abs(float(params["sigma"]))
    F = (Y - 1.0) / q.Delta
    if kind == "bachelier":
        s = sigma * np.sqrt(expiry)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = (F - q.K) / s
            val = (F - q.K) * norm.cdf(d) + s * norm.pdf(d)
        val = np.where(s > 0, val, np.maximum(F - q.K, 0.0))
        return notional * disc * q.Delta * val
    if kind == "black":
        if np.any(F <= 0):
            raise NegativeForward("black needs positive forwards")
        s = sigma * np.sqrt(expiry)
        with np.errstate(divide="ignore", invalid="ignore"):
            d1 = (np.log(F / q.K) + 0.5 * s * s) / s
            val = F * norm.cdf(d1) - q.K * norm.cdf(d1 - s)
        val = np.where(s > 0, val, np.maximum(F - q.K, 0.0))
        return notional * disc * q.Delta * val
    if kind == "vasicek":
        model = ModelParams.from_values(0.0, float(params["b"]), [0.0], [1.0], 1.0)
        unit = _unit_variance(model, q, config)
        return notional * _lognormal_caplet(disc, Y, q.K_hat, sigma * sigma * unit)
    raise ValueError(f"unknown caplet model {kind!r}")


def relative_sse(market, model) -> float:
    """``sum (market - model)^2 / market``."""
    market = np.asarray(market, dtype=float)
    err = market - np.asarray(model, dtype=float)
    return float(np.sum(err * err / market))


def caplet_objective(kind: str, params, quotes, curve: NelsonSiegelForward, notional: float = 100.0,
                     config: SeriesConfig = DEFAULT_CONFIG) -> float:
    q = quotes if isinstance(quotes, CapletSet) else CapletSet.from_quotes(quotes)
    return relative_sse(q.price, caplet_model_prices(kind, params, q, curve, notional, config))


def default_tau_grid(lo: float = 0.25, hi: float = 4.0, step: float = 0.01) -> np.ndarray:
    """Delay grid ``lo, lo + step, ..., hi`` rounded to the step."""
    n = int(round((hi - lo) / step))
    return np.round(lo + step * np.arange(n + 1), 10)


_BENCHMARK_INIT = {"bachelier": {"sigma": 0.01}, "black": {"sigma": 0.3}, "vasicek": {"b": -0.1, "sigma": 0.01}}


class _ProposedProblem:
    """Relative SSE of the proposed model as a function of scaled coordinates.

    ``x = (b, c1, sigma) / scale`` followed by the four curve parameters when
    the curve is free. The unit variance depends on ``(b, c1, tau)`` only and
    is cached, so moves in ``sigma`` and the curve cost no kernel work.
    """

    def __init__(self, quotes: CapletSet, curve: NelsonSiegelForward, scale, free_curve: bool, notional, config):
        self.q = quotes
        self.curve = curve
        self.scale = np.asarray(scale, dtype=float)
        self.free_curve = free_curve
        self.notional = notional
        self.config = config
        self._cache: dict = {}

    def unit(self, b: float, c: float, tau: float) -> np.ndarray:
        key = (b, c, tau)
        hit = self._cache.get(key)
        if hit is None:
            if len(self._cache) > 4096:
                self._cache.clear()
            model = ModelParams.from_values(0.0, b, [c], [tau], 1.0)
            with np.errstate(over="ignore", invalid="ignore"):
                hit = _unit_variance(model, self.q, self.config)
            self._cache[key] = hit
        return hit

    def split(self, x, tau):
        b, c, s = np.asarray(x[:3]) * self.scale
        curve = self.curve
        if self.free_curve:
            p = np.asarray(x[3:7], dtype=float)
            if not p[3] > 1e-3:
                return None
            curve = NelsonSiegelForward.from_array(p)
        return ModelParams.from_values(0.0, float(b), [float(c)], [float(tau)], abs(float(s))), curve

    def __call__(self, x, tau) -> float:
        b, c, s = (float(v) for v in np.asarray(x[:3]) * self.scale)
        if c == 0.0 or s == 0.0:
            return math.inf
        if self.free_curve:
            p = np.asarray(x[3:7], dtype=float)
            if not p[3] > 1e-3:
                return math.inf
            curve = NelsonSiegelForward.from_array(p)
        else:
            curve = self.curve
        try:
            unit = self.unit(b, c, float(tau))
        except (ArithmeticError, ValueError):
            return math.inf
        if not np.all(np.isfinite(unit)):
            return math.inf
        with np.errstate(over="ignore", invalid="ignore"):
            disc = curve.discount(self.q.T)
            Y = curve.growth(self.q.S, self.q.T)
            model = self.notional * _lognormal_caplet(disc, Y, self.q.K_hat, s * s * unit)
            val = relative_sse(self.q.price, model)
        return val if math.isfinite(val) else math.inf


def _nm(fun, x0, maxfev: int, args=()):
    res = minimize(fun, np.asarray(x0, dtype=float), args=args, method="Nelder-Mead",
                   options={"maxfev": maxfev, "xatol": 1e-8, "fatol": 1e-12, "adaptive": True})
    return np.asarray(res.x), float(res.fun), int(res.nit), bool(res.success)


def _profile_curve(problem: _ProposedProblem, model: ModelParams, curve0: NelsonSiegelForward, maxfev: int):
    """Best curve for fixed ``(b, c1, sigma, tau)``; returns ``(curve, objective)``."""
    head = np.array([model.b, model.c[0], float(model.sigma(0.0))]) / problem.scale
    tau = model.tau[0]

    def fun(p):
        return problem(np.concatenate([head, p]), tau)

    p, f, _, _ = _nm(fun, curve0.to_array(), maxfev)
    if f > fun(curve0.to_array()):
        p, f = curve0.to_array(), fun(curve0.to_array())
    return NelsonSiegelForward.from_array(p), f


def calibrate_caplets(
    quotes,
    curve,
    kind: str = "proposed",
    init=None,
    free_curve: bool | None = None,
    tau_grid=None,
    refine_step: float | None = 0.05,
    refine_width: float = 0.2,
    n_refine: int = 2,
    maxfev: int = 3000,
    scan_maxfev: int | None = 600,
    notional: float = 100.0,
    config: SeriesConfig = DEFAULT_CONFIG,
) -> CalibrationResult:
    """Minimise the relative SSE of caplet prices.

    Parameters
    ----------
    quotes : sequence of CapletQuote
        Positive market prices per ``notional``.
    curve : YieldCurve or NelsonSiegelForward
        Bond curve. A :class:`YieldCurve` is first fitted by
        :meth:`NelsonSiegelForward.fit`.
    kind : {"proposed", "bachelier", "black", "vasicek"}
    init : ModelParams or mapping, optional
        Start point. For the proposed model it also fixes the coordinate
        scale and is always polished, so the result is never worse than
        the best curve at ``init``.
    free_curve : bool, optional
        Fit the curve jointly. Defaults to ``True`` for the proposed model
        and ``False`` for benchmarks, which are then priced on ``curve``.
    tau_grid : array_like, optional
        Delays scanned by the proposed model; defaults to step 0.25 on
        ``[0.25, 4]``. After the scan each of the ``n_refine`` best grid
        points is refined on a ``refine_step`` grid within
        ``refine_width``.
    maxfev : int
        Nelder-Mead evaluation budget per start of the final polish.
    scan_maxfev : int, optional
        Budget per start while scanning and refining; ``None`` uses
        ``maxfev``.

    Returns
    -------
    CalibrationResult
        ``extra`` holds ``curve`` (a NelsonSiegelForward), ``model_prices``,
        ``market_prices``, ``sse`` and, for the proposed model, the scan
        ``profile`` of ``(tau, objective)`` pairs and ``init_objective``.
    """
    q = quotes if isinstance(quotes, CapletSet) else CapletSet.from_quotes(quotes)
    if not np.all(q.price > 0):
        raise ValueError("market prices must be positive")
    curve0 = NelsonSiegelForward.fit(curve) if isinstance(curve, YieldCurve) else curve
    kind = kind.lower()
    if free_curve is None:
        free_curve = kind == "proposed"
    if kind == "proposed":
        return _calibrate_proposed(q, curve0, init, free_curve, tau_grid, refine_step, refine_width, n_refine,
                                   maxfev, scan_maxfev, notional, config)
    return _calibrate_benchmark(q, curve0, kind, init, free_curve, maxfev, notional, config)


def _result_extra(q: CapletSet, kind, params, curve, notional, config) -> dict:
    model = caplet_model_prices(kind, params, q, curve, notional, config)
    err = q.price - model
    return {"curve": curve, "model_prices": model, "market_prices": q.price.copy(), "sse": float(np.sum(err * err))}


def _calibrate_benchmark(q, curve0, kind, init, free_curve, maxfev, notional, config) -> CalibrationResult:
    if kind not in _BENCHMARK_INIT:
        raise ValueError(f"unknown caplet model {kind!r}")
    names = ["b", "sigma"] if kind == "vasicek" else ["sigma"]
    start = dict(_BENCHMARK_INIT[kind], **(dict(init) if init else {}))
    p0 = np.array([start[n] for n in names], dtype=float)
    scale = _scale(p0)
    nc = 4 if free_curve else 0

    def unpack(x):
        params = dict(zip(names, x[: len(names)] * scale))
        curve = NelsonSiegelForward.from_array(x[len(names):]) if free_curve else curve0
        return params, curve

    def fun(x):
        if free_curve and not x[-1] > 1e-3:
            return math.inf
        params, curve = unpack(x)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                val = relative_sse(q.price, caplet_model_prices(kind, params, q, curve, notional, config))
        except (ArithmeticError, ValueError):
            return math.inf
        return val if math.isfinite(val) else math.inf

    x0 = np.concatenate([p0 / scale, curve0.to_array()[:nc]])
    x, f, nit, ok = nelder_mead_restarts(fun, x0, n_starts=4, seed=0, spread=0.9, xatol=1e-10, maxiter=maxfev)
    params, curve = unpack(x)
    params["sigma"] = abs(params["sigma"])
    extra = _result_extra(q, kind, params, curve, notional, config)
    extra["benchmark_params"] = params
    return CalibrationResult(None, f, nit, ok, None, extra)


_PROPOSED_STARTS = ((1.0, 1.0, 1.0), (2.0, 0.4, 3.0), (5.0, 5.0, 5.0))


def _calibrate_proposed(q, curve0, init, free_curve, tau_grid, refine_step, refine_width, n_refine, maxfev,
                        scan_maxfev, notional, config) -> CalibrationResult:
    if init is None:
        from .datasets import reference_tables

        ref = reference_tables()["caplet_calibration"]["short"]
        init = ModelParams.from_values(0.0, ref["b"], [ref["c1"]], [ref["tau1"]], ref["sigma"])
    if not isinstance(init, ModelParams) or init.coeffs.N != 1:
        raise ValueError("init must be one-delay ModelParams")
    head0 = np.array([init.b, init.c[0], float(init.sigma(0.0))])
    scale = _scale(head0)
    problem = _ProposedProblem(q, curve0, scale, free_curve, notional, config)
    tail0 = curve0.to_array() if free_curve else np.zeros(0)
    scan_maxfev = maxfev if scan_maxfev is None else scan_maxfev
    grid = default_tau_grid(0.25, 4.0, 0.25) if tau_grid is None else np.asarray(tau_grid, dtype=float)
    fixed = [np.concatenate([np.asarray(s) * np.sign(head0), tail0]) for s in _PROPOSED_STARTS]

    iterations = 0
    profile: dict[float, tuple[float, np.ndarray]] = {}

    def solve(tau, starts, budget):
        nonlocal iterations
        best = None
        for st in starts:
            x, f, nit, ok = _nm(problem, st, budget, args=(tau,))
            iterations += nit
            if best is None or f < best[1]:
                best = (x, f, ok)
        return best

    warm = fixed[0]
    for tau in grid:
        x, f, _ = solve(float(tau), [warm, *fixed], scan_maxfev)
        profile[float(tau)] = (f, x)
        if math.isfinite(f):
            warm = x
    if refine_step and len(profile) > 1:
        ranked = sorted(profile, key=lambda t: profile[t][0])[:n_refine]
        for centre in ranked:
            local = np.round(np.arange(centre - refine_width, centre + refine_width + 1e-12, refine_step), 10)
            warm = profile[centre][1]
            for tau in local:
                if tau <= 0 or float(tau) in profile:
                    continue
                x, f, _ = solve(float(tau), [warm, profile[centre][1]], scan_maxfev)
                profile[float(tau)] = (f, x)
                if math.isfinite(f):
                    warm = x

    # polish the scan optimum and the start point
    tau_best = min(profile, key=lambda t: profile[t][0])
    x_best, f_best, ok = solve(tau_best, [profile[tau_best][1]], maxfev)
    tau_init = init.tau[0]
    init_model = ModelParams.from_values(0.0, init.b, [init.c[0]], [tau_init], float(init.sigma(0.0)))
    if free_curve:
        curve_init, f_init = _profile_curve(problem, init_model, curve0, maxfev)
        x_init = np.concatenate([head0 / scale, curve_init.to_array()])
    else:
        x_init = head0 / scale
        f_init = problem(x_init, tau_init)
    x_pol, f_pol, ok_pol = solve(tau_init, [x_init], maxfev)
    if f_pol > f_init:
        x_pol, f_pol, ok_pol = x_init, f_init, False
    if f_pol < f_best:
        x_best, f_best, ok, tau_best = x_pol, f_pol, ok_pol, tau_init
    profile.setdefault(float(tau_init), (f_init, x_init))

    model, curve = problem.split(x_best, tau_best)
    extra = _result_extra(q, "proposed", model, curve, notional, config)
    extra["profile"] = sorted((t, v[0]) for t, v in profile.items())
    extra["init_objective"] = f_init
    if not math.isfinite(f_best):
        raise OptimizerDiverged("no delay produced a finite objective")
    return CalibrationResult(model, f_best, iterations, ok, tau_best, extra)
