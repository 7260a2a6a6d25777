"""Fundamental solution of the linear delay equation and the bond exponents.

The deterministic equation ``x'(t) = b x(t) + sum_j c_j x(t - tau_j)`` has the
fundamental solution

    R(t) = sum_{alpha : <alpha, tau> <= t} c^alpha / alpha!
           * (t - <alpha, tau>)^{|alpha|} * exp(b (t - <alpha, tau>)),

with ``R = 0`` on ``t < 0`` and ``R(0) = 1``. Every other closed form in the
package is built from ``R`` and its running integral ``S(x) = int_0^x R``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import special

from . import quadrature
from .exceptions import (
    CatastrophicCancellation,
    SeriesOverflow,
    SeriesTruncationError,
    StepTooLarge,
)

__all__ = [
    "DelayCoefficients",
    "MultiIndexTerm",
    "SeriesConfig",
    "DEFAULT_CONFIG",
    "enumerate_terms",
    "eval_R",
    "eval_S",
    "eval_D",
    "eval_A",
    "incomplete_exp_moment",
    "dnalpha_direct",
    "kernel_breakpoints",
    "OracleSolution",
    "dde_oracle",
]


@dataclass(frozen=True)
class DelayCoefficients:
    """Drift slope and delay terms of the linear delay equation.

    Parameters
    ----------
    b : float
        Coefficient of the current value, in 1/time.
    c : sequence of float
        Delay coefficients ``c_1..c_N``, in 1/time.
    tau : sequence of float
        Strictly increasing positive delays ``tau_1..tau_N``.
    """

    b: float
    c: tuple[float, ...]
    tau: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(v) for v in np.atleast_1d(self.c))
        tau = tuple(float(v) for v in np.atleast_1d(self.tau))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "tau", tau)
        if len(c) == 0 or len(c) != len(tau):
            raise ValueError("c and tau must have the same non-zero length")
        if not all(math.isfinite(v) for v in (self.b, *c, *tau)):
            raise ValueError("coefficients must be finite")
        if tau[0] <= 0.0 or any(t1 <= t0 for t0, t1 in zip(tau, tau[1:])):
            raise ValueError("tau must be positive and strictly increasing")

    @property
    def N(self) -> int:
        return len(self.c)

    @property
    def tau_max(self) -> float:
        return self.tau[-1]


@dataclass(frozen=True)
class MultiIndexTerm:
    """One contributing term ``c^alpha / alpha!`` of the series."""

    alpha: tuple[int, ...]
    order: int
    lag: float
    weight: float


@dataclass(frozen=True)
class SeriesConfig:
    """Truncation and quadrature settings.

    Attributes
    ----------
    rel_tol : float
        Relative tolerance for series truncation and quadrature checks.
    max_order : int
        Hard cap on the multi-index order ``|alpha|``.
    quadrature_nodes : int
        Gauss-Legendre nodes per panel.
    """

    rel_tol: float = 1e-12
    max_order: int = 64
    quadrature_nodes: int = 16

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.max_order < 0 or self.quadrature_nodes < 2:
            raise ValueError("invalid max_order or quadrature_nodes")


DEFAULT_CONFIG = SeriesConfig()

# quadrature consistency is judged a few digits looser than series truncation
_QUAD_SLACK = 100.0


@dataclass(frozen=True)
class _TermTable:
    alphas: tuple[tuple[int, ...], ...]
    order: np.ndarray
    lag: np.ndarray
    weight: np.ndarray


def _enumerate(c: tuple[float, ...], tau: tuple[float, ...], t_max: float, max_order: int):
    """Breadth-first enumeration in increasing order with lag pruning.

    Multi-indices are generated canonically: a parent at order ``n`` is only
    incremented at positions at or after its last non-zero entry, so each
    alpha appears once. Directions with ``c_i = 0`` carry zero weight and are
    skipped.
    """
    N = len(c)
    active = [i for i in range(N) if c[i] != 0.0]
    eps = 1e-12 * max(1.0, t_max)
    zero = (0,) * N
    terms = [(zero, 0, 0.0, 1.0)]
    level = [(zero, 0.0, 1.0, 0)]
    order = 0
    while level:
        nxt = []
        for alpha, lag, w, start in level:
            for i in active:
                if i < start:
                    continue
                new_lag = lag + tau[i]
                if new_lag > t_max + eps:
                    continue
                a = list(alpha)
                a[i] += 1
                nw = w * c[i] / a[i]
                nxt.append((tuple(a), new_lag, nw, i))
        order += 1
        if nxt and order > max_order:
            raise SeriesTruncationError(
                f"horizon {t_max} needs order > max_order={max_order}"
            )
        for alpha, lag, w, _ in nxt:
            terms.append((alpha, order, lag, w))
        level = nxt
    return terms


@lru_cache(maxsize=512)
def _table(c: tuple[float, ...], tau: tuple[float, ...], horizon: float, max_order: int) -> _TermTable:
    terms = _enumerate(c, tau, horizon, max_order)
    alphas = tuple(t[0] for t in terms)
    order = np.array([t[1] for t in terms], dtype=int)
    lag = np.array([t[2] for t in terms], dtype=float)
    weight = np.array([t[3] for t in terms], dtype=float)
    for arr in (order, lag, weight):
        arr.setflags(write=False)
    return _TermTable(alphas, order, lag, weight)


def _horizon(t_max: float) -> float:
    # round up so nearby horizons share one cached table
    return max(0.25, math.ceil(4.0 * float(t_max) * (1.0 + 1e-12)) / 4.0)


def _get_table(coeffs: DelayCoefficients, t_max: float, config: SeriesConfig) -> _TermTable:
    return _table(coeffs.c, coeffs.tau, _horizon(t_max), config.max_order)


def enumerate_terms(
    coeffs: DelayCoefficients, t: float, config: SeriesConfig = DEFAULT_CONFIG
) -> list[MultiIndexTerm]:
    """All multi-index terms with ``<alpha, tau> <= t`` and non-zero weight."""
    if t < 0:
        return []
    terms = _enumerate(coeffs.c, coeffs.tau, float(t), config.max_order)
    return [MultiIndexTerm(a, n, lag, w) for a, n, lag, w in terms]


def kernel_breakpoints(coeffs: DelayCoefficients, t_max: float, config: SeriesConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Sorted distinct lags ``<alpha, tau>`` in ``[0, t_max]``."""
    table = _get_table(coeffs, t_max, config)
    lags = table.lag[table.lag <= t_max]
    return np.unique(lags)


def incomplete_exp_moment(n: int, b: float, y, rel_tol: float = 1e-12) -> np.ndarray:
    """``I_n(y) = int_0^y u^n exp(b u) du`` for ``y >= 0``.

    Uses the power series in ``b`` when ``|b y| < 0.5`` or ``b > 0`` (all
    terms positive in the latter case), and the regularised lower incomplete
    gamma function otherwise. Both are exact rewrites of the closed form and
    keep full relative accuracy.
    """
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    if b == 0.0:
        return y ** (n + 1) / (n + 1)
    x = b * y
    series = (np.abs(x) < 0.5) | (b > 0.0)
    if np.any(series):
        ys, xs = y[series], x[series]
        total = np.zeros_like(ys)
        term = np.ones_like(ys)
        k = 0
        while True:
            contrib = term / (n + k + 1)
            total += contrib
            k += 1
            term = term * xs / k
            if np.all(np.abs(term) <= rel_tol * np.abs(total) * 1e-2) or k > 2000:
                break
        out[series] = ys ** (n + 1) * total
    rest = ~series
    if np.any(rest):
        ax = -x[rest]
        log_scale = special.gammaln(n + 1) - (n + 1) * math.log(-b)
        out[rest] = np.exp(log_scale) * special.gammainc(n + 1, ax)
    return out


def dnalpha_direct(n: int, b: float, ell: float) -> float:
    """Literal closed form of ``int_0^ell u^n e^{b u} du`` for ``b != 0``.

    Evaluates ``(-1)^n n! / b^{n+1} (e^{b ell} sum_{r<=n} (-b ell)^r / r! - 1)``
    with compensated summation. Kept as an independent check of
    :func:`incomplete_exp_moment`; warns with :class:`CatastrophicCancellation`
    when ``|b ell| < 0.5``, where the bracket loses relative precision.
    """
    if b == 0.0:
        raise ValueError("the closed form needs b != 0")
    x = b * ell
    if abs(x) < 0.5:
        warnings.warn(
            f"|b*ell|={abs(x):.3g} is small; the direct bracket cancels",
            CatastrophicCancellation,
            stacklevel=2,
        )
    terms = [(-x) ** r / math.factorial(r) for r in range(n + 1)]
    bracket = math.fsum([math.exp(x) * t for t in terms] + [-1.0])
    return (-1) ** n * math.factorial(n) / b ** (n + 1) * bracket


def _check_finite(values: np.ndarray, table: _TermTable, k: int):
    if not np.all(np.isfinite(values)):
        raise SeriesOverflow(int(table.order[k]), table.alphas[k])


def _series(coeffs: DelayCoefficients, x, config: SeriesConfig, integrated: bool) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    xs = np.atleast_1d(x)
    out = np.zeros(xs.shape, dtype=float)
    if xs.size == 0:
        return out
    t_max = float(np.max(xs))
    if t_max < 0:
        return float(out[0]) if scalar else out
    table = _get_table(coeffs, t_max, config)
    b = coeffs.b
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(len(table.lag)):
            y = xs - table.lag[k]
            mask = y >= 0.0
            if not np.any(mask):
                continue
            n = int(table.order[k])
            ym = y[mask]
            if integrated:
                val = table.weight[k] * incomplete_exp_moment(n, b, ym, config.rel_tol)
            else:
                val = table.weight[k] * ym**n * np.exp(b * ym)
            _check_finite(val, table, k)
            out[mask] += val
    _check_finite(out, table, 0)
    return float(out[0]) if scalar else out


def eval_R(coeffs: DelayCoefficients, t, config: SeriesConfig = DEFAULT_CONFIG):
    """Fundamental solution ``R(t)``; zero for ``t < 0`` and one at ``t = 0``.

    Parameters
    ----------
    coeffs : DelayCoefficients
    t : float or array_like
        Evaluation times.

    Returns
    -------
    float or ndarray
        Same shape as ``t``.

    Raises
    ------
    SeriesOverflow
        If a term leaves the floating-point range.
    """
    return _series(coeffs, t, config, integrated=False)


def eval_S(coeffs: DelayCoefficients, x, config: SeriesConfig = DEFAULT_CONFIG):
    """Running integral ``S(x) = int_0^x R(u) du`` (zero for ``x <= 0``)."""
    return _series(coeffs, x, config, integrated=True)


def eval_D(coeffs: DelayCoefficients, ell, z: complex = 0.0, d1: float = -1.0, config: SeriesConfig = DEFAULT_CONFIG):
    """Solution ``D`` of the delay Riccati equation.

    ``D' = b D + sum_j c_j D(. - tau_j) + d1`` with ``D(0) = z`` and ``D = 0``
    before zero. Written with the running integral of ``R``::

        D(ell) = z + (d1 + z b) S(ell) + z sum_j c_j S(ell - tau_j)

    For the bond case (``z = 0``, ``d1 = -1``) this is ``-S(ell)``.

    Returns a real value when ``z`` is real and a complex value otherwise.
    """
    ell = np.asarray(ell, dtype=float)
    S = eval_S(coeffs, ell, config)
    z = complex(z)
    if z == 0:
        return d1 * S
    delayed = 0.0
    for c_j, tau_j in zip(coeffs.c, coeffs.tau):
        delayed = delayed + c_j * eval_S(coeffs, ell - tau_j, config)
    value = np.where(ell >= 0.0, z + (d1 + z * coeffs.b) * S + z * delayed, 0.0)
    if z.imag == 0.0:
        value = value.real
    return value[()] if np.ndim(value) == 0 else value


def _as_function(fn) -> tuple[Callable[[np.ndarray], np.ndarray], np.ndarray]:
    """Return a vectorised callable and its breakpoints for a term structure."""
    if hasattr(fn, "breaks") and callable(fn):
        return fn, np.asarray(fn.breaks, dtype=float)
    if callable(fn):
        return (lambda t: np.broadcast_to(np.asarray(fn(t), dtype=float), np.shape(t))), np.empty(0)
    value = float(fn)
    return (lambda t: np.full(np.shape(t), value)), np.empty(0)


def integrand_breakpoints(coeffs: DelayCoefficients, ell: float, config: SeriesConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Kinks of ``R``/``D`` on ``[0, ell]``: every lag and every lag plus ``tau_j``."""
    lags = kernel_breakpoints(coeffs, ell, config)
    shifted = [lags + t for t in coeffs.tau]
    pts = np.concatenate([lags, *shifted]) if shifted else lags
    return np.unique(pts[pts <= ell])


def layer_width(coeffs: DelayCoefficients) -> float | None:
    """Width of the exponential boundary layer, ``1/|b|``, when it matters."""
    return 1.0 / abs(coeffs.b) if abs(coeffs.b) > 4.0 else None


def eval_A(
    coeffs: DelayCoefficients,
    a_fn,
    sigma_fn,
    T: float,
    ell: float,
    z: complex = 0.0,
    d0: float = 0.0,
    d1: float = -1.0,
    config: SeriesConfig = DEFAULT_CONFIG,
    check: bool = True,
):
    """``A(ell) = int_0^ell [a(T-u) D(u) + sigma(T-u)^2 D(u)^2 / 2 + d0] du``.

    Composite Gauss-Legendre on panels split at the kernel lags, the lags
    shifted by each delay, and the breakpoints of ``a`` and ``sigma`` mapped
    to ``u = T - break``.

    Parameters
    ----------
    a_fn, sigma_fn : PiecewiseConstant, callable or float
        Drift level and volatility as functions of calendar time.
    T : float
        Calendar time the exponent is anchored to.
    ell : float
        Upper limit, ``0 <= ell <= T``.
    check : bool
        Run the panel-halving consistency check.

    Raises
    ------
    QuadratureNonConvergence
        If ``check`` is set and the refinement disagrees beyond tolerance.
    """
    if ell < 0 or ell > T * (1 + 1e-14) + 1e-14:
        raise ValueError("eval_A needs 0 <= ell <= T")
    if ell == 0.0:
        return 0.0 if complex(z).imag == 0 else 0j
    a_f, a_breaks = _as_function(a_fn)
    s_f, s_breaks = _as_function(sigma_fn)
    mapped = T - np.concatenate([a_breaks, s_breaks])
    pts = np.concatenate([integrand_breakpoints(coeffs, ell, config), mapped])

    def integrand(u):
        D = eval_D(coeffs, u, z, d1, config)
        s = s_f(T - u)
        return a_f(T - u) * D + 0.5 * s * s * D * D + d0

    value = quadrature.integrate(
        integrand,
        0.0,
        ell,
        pts,
        layer_width(coeffs),
        config.quadrature_nodes,
        check,
        _QUAD_SLACK * config.rel_tol,
    )
    if complex(z).imag == 0:
        return float(np.real(value))
    return complex(value)


@dataclass(frozen=True)
class OracleSolution:
    """Method-of-steps solution on a uniform grid with Hermite interpolation.

    Attributes
    ----------
    times, values : ndarray
        Grid and solution values.
    slopes_right, slopes_left : ndarray
        One-sided derivatives at the left and right end of each step.
    snap_error : float
        Largest distance between a delay and its grid multiple.
    """

    times: np.ndarray
    values: np.ndarray
    slopes_right: np.ndarray
    slopes_left: np.ndarray
    step: float
    snap_error: float

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.clip(np.floor(t / self.step).astype(int), 0, len(self.times) - 2)
        h = self.step
        s = (t - self.times[k]) / h
        y0, y1 = self.values[k], self.values[k + 1]
        m0, m1 = self.slopes_right[k] * h, self.slopes_left[k] * h
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * m0 + h01 * y1 + h11 * m1


def dde_oracle(
    coeffs: DelayCoefficients,
    g: Callable[[float], float] | float,
    d1: float,
    t_max: float,
    step: float | None = None,
    x0: float | None = None,
) -> OracleSolution:
    """Fourth-order Runge-Kutta method of steps for the delay equation.

    Solves ``x'(t) = b x(t) + sum_j c_j x(t - tau_j) + d1`` on ``[0, t_max]``
    with history ``g`` on negative times and ``x(0) = x0`` (default
    ``g(0)``). Delays are snapped to the grid, so every stage of a step reads
    its delayed values from a single earlier step, interpolated with the
    cubic Hermite polynomial of that step. This keeps fourth order across the
    derivative jumps that propagate from ``t = 0``.

    Parameters
    ----------
    g : callable or float
        History function, evaluated at negative times only (and at ``0`` when
        ``x0`` is not given).
    step : float, optional
        Grid step, default ``tau_1 / 256``.

    Raises
    ------
    StepTooLarge
        If ``step > tau_1 / 8``.
    """
    tau1 = coeffs.tau[0]
    h = tau1 / 256.0 if step is None else float(step)
    if h <= 0:
        raise ValueError("step must be positive")
    if h > tau1 / 8.0 * (1 + 1e-12):
        raise StepTooLarge(f"step {h} exceeds tau_1/8 = {tau1 / 8}")
    g_fn = g if callable(g) else (lambda s, _v=float(g): _v)
    lags = [int(round(t / h)) for t in coeffs.tau]
    snap = max(abs(m * h - t) for m, t in zip(lags, coeffs.tau))
    n_steps = int(math.ceil(t_max / h - 1e-9))
    times = h * np.arange(n_steps + 1)
    x = np.empty(n_steps + 1)
    fr = np.empty(n_steps)
    fl = np.empty(n_steps)
    x[0] = g_fn(0.0) if x0 is None else float(x0)
    b, cs = coeffs.b, coeffs.c
    left0 = np.nextafter(0.0, -1.0)

    def delayed(j_step: int, theta: float) -> float:
        # value at (j_step + theta) * h, read from the already solved step
        if j_step < 0:
            tt = (j_step + theta) * h
            return g_fn(min(tt, left0))
        y0, y1 = x[j_step], x[j_step + 1]
        m0, m1 = fr[j_step] * h, fl[j_step] * h
        s = theta
        return ((2 * s**3 - 3 * s**2 + 1) * y0 + (s**3 - 2 * s**2 + s) * m0
                + (-2 * s**3 + 3 * s**2) * y1 + (s**3 - s**2) * m1)

    for k in range(n_steps):
        hist = [[delayed(k - m, th) for th in (0.0, 0.5, 1.0)] for m in lags]
        dl = [sum(c * hv[i] for c, hv in zip(cs, hist)) + d1 for i in range(3)]
        xk = x[k]
        k1 = b * xk + dl[0]
        k2 = b * (xk + 0.5 * h * k1) + dl[1]
        k3 = b * (xk + 0.5 * h * k2) + dl[1]
        k4 = b * (xk + h * k3) + dl[2]
        x[k + 1] = xk + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        fr[k] = k1
        fl[k] = b * x[k + 1] + dl[2]
    return OracleSolution(times, x, fr, fl, h, snap)
