"""Short-rate dynamics with delays: model data, laws, simulation, stability.

The rate follows

    dr_t = (a(t) + b r_t + sum_j c_j r_{t - tau_j}) dt + sigma(t) dW_t,

with a deterministic initial function ``phi`` on ``[-tau_N, 0]``. Given the
path up to ``t``, ``r_T`` is Gaussian with mean and variance expressed through
the fundamental solution ``R``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import quadrature
from .exceptions import (
    DelayMismatch,
    HistoryTooShort,
    NotConverged,
    SeriesTruncationError,
    StabilityBoundaryWarning,
)
from .series_kernel import (
    DEFAULT_CONFIG,
    DelayCoefficients,
    SeriesConfig,
    eval_R,
    eval_S,
    integrand_breakpoints,
    layer_width,
)

__all__ = [
    "PiecewiseConstant",
    "ModelParams",
    "InitialCurve",
    "PathSample",
    "ConditionalLaw",
    "SimulationResult",
    "Stability",
    "conditional_law",
    "simulate_exact",
    "simulate_euler",
    "simulate_paths",
    "stability_check",
    "limiting_distribution",
    "market_price_of_risk",
    "martingale_bound_xi",
]


# ---------------------------------------------------------------------------
# term structures and model container


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous step function of calendar time.

    ``values[i]`` applies on ``[breaks[i-1], breaks[i])`` with the first
    value extending to minus infinity and the last to plus infinity.
    """

    values: tuple[float, ...]
    breaks: tuple[float, ...] = ()

    def __post_init__(self):
        values = tuple(float(v) for v in np.atleast_1d(self.values))
        breaks = tuple(float(v) for v in np.atleast_1d(self.breaks)) if len(np.atleast_1d(self.breaks)) else ()
        if len(values) != len(breaks) + 1:
            raise ValueError("need exactly one more value than breakpoints")
        if any(b1 <= b0 for b0, b1 in zip(breaks, breaks[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if not all(math.isfinite(v) for v in values + breaks):
            raise ValueError("values and breakpoints must be finite")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "breaks", breaks)

    @classmethod
    def constant(cls, value: float) -> "PiecewiseConstant":
        return cls((float(value),), ())

    @classmethod
    def coerce(cls, value) -> "PiecewiseConstant":
        if isinstance(value, PiecewiseConstant):
            return value
        return cls.constant(value)

    @property
    def is_constant(self) -> bool:
        return len(self.values) == 1

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.is_constant:
            out = np.full(t.shape, self.values[0])
        else:
            idx = np.searchsorted(np.asarray(self.breaks), t, side="right")
            out = np.asarray(self.values)[idx]
        return float(out) if out.ndim == 0 else out

    def pieces(self, lo: float, hi: float) -> list[tuple[float, float, float]]:
        """``(start, end, value)`` triples covering ``[lo, hi]``."""
        edges = [lo] + [b for b in self.breaks if lo < b < hi] + [hi]
        return [(p, q, float(self(p))) for p, q in zip(edges[:-1], edges[1:])]

    def sup(self, lo: float, hi: float, fn: Callable[[float], float] = lambda v: v) -> float:
        """Supremum of ``fn(value)`` over ``[lo, hi)``."""
        return max(fn(v) for _, _, v in self.pieces(lo, hi))


@dataclass(frozen=True)
class ModelParams:
    """Parameters ``(a, b, c, tau, sigma)`` of the delayed short-rate model.

    Parameters
    ----------
    coeffs : DelayCoefficients
        Drift slope ``b``, delay coefficients and delays.
    a : PiecewiseConstant or float
        Drift level.
    sigma : PiecewiseConstant or float
        Volatility, positive.
    """

    coeffs: DelayCoefficients
    a: PiecewiseConstant
    sigma: PiecewiseConstant

    def __post_init__(self):
        object.__setattr__(self, "a", PiecewiseConstant.coerce(self.a))
        object.__setattr__(self, "sigma", PiecewiseConstant.coerce(self.sigma))
        if min(self.sigma.values) <= 0.0:
            raise ValueError("sigma must be positive")

    @classmethod
    def from_values(cls, a, b, c, tau, sigma, a_breaks=(), sigma_breaks=()) -> "ModelParams":
        a_pc = PiecewiseConstant(a, a_breaks) if np.ndim(a) else PiecewiseConstant.constant(a)
        s_pc = PiecewiseConstant(sigma, sigma_breaks) if np.ndim(sigma) else PiecewiseConstant.constant(sigma)
        return cls(DelayCoefficients(b, c, tau), a_pc, s_pc)

    @property
    def b(self) -> float:
        return self.coeffs.b

    @property
    def c(self) -> tuple[float, ...]:
        return self.coeffs.c

    @property
    def tau(self) -> tuple[float, ...]:
        return self.coeffs.tau

    @property
    def is_constant(self) -> bool:
        return self.a.is_constant and self.sigma.is_constant

    def with_values(self, **kwargs) -> "ModelParams":
        """Copy with some of ``a, b, c, tau, sigma`` replaced."""
        a = kwargs.pop("a", self.a)
        sigma = kwargs.pop("sigma", self.sigma)
        coeffs = DelayCoefficients(
            kwargs.pop("b", self.b), kwargs.pop("c", self.c), kwargs.pop("tau", self.tau)
        )
        if kwargs:
            raise TypeError(f"unknown parameters {sorted(kwargs)}")
        return ModelParams(coeffs, PiecewiseConstant.coerce(a), PiecewiseConstant.coerce(sigma))

    def to_dict(self) -> dict:
        out = {
            "a": self.a.values[0] if self.a.is_constant else list(self.a.values),
            "b": self.b,
            "c": list(self.c),
            "tau": list(self.tau),
            "sigma": self.sigma.values[0] if self.sigma.is_constant else list(self.sigma.values),
        }
        if not self.a.is_constant:
            out["a_breaks"] = list(self.a.breaks)
        if not self.sigma.is_constant:
            out["sigma_breaks"] = list(self.sigma.breaks)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        missing = {"a", "b", "c", "tau", "sigma"} - set(data)
        if missing:
            raise ValueError(f"model description lacks keys {sorted(missing)}")
        return cls.from_values(
            data["a"],
            data["b"],
            data["c"],
            data["tau"],
            data["sigma"],
            data.get("a_breaks", ()),
            data.get("sigma_breaks", ()),
        )


# ---------------------------------------------------------------------------
# rate histories


def _trapezoid_on_grid(times: np.ndarray, values: np.ndarray, weight, lo: float, hi: float) -> float:
    """Trapezoid rule for ``int weight(u) r(u) du`` with ``r`` linear between nodes."""
    if hi <= lo:
        return 0.0
    span = max(abs(hi - lo), 1.0)
    inside = (times > lo + 1e-12 * span) & (times < hi - 1e-12 * span)
    u = np.concatenate(([lo], times[inside], [hi]))
    r = np.interp(u, times, values)
    f = np.asarray(weight(u)) * r
    return np.sum(0.5 * np.diff(u) * (f[:-1] + f[1:])).item()


@dataclass(frozen=True)
class InitialCurve:
    """Deterministic initial function ``phi`` on ``[-tau_N, 0]``.

    Attributes
    ----------
    grid : ndarray
        Uniform grid from ``-tau_N`` to ``0`` inclusive.
    values : ndarray
        ``phi`` at the grid points; linear interpolation in between.
    r0 : float, optional
        Rate at time zero; defaults to ``phi(0)``.
    func : callable, optional
        Exact evaluator of ``phi``. When present, history integrals use
        breakpoint-aligned quadrature on it instead of the trapezoid rule.
    kinks : tuple of float
        Points where ``func`` is not smooth.
    meta : dict
        Free-form diagnostics (for example a consistency residual).
    """

    grid: np.ndarray
    values: np.ndarray
    r0: float | None = None
    func: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    kinks: tuple[float, ...] = ()
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid.shape != values.shape:
            raise ValueError("grid and values must be matching 1-d arrays")
        if abs(grid[-1]) > 1e-12 or grid[0] >= 0:
            raise ValueError("grid must run from -tau_N to 0")
        steps = np.diff(grid)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, abs(grid[0])):
            raise ValueError("grid must be uniform and increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("initial curve values must be finite")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kinks", tuple(float(k) for k in self.kinks))
        if self.r0 is None:
            object.__setattr__(self, "r0", float(values[-1]))

    @classmethod
    def flat(cls, value: float, tau_max: float, points_per_tau: int = 64, r0: float | None = None) -> "InitialCurve":
        n = int(points_per_tau) + 1
        grid = np.linspace(-tau_max, 0.0, n)
        return cls(grid, np.full(n, float(value)), r0)

    @classmethod
    def from_function(cls, fn, tau_max: float, n_points: int = 65, r0=None, kinks=(), meta=None) -> "InitialCurve":
        grid = np.linspace(-tau_max, 0.0, n_points)
        return cls(grid, np.asarray(fn(grid), dtype=float), r0, fn, tuple(kinks), dict(meta or {}))

    @property
    def start(self) -> float:
        return float(self.grid[0])

    @property
    def end(self) -> float:
        return 0.0

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def phi(self, s):
        """``phi(s)`` on ``[-tau_N, 0]``."""
        if self.func is not None:
            return self.func(np.asarray(s, dtype=float))
        return np.interp(s, self.grid, self.values)

    def rate(self, t: float) -> float:
        if abs(t) <= 1e-12:
            return float(self.r0)
        return float(self.phi(t))

    def integrate(self, weight, lo: float, hi: float, breakpoints: Iterable[float] = (), layer=None) -> float:
        """``int_lo^hi weight(u) phi(u) du`` inside ``[-tau_N, 0]``."""
        if hi <= lo:
            return 0.0
        if self.func is None:
            return _trapezoid_on_grid(self.grid, self.values, weight, lo, hi)
        pts = list(breakpoints) + list(self.kinks)
        return quadrature.integrate(lambda u: weight(u) * self.func(u), lo, hi, pts, layer).item()


@dataclass(frozen=True)
class PathSample:
    """Rate trajectory on a uniform grid, with its pre-history.

    ``values[i]`` is the rate at ``t0 + (i - n_pre) * dt``; the first
    ``n_pre`` entries lie before ``t0``.
    """

    t0: float
    dt: float
    values: np.ndarray
    n_pre: int = 0
    seed: int | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if values.ndim != 1 or values.size <= self.n_pre or self.n_pre < 0:
            raise ValueError("values must be 1-d and longer than the pre-history")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * (np.arange(self.values.size) - self.n_pre)

    @property
    def start(self) -> float:
        return self.t0 - self.n_pre * self.dt

    @property
    def end(self) -> float:
        return self.t0 + (self.values.size - 1 - self.n_pre) * self.dt

    def rate(self, t: float) -> float:
        return float(np.interp(t, self.times, self.values))

    def integrate(self, weight, lo: float, hi: float, breakpoints: Iterable[float] = (), layer=None) -> float:
        """Trapezoid rule for ``int_lo^hi weight(u) r_u du`` on the path grid."""
        return _trapezoid_on_grid(self.times, self.values, weight, lo, hi)

    @classmethod
    def from_initial_curve(cls, phi: InitialCurve, dt: float | None = None) -> "PathSample":
        """Pre-history of ``phi`` sampled on its grid, ending with ``r0`` at zero."""
        step = phi.dt if dt is None else float(dt)
        n_pre = int(round(-phi.start / step))
        t = step * (np.arange(n_pre + 1) - n_pre)
        vals = np.asarray(phi.phi(t), dtype=float).copy()
        vals[-1] = phi.r0
        return cls(0.0, step, vals, n_pre)


def _check_history(history, t: float, tau_max: float):
    tol = 1e-9 * max(1.0, abs(t), tau_max)
    if history.start > t - tau_max + tol or history.end < t - tol:
        raise HistoryTooShort(
            f"history covers [{history.start}, {history.end}], need [{t - tau_max}, {t}]"
        )


# ---------------------------------------------------------------------------
# conditional law


@dataclass(frozen=True)
class ConditionalLaw:
    """Gaussian law of ``r_T`` given the information at ``t``."""

    mean: float
    variance: float

    @property
    def std(self) -> float:
        return math.sqrt(max(self.variance, 0.0))


def _drift_integral(model: ModelParams, T: float, ell: float, config: SeriesConfig) -> float:
    """``int_0^ell a(T - u) R(u) du``, exact per constant piece of ``a``."""
    total = 0.0
    for p, q, value in model.a.pieces(T - ell, T):
        if value == 0.0:
            continue
        total += value * (eval_S(model.coeffs, T - p, config) - eval_S(model.coeffs, T - q, config))
    return float(total)


_MAX_PANEL = 2.0  # keeps 16-node panels exact for the slow decay of R^2 at large horizons


def _variance_integral(model: ModelParams, T: float, ell: float, config: SeriesConfig) -> float:
    """``int_0^ell sigma(T - u)^2 R(u)^2 du`` by aligned quadrature."""
    if ell <= 0:
        return 0.0
    pts = integrand_breakpoints(model.coeffs, ell, config)
    total = 0.0
    for p, q, value in model.sigma.pieces(T - ell, T):
        lo, hi = T - q, T - p
        part = quadrature.integrate(
            lambda u: eval_R(model.coeffs, u, config) ** 2,
            lo,
            hi,
            pts,
            layer_width(model.coeffs),
            config.quadrature_nodes,
            max_panel=_MAX_PANEL,
        )
        total += value * value * part
    return float(total)


def _delay_history_term(model: ModelParams, history, t: float, T: float, kernel) -> float:
    """``sum_j c_j int_{t - tau_j}^{min(t, T - tau_j)} kernel(T - u - tau_j) r_u du``.

    The upper limit stops where the kernel argument turns negative, so the
    jump of ``R`` at zero sits on an interval end.
    """
    total = 0.0
    for c_j, tau_j in zip(model.c, model.tau):
        if c_j == 0.0:
            continue
        lo, hi = t - tau_j, min(t, T - tau_j)
        if hi <= lo:
            continue
        pts = T - tau_j - integrand_breakpoints(model.coeffs, T - lo - tau_j)
        val = history.integrate(lambda u, _s=T - tau_j: kernel(_s - u), lo, hi, pts, layer_width(model.coeffs))
        total += c_j * val
    return total


def conditional_law(model: ModelParams, history, t: float, T: float, config: SeriesConfig = DEFAULT_CONFIG) -> ConditionalLaw:
    """Mean and variance of ``r_T`` given the path up to ``t``.

    Parameters
    ----------
    history : PathSample or InitialCurve
        Must cover ``[t - tau_N, t]``.

    Raises
    ------
    HistoryTooShort
        When the history does not reach back to ``t - tau_N``.
    """
    if T < t:
        raise ValueError("need T >= t")
    _check_history(history, t, model.coeffs.tau_max)
    ell = T - t
    r_t = history.rate(t)
    if ell == 0:
        return ConditionalLaw(r_t, 0.0)
    coeffs = model.coeffs
    mean = (
        _drift_integral(model, T, ell, config)
        + eval_R(coeffs, ell, config) * r_t
        + _delay_history_term(model, history, t, T, lambda x: eval_R(coeffs, x, config))
    )
    var = _variance_integral(model, T, ell, config)
    return ConditionalLaw(float(mean), float(var))


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class SimulationResult:
    """Recorded values and running integrals of simulated paths.

    Attributes
    ----------
    times : ndarray
        Recorded times (all at or after zero).
    rates : ndarray, shape (n_paths, n_times)
    integrals : ndarray, shape (n_paths, n_times)
        Trapezoid integral of ``r`` from zero to each recorded time.
    """

    times: np.ndarray
    rates: np.ndarray
    integrals: np.ndarray
    seed: int


def _delay_steps(tau: Sequence[float], dt: float) -> list[int]:
    steps = []
    for t in tau:
        m = int(round(t / dt))
        if m < 1 or abs(m * dt - t) > 1e-8 * max(t, dt):
            raise ValueError(f"delay {t} is not a whole number of steps of {dt}")
        steps.append(m)
    return steps


def _n_steps(horizon: float, dt: float) -> int:
    n = int(round(horizon / dt))
    if n < 1 or abs(n * dt - horizon) > 1e-8 * max(horizon, dt):
        raise ValueError("horizon must be a positive whole number of steps")
    return n


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


def _exact_step_coefficients(model: ModelParams, t_k: float, dt: float, config: SeriesConfig):
    """Affine map of one exact transition from ``t_k`` to ``t_k + dt``."""
    t1 = t_k + dt
    m0 = _drift_integral(model, t1, dt, config)
    r_dt = eval_R(model.coeffs, dt, config)
    sd = math.sqrt(_variance_integral(model, t1, dt, config))
    return m0, r_dt, sd


def _run(model, phi, r0, horizon, dt, n_paths, seed, scheme, record_every, config):
    if dt > model.coeffs.tau[0] * (1 + 1e-12):
        raise ValueError("dt must not exceed tau_1")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    lags = _delay_steps(model.tau, dt)
    n = _n_steps(horizon, dt)
    m_max = max(lags)
    r0 = phi.r0 if r0 is None else float(r0)
    pre_t = dt * (np.arange(m_max) - m_max)
    pre = np.asarray(phi.phi(pre_t), dtype=float)
    rec_idx = np.arange(0, n + 1, record_every)
    if rec_idx[-1] != n:
        rec_idx = np.append(rec_idx, n)
    times = rec_idx * dt
    rates = np.empty((rec_idx.size, n_paths))
    integrals = np.empty((rec_idx.size, n_paths))
    if n_paths == 0:
        return times, rates.T, integrals.T, pre
    # ring buffer of the last m_max + 1 rates, row k % size holds r_k
    size = m_max + 1
    ring = np.empty((size, n_paths))
    for i in range(m_max):
        ring[(i - m_max) % size] = pre[i]
    ring[0] = r0
    acc = np.zeros(n_paths)
    rec_pos = 0
    if rec_idx[0] == 0:
        rates[0] = r0
        integrals[0] = 0.0
        rec_pos = 1
    rng = _rng(seed)
    cs = model.c
    const = model.is_constant
    coef = _exact_step_coefficients(model, 0.0, dt, config) if (scheme == "exact" and const) else None
    for k in range(n):
        t_k = k * dt
        z = rng.standard_normal(n_paths)
        r_k = ring[k % size]
        if scheme == "exact":
            m0, r_dt, sd = coef if const else _exact_step_coefficients(model, t_k, dt, config)
            new = m0 + r_dt * r_k + sd * z
            for c_j, m_j in zip(cs, lags):
                if c_j != 0.0:
                    new += c_j * 0.5 * dt * (r_dt * ring[(k - m_j) % size] + ring[(k - m_j + 1) % size])
        else:
            drift = model.a(t_k) + model.b * r_k
            for c_j, m_j in zip(cs, lags):
                if c_j != 0.0:
                    drift = drift + c_j * ring[(k - m_j) % size]
            new = r_k + drift * dt + model.sigma(t_k) * math.sqrt(dt) * z
        acc += 0.5 * dt * (r_k + new)
        ring[(k + 1) % size] = new
        if rec_pos < rec_idx.size and rec_idx[rec_pos] == k + 1:
            rates[rec_pos] = new
            integrals[rec_pos] = acc
            rec_pos += 1
    return times, rates.T, integrals.T, pre


def simulate_paths(
    model: ModelParams,
    phi: InitialCurve,
    r0: float | None,
    horizon: float,
    dt: float,
    n_paths: int,
    seed: int,
    scheme: str = "exact",
    record_every: int = 1,
    config: SeriesConfig = DEFAULT_CONFIG,
) -> SimulationResult:
    """Memory-light simulation returning recorded rates and integrals.

    Keeps only a rolling window of ``tau_N / dt`` steps per path, so large
    path counts fit in memory. ``scheme`` is ``"exact"`` (Gaussian
    transitions) or ``"euler"``. Normals are drawn step by step from a
    Philox generator keyed by ``seed``.
    """
    if scheme not in ("exact", "euler"):
        raise ValueError("scheme must be 'exact' or 'euler'")
    times, rates, integrals, _ = _run(model, phi, r0, horizon, dt, int(n_paths), seed, scheme, int(record_every), config)
    return SimulationResult(times, rates, integrals, int(seed))


def _as_paths(model, phi, r0, horizon, dt, n_paths, seed, scheme, config) -> list[PathSample]:
    times, rates, _, pre = _run(model, phi, r0, horizon, dt, int(n_paths), seed, scheme, 1, config)
    return [PathSample(0.0, dt, np.concatenate((pre, rates[i])), pre.size, seed) for i in range(int(n_paths))]


def simulate_exact(model, phi, r0, horizon, dt, n_paths, seed, config: SeriesConfig = DEFAULT_CONFIG) -> list[PathSample]:
    """Paths built from exact one-step Gaussian transitions.

    Each step draws ``r_{t+dt}`` from its conditional law given the path,
    with the delay integral taken by the trapezoid rule on the simulation
    grid. Every delay must be a whole number of steps and ``dt <= tau_1``.
    """
    return _as_paths(model, phi, r0, horizon, dt, n_paths, seed, "exact", config)


def simulate_euler(model, phi, r0, horizon, dt, n_paths, seed, config: SeriesConfig = DEFAULT_CONFIG) -> list[PathSample]:
    """Euler-Maruyama paths with delayed values read from the path itself."""
    return _as_paths(model, phi, r0, horizon, dt, n_paths, seed, "euler", config)


# ---------------------------------------------------------------------------
# stability and long-run law


class Stability(enum.Enum):
    STABLE_FOR_ALL_DELAYS = "StableForAllDelays"
    NOT_GUARANTEED = "NotGuaranteed"


def stability_check(coeffs: DelayCoefficients) -> Stability:
    """Delay-independent stability test.

    Stable for every choice of delays when ``b + sum c != 0``,
    ``|b| >= sum |c|`` and ``b < 0``. The equality case of the middle
    condition counts as satisfied and triggers a
    :class:`StabilityBoundaryWarning`.
    """
    b = coeffs.b
    total = math.fsum(coeffs.c)
    abs_total = math.fsum(abs(c) for c in coeffs.c)
    ok = (b + total != 0.0) and (abs(b) >= abs_total) and (b < 0.0)
    if b < 0.0 and abs(abs(b) - abs_total) <= 1e-12:
        warnings.warn("|b| is within 1e-12 of sum |c_j|", StabilityBoundaryWarning, stacklevel=2)
    return Stability.STABLE_FOR_ALL_DELAYS if ok else Stability.NOT_GUARANTEED


def limiting_distribution(
    model: ModelParams,
    t_grid_cap: float = 512.0,
    tol: float = 1e-10,
    config: SeriesConfig = DEFAULT_CONFIG,
) -> ConditionalLaw:
    """Long-run Gaussian law of ``r_T``.

    Evaluates ``int_0^T a(u) R(T - u) du`` and ``int_0^T sigma(u)^2 R(T - u)^2 du``
    on a doubling sequence of horizons until consecutive values agree to
    ``tol`` (relative, with a unit floor on the mean).

    Raises
    ------
    NotConverged
        If the horizon cap is reached first or the series order cap is hit.
    """
    if stability_check(model.coeffs) is not Stability.STABLE_FOR_ALL_DELAYS:
        raise ValueError("the limiting law needs the stability condition")
    T = 4.0 * model.coeffs.tau_max
    prev = None
    while T <= t_grid_cap:
        try:
            mean = _drift_integral(model, T, T, config)
            var = _variance_integral(model, T, T, config)
        except SeriesTruncationError as exc:
            raise NotConverged(str(exc)) from exc
        if prev is not None:
            dm = abs(mean - prev[0])
            dv = abs(var - prev[1])
            if dm <= tol * max(1.0, abs(mean)) and dv <= tol * max(abs(var), 1e-300):
                return ConditionalLaw(mean, var)
        prev = (mean, var)
        T *= 2.0
    raise NotConverged(f"no convergence up to horizon {t_grid_cap}")


# ---------------------------------------------------------------------------
# change of measure


def _same_delays(model_q: ModelParams, model_p: ModelParams):
    if len(model_q.tau) != len(model_p.tau) or any(
        abs(x - y) > 1e-12 for x, y in zip(model_q.tau, model_p.tau)
    ):
        raise DelayMismatch("models must share the same delays")


def market_price_of_risk(model_Q: ModelParams, model_P: ModelParams, history, t: float) -> float:
    """Market price of risk turning the real-world drift into the pricing drift.

    ``lambda_t = [a(t) - alpha(t) + (b - beta) r_t
    + sum_j (c_j - gamma_j) r_{t - tau_j}] / sigma(t)``, where the
    real-world model supplies ``alpha, beta, gamma``.
    """
    _same_delays(model_Q, model_P)
    _check_history(history, t, model_Q.coeffs.tau_max)
    num = model_Q.a(t) - model_P.a(t) + (model_Q.b - model_P.b) * history.rate(t)
    for cq, cp, tau in zip(model_Q.c, model_P.c, model_Q.tau):
        num += (cq - cp) * history.rate(t - tau)
    return float(num / model_Q.sigma(t))


def _mul(x: float, y: float) -> float:
    # 0 * inf is taken as 0: a vanishing bracket needs no volatility bound
    return 0.0 if x == 0.0 or y == 0.0 else x * y


def martingale_bound_xi(model_Q: ModelParams, model_P: ModelParams, phi: InitialCurve, r0: float, horizon: float) -> float:
    """Growth constant that makes the measure-change density a martingale.

    Returns the number ``xi`` bounding both the squared market price of risk
    and the squared drift plus diffusion by ``xi (1 + sup r^2)`` on
    ``[0, horizon]``, built from ``c_phi = sup |phi|``,
    ``c_a = sup (a - alpha)^2``, ``c_sigma = sup 1/sigma^2``,
    ``c_a~ = sup a^2`` and ``c_sigma~ = sup sigma^2``.
    """
    _same_delays(model_Q, model_P)
    H = float(horizon)
    N = model_Q.coeffs.N
    c_phi = float(np.max(np.abs(phi.values)))
    edges = sorted({0.0, H, *[b for b in model_Q.a.breaks + model_P.a.breaks if 0 < b < H]})
    c_a = max((model_Q.a(p) - model_P.a(p)) ** 2 for p in edges[:-1]) if H > 0 else 0.0
    c_sigma = model_Q.sigma.sup(0.0, H, lambda v: 1.0 / (v * v) if v * v > 0 else math.inf)
    ca_t = model_Q.a.sup(0.0, H, lambda v: v * v)
    cs_t = model_Q.sigma.sup(0.0, H, lambda v: v * v)
    dc2 = math.fsum((cq - cp) ** 2 for cq, cp in zip(model_Q.c, model_P.c))
    c2 = math.fsum(c * c for c in model_Q.c)
    db2 = (model_Q.b - model_P.b) ** 2
    bracket = max(2 * c_a + N * c_phi**2 * dc2, 2 * db2 + N * dc2)
    c_lambda = _mul(2.0 * c_sigma, bracket)
    drift = max(4 * ca_t + 2 * N * c_phi**2 * c2 + cs_t, 4 * model_Q.b**2 + 2 * N * c2)
    return float(max(abs(r0), c_lambda, drift + _mul(cs_t, c_lambda)))
