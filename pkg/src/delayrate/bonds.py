"""Zero-coupon bonds, the exponential-affine transform and forward rates.

For ``z``, ``d0``, ``d1`` the transform

    E[exp(-d0 (T-t) ... )] = exp{A(T-t) + D(T-t) r_t
                                 + sum_j c_j int_{t-tau_j}^t D(T-u-tau_j) r_u du}

holds with ``D`` and ``A`` from :mod:`delayrate.series_kernel`. The bond is
the case ``z = 0, d0 = 0, d1 = -1``; the characteristic function of ``r_T``
is the case ``z = iu, d0 = d1 = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import quadrature
from .series_kernel import (
    DEFAULT_CONFIG,
    SeriesConfig,
    eval_A,
    eval_D,
    eval_R,
    eval_S,
    integrand_breakpoints,
    layer_width,
)
from .shortrate import (
    InitialCurve,
    ModelParams,
    PathSample,
    _check_history,
    _delay_history_term,
    _drift_integral,
    _rng,
    _exact_step_coefficients,
    conditional_law,
)

__all__ = [
    "AffineTransformSpec",
    "BondQuote",
    "affine_transform",
    "bond_price",
    "bond_prices",
    "bond_exponent",
    "char_function",
    "forward_rate",
    "hjm_drift_residual",
]


@dataclass(frozen=True)
class AffineTransformSpec:
    """Arguments ``(z, d0, d1, T)`` of the exponential-affine transform."""

    z: complex
    d0: float
    d1: float
    T: float

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")


@dataclass(frozen=True)
class BondQuote:
    """Market discount factor for one maturity."""

    maturity: float
    price: float

    def __post_init__(self):
        if not self.maturity > 0:
            raise ValueError("maturity must be positive")
        if not 0.0 < self.price < 1.5:
            raise ValueError("bond price outside the sanity band (0, 1.5)")


def _exponent(model: ModelParams, history, t: float, T: float, z: complex, d0: float, d1: float,
              config: SeriesConfig, check: bool):
    """Exponent of the transform; real for real ``z``."""
    _check_history(history, t, model.coeffs.tau_max)
    ell = T - t
    if ell == 0:
        return complex(z) * history.rate(t) if z != 0 else 0.0
    coeffs = model.coeffs
    A = eval_A(coeffs, model.a, model.sigma, T, ell, z, d0, d1, config, check)
    D = eval_D(coeffs, ell, z, d1, config)
    hist = _delay_history_term(model, history, t, T, lambda x: eval_D(coeffs, x, z, d1, config))
    return A + D * history.rate(t) + hist


def affine_transform(model: ModelParams, history, t: float, spec: AffineTransformSpec,
                     config: SeriesConfig = DEFAULT_CONFIG, check: bool = True) -> complex:
    """Exponential-affine transform at ``t`` for ``spec``.

    Parameters
    ----------
    history : PathSample or InitialCurve
        Rate path covering ``[t - tau_N, t]``.
    """
    if not spec.T > t:
        raise ValueError("need T > t")
    return complex(np.exp(_exponent(model, history, t, spec.T, spec.z, spec.d0, spec.d1, config, check)))


def bond_exponent(model: ModelParams, history, t: float, T: float,
                  config: SeriesConfig = DEFAULT_CONFIG, check: bool = True) -> float:
    """``ln B(t, T)``."""
    if T < t:
        raise ValueError("need t <= T")
    return float(np.real(_exponent(model, history, t, T, 0.0, 0.0, -1.0, config, check)))


def bond_price(model: ModelParams, history, t: float, T: float,
               config: SeriesConfig = DEFAULT_CONFIG, check: bool = True) -> float:
    """Zero-coupon bond price ``B(t, T)``; exactly one at ``T = t``."""
    return math.exp(bond_exponent(model, history, t, T, config, check))


def _stacked(intervals, layer, n):
    """Gauss-Legendre nodes for several intervals, with segment offsets."""
    us, ws, starts = [], [], []
    count = 0
    for lo, hi, pts in intervals:
        starts.append(count)
        if hi <= lo:
            continue
        u, w = quadrature.nodes_on(quadrature.panel_edges(lo, hi, pts, layer), n)
        us.append(u)
        ws.append(w)
        count += u.size
    if not us:
        return np.empty(0), np.empty(0), np.asarray(starts), count
    return np.concatenate(us), np.concatenate(ws), np.asarray(starts), count


def _segment_sums(values, starts, total):
    out = np.zeros(starts.size)
    if total == 0:
        return out
    ends = np.append(starts[1:], total)
    nonempty = ends > starts
    out[nonempty] = np.add.reduceat(values, starts[nonempty])
    return out


def bond_prices(model: ModelParams, phi: InitialCurve, maturities, config: SeriesConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Time-zero bond prices for many maturities at once.

    Same quadrature rule as :func:`bond_price`, with the kernel evaluated
    once on the stacked nodes. Falls back to the scalar routine for
    time-dependent ``a`` or ``sigma`` or a grid-only initial curve.
    """
    mats = np.asarray(maturities, dtype=float)
    if not model.is_constant or phi.func is None:
        return np.array([bond_price(model, phi, 0.0, float(T), config, False) for T in mats])
    coeffs = model.coeffs
    layer = layer_width(coeffs)
    n = config.quadrature_nodes
    a = float(model.a(0.0))
    sig2 = float(model.sigma(0.0)) ** 2
    pts = integrand_breakpoints(coeffs, float(mats.max(initial=0.0)), config)
    u, w, starts, total = _stacked([(0.0, T, pts) for T in mats], layer, n)
    D = eval_D(coeffs, u, 0.0, -1.0, config) if total else np.empty(0)
    A = _segment_sums(w * (a * D + 0.5 * sig2 * D * D), starts, total)
    expo = A + eval_D(coeffs, mats, 0.0, -1.0, config) * phi.r0
    for c_j, tau_j in zip(model.c, model.tau):
        if c_j == 0.0:
            continue
        intervals = []
        for T in mats:
            lo, hi = -tau_j, min(0.0, T - tau_j)
            brk = T - tau_j - integrand_breakpoints(coeffs, max(T, 0.0), config)
            intervals.append((lo, hi, np.concatenate([brk, phi.kinks])))
        u, w, starts, total = _stacked(intervals, layer, n)
        if total == 0:
            continue
        shift = np.repeat(mats - tau_j, np.diff(np.append(starts, total)))
        vals = w * eval_D(coeffs, shift - u, 0.0, -1.0, config) * phi.func(u)
        expo = expo + c_j * _segment_sums(vals, starts, total)
    return np.exp(expo)


def char_function(model: ModelParams, history, t: float, T: float, u: float,
                  config: SeriesConfig = DEFAULT_CONFIG) -> complex:
    """Characteristic function of ``r_T`` given the path up to ``t``."""
    if not T > t:
        raise ValueError("need T > t")
    law = conditional_law(model, history, t, T, config)
    return complex(np.exp(1j * u * law.mean - 0.5 * u * u * law.variance))


def _convexity_integral(model: ModelParams, T: float, ell: float, config: SeriesConfig) -> float:
    """``int_0^ell sigma(T-v)^2 D(v) R(v) dv`` with ``D = -S`` and ``S' = R``."""
    total = 0.0
    for p, q, value in model.sigma.pieces(T - ell, T):
        s_hi = eval_S(model.coeffs, T - p, config)
        s_lo = eval_S(model.coeffs, T - q, config)
        total += -0.5 * value * value * (s_hi * s_hi - s_lo * s_lo)
    return float(total)


def forward_rate(model: ModelParams, history, t: float, T: float, config: SeriesConfig = DEFAULT_CONFIG) -> float:
    """Instantaneous forward rate ``f(t, T) = -d/dT ln B(t, T)``.

    Sum of the drift integral, the convexity term
    ``int_t^T sigma(u)^2 D(T-u) R(T-u) du``, ``R(T-t) r_t`` and the delay
    history term; all but the history term are closed forms in ``S``.
    """
    if T < t:
        raise ValueError("need t <= T")
    _check_history(history, t, model.coeffs.tau_max)
    ell = T - t
    coeffs = model.coeffs
    return float(
        _drift_integral(model, T, ell, config)
        + _convexity_integral(model, T, ell, config)
        + eval_R(coeffs, ell, config) * history.rate(t)
        + np.real(_delay_history_term(model, history, t, T, lambda x: eval_R(coeffs, x, config)))
    )


def hjm_drift_residual(model: ModelParams, history, t: float, T: float, dt: float, n_paths: int,
                       seed: int, config: SeriesConfig = DEFAULT_CONFIG, return_se: bool = False):
    """Monte Carlo check of the forward-rate drift over one step.

    Estimates ``E[f(t+dt, T) - f(t, T)]`` by sampling ``r_{t+dt}`` from its
    exact transition and subtracts the drift ``-sigma(t)^2 D(T-t) R(T-t) dt``.
    The history is resampled on a grid of step ``dt``, which must divide
    every delay. ``f(t+dt, T)`` is affine in ``r_{t+dt}``, so two
    deterministic evaluations give it for every sample.

    Returns
    -------
    float or (float, float)
        The residual, and its standard error when ``return_se`` is set.
    """
    if not t + dt < T:
        raise ValueError("need t + dt < T")
    _check_history(history, t, model.coeffs.tau_max)
    tau_max = model.coeffs.tau_max
    m = int(round(tau_max / dt))
    if abs(m * dt - tau_max) > 1e-8 * tau_max:
        raise ValueError("dt must divide the delays")
    grid = t - tau_max + dt * np.arange(m + 1)
    vals = np.array([history.rate(u) for u in grid])
    f_old = forward_rate(model, PathSample(t, dt, vals, m), t, T, config)

    def f_new(r_next: float) -> float:
        path = PathSample(t + dt, dt, np.append(vals, r_next), m + 1)
        return forward_rate(model, path, t + dt, T, config)

    f0 = f_new(0.0)
    slope = f_new(1.0) - f0
    m0, r_dt, sd = _exact_step_coefficients(model, t, dt, config)
    mean = m0 + r_dt * vals[-1]
    for c_j, tau_j in zip(model.c, model.tau):
        k = int(round(tau_j / dt))
        mean += c_j * 0.5 * dt * (r_dt * vals[m - k] + vals[m - k + 1])
    z = _rng(seed).standard_normal(int(n_paths))
    samples = f0 + slope * (mean + sd * z)
    ell = T - t
    drift = -model.sigma(t) ** 2 * float(eval_D(model.coeffs, ell, 0.0, -1.0, config)) \
        * eval_R(model.coeffs, ell, config) * dt
    residual = float(np.mean(samples) - f_old - drift)
    if return_se:
        return residual, float(np.std(samples, ddof=1) / math.sqrt(n_paths))
    return residual
