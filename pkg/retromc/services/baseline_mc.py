"""Trapezoidal discretization baseline with a geometric-average control variate."""
import logging
import math
import time
from dataclasses import dataclass
from functools import partial
from typing import Callable, Iterator, Optional, Tuple

import numpy as np
from scipy import integrate, optimize

from retromc.exceptions import NumericalError
from retromc.models.params import GridSpec, ModelParams, OptionType, PayoffSpec, StrikeStyle
from retromc.models.results import RunResult
from retromc.services.runner import SampleBatch, concat, merged_moments, run_batches
from retromc.services.statistics import control_variate_estimate, make_result, merge_all
from retromc.services.stochastic_core import RngStream, norm_cdf

logger = logging.getLogger(__name__)

# Paths per chunk are chosen so one chunk holds about this many grid values
CHUNK_CELLS = 2_000_000
# Largest accepted quadrature error estimate, relative to the expectation
QUAD_RTOL = 1e-7
# Standard-normal range of the outer integral
_OUTER_RANGE = 40.0


@dataclass(frozen=True)
class GeometricMoments:
    """Gaussian moments of G - log S0, G being the trapezoidal average of log S."""
    mean: float
    variance: float
    covariance: float  # with log S_T


def trapezoid_weights(M: int) -> np.ndarray:
    w = np.ones(M + 1)
    w[0] = w[-1] = 0.5
    return w


def discrete_geometric_moments(params: ModelParams, grid: GridSpec) -> GeometricMoments:
    """Exact moments of the trapezoidal average of sigma W + gamma t on M steps.

    Written in the Brownian increments, the average is
    sum_i tail_i dW_i with tail_i = (dt/T) sum_{k >= i} w_k.
    """
    M, T, sigma = grid.M, params.T, params.sigma
    dt = T / M
    tail = np.cumsum(trapezoid_weights(M)[::-1])[::-1][1:] * dt / T
    s2 = sigma * sigma
    return GeometricMoments(
        mean=0.5 * params.gamma * T,
        variance=s2 * dt * math.fsum(tail * tail),
        covariance=s2 * dt * math.fsum(tail),
    )


def _black_part(c: float, forward: float, v: float, option_type: OptionType) -> float:
    """E[(c + X)+] for a call, E[(-c - X)+] for a put; X lognormal with mean forward and log-variance v."""
    if option_type == OptionType.CALL:
        if c >= 0.0:
            return c + forward
        if forward == 0.0:
            return 0.0
        k = -c
        sd = math.sqrt(v)
        if sd == 0.0:
            return max(forward - k, 0.0)
        d1 = (math.log(forward / k) + 0.5 * v) / sd
        return forward * norm_cdf(d1) - k * norm_cdf(d1 - sd)
    k = -c
    if k <= 0.0:
        return 0.0
    if forward == 0.0:
        return k
    sd = math.sqrt(v)
    if sd == 0.0:
        return max(k - forward, 0.0)
    d1 = (math.log(forward / k) + 0.5 * v) / sd
    return k * norm_cdf(sd - d1) - forward * norm_cdf(-d1)


def control_variate_expectation(params: ModelParams, payoff: PayoffSpec, grid: GridSpec) -> float:
    """E[e^{-rT}(alpha S_T + beta T e^G - K)+] for the discrete geometric average G.

    Conditioning on log S_T leaves a lognormal in G, so the inner expectation
    is of Black type. The outer one is an adaptive quadrature in the
    standardized log S_T, split where the conditional forward crosses the
    strike. With alpha = 0 the outer integral disappears.
    """
    mom = discrete_geometric_moments(params, grid)
    T, S0, K = params.T, params.S0, payoff.strike
    scale = params.beta * T * S0
    disc = params.discount
    kind = payoff.option_type

    if params.alpha == 0.0:
        forward = scale * math.exp(mom.mean + 0.5 * mom.variance)
        return disc * _black_part(-K, forward, mom.variance, kind)

    mean_l = params.gamma * T
    sd_l = params.sigma * math.sqrt(T)
    slope = mom.covariance / (sd_l * sd_l)
    v_c = max(mom.variance - slope * mom.covariance, 0.0)
    if v_c <= 1e-12 * mom.variance:
        v_c = 0.0

    def conditional_forward(x: float) -> float:
        return scale * math.exp(mom.mean + slope * sd_l * x + 0.5 * v_c)

    def inner(x: float) -> float:
        l = mean_l + sd_l * x
        return _black_part(params.alpha * S0 * math.exp(l) - K, conditional_forward(x), v_c, kind)

    def moneyness(x: float) -> float:
        return params.alpha * S0 * math.exp(mean_l + sd_l * x) + conditional_forward(x) - K

    return disc * _outer_expectation(inner, moneyness)


def _outer_expectation(inner: Callable[[float], float], moneyness: Callable[[float], float]) -> float:
    """E[inner(X)] for X ~ N(0, 1), split at the root of the increasing moneyness."""

    def integrand(x: float) -> float:
        return inner(x) * math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)

    lo, hi = -_OUTER_RANGE, _OUTER_RANGE
    points = {lo, -8.0, 8.0, hi}
    if moneyness(lo) < 0.0 < moneyness(hi):
        points.add(optimize.brentq(moneyness, lo, hi, xtol=1e-14))
    points = sorted(points)

    total, error = 0.0, 0.0
    for a, b in zip(points[:-1], points[1:]):
        value, err = integrate.quad(integrand, a, b, epsabs=1e-12, epsrel=1e-10, limit=200)
        total += value
        error += err
    if not math.isfinite(total) or error > QUAD_RTOL * max(1.0, abs(total)):
        raise NumericalError(f"control expectation did not converge: {total} (error estimate {error})")
    return total


def trap_paths(params: ModelParams, M: int, rng: RngStream, count: int
               ) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (S_T, trapezoidal int S, trapezoidal average of log S) chunk by chunk."""
    T = params.T
    dt = T / M
    w = trapezoid_weights(M)
    drift = math.log(params.S0) + params.gamma * dt * np.arange(M + 1)
    chunk = max(1, CHUNK_CELLS // M)
    for start in range(0, count, chunk):
        size = min(chunk, count - start)
        W = np.zeros((size, M + 1))
        np.cumsum(rng.normals((size, M)) * math.sqrt(dt), axis=1, out=W[:, 1:])
        log_s = drift + params.sigma * W
        S = np.exp(log_s)
        yield S[:, -1], dt * (S @ w), dt * (log_s @ w) / T


def _vector_payoff(payoff: PayoffSpec, underlying: np.ndarray) -> np.ndarray:
    if payoff.option_type == OptionType.CALL:
        return np.maximum(underlying - payoff.strike, 0.0)
    return np.maximum(payoff.strike - underlying, 0.0)


def _trap_batch(params: ModelParams, payoff: PayoffSpec, M: int, with_control: bool,
                rng: RngStream, count: int) -> SampleBatch:
    disc = params.discount
    weights, controls = [], []
    for s_T, integral, g in trap_paths(params, M, rng, count):
        if payoff.style == StrikeStyle.FLOATING:
            average = integral / params.T
            gap = average - s_T if payoff.option_type == OptionType.CALL else s_T - average
            weights.append(disc * np.maximum(gap, 0.0))
        else:
            weights.append(disc * _vector_payoff(payoff, params.alpha * s_T + params.beta * integral))
        if with_control:
            proxy = params.alpha * s_T + params.beta * params.T * np.exp(g)
            controls.append(disc * _vector_payoff(payoff, proxy))
    return SampleBatch(
        worker_id=0,
        weights=np.concatenate(weights) if weights else np.empty(0),
        controls=(np.concatenate(controls) if controls else np.empty(0)) if with_control else None,
    )


def _underlying_batch(params: ModelParams, M: int, rng: RngStream, count: int) -> SampleBatch:
    parts = [params.alpha * s_T + params.beta * integral for s_T, integral, _ in trap_paths(params, M, rng, count)]
    return SampleBatch(worker_id=0, weights=np.concatenate(parts) if parts else np.empty(0))


def trap_underlying_samples(params: ModelParams, M: int, n: int, seed: int, workers: int = 1) -> np.ndarray:
    """n trapezoidal draws of alpha S_T + beta int S."""
    return concat(run_batches(partial(_underlying_batch, params, M), n, seed, workers))


def trap_kv_price(params: ModelParams, payoff: PayoffSpec, grid: Optional[GridSpec] = None, n: int = 100_000,
                  seed: int = 42, workers: int = 1, control_variate: bool = True,
                  fitted_lambda: bool = False) -> RunResult:
    """Trapezoidal Monte Carlo price, adjusted by the geometric control variate for fixed strikes."""
    grid = grid or GridSpec()
    use_cv = control_variate and payoff.style == StrikeStyle.FIXED

    logger.info(f"Pricing with trap-kv: n={n}, M={grid.M}, control variate={use_cv}, workers={workers}, seed={seed}")
    start = time.perf_counter()
    batches = run_batches(partial(_trap_batch, params, payoff, grid.M, use_cv), n, seed, workers)
    wall = time.perf_counter() - start

    raw = merged_moments(batches)
    diagnostics = {"raw_price": raw.mean, "raw_std_error": raw.std_error, "steps": float(grid.M)}
    if use_cv:
        expectation = control_variate_expectation(params, payoff, grid)
        price, se, lam = control_variate_estimate(merge_all([b.control_moments() for b in batches]),
                                                  expectation, fitted=fitted_lambda)
        diagnostics.update({"cv_expectation": expectation, "cv_lambda": lam})
    else:
        price, se = raw.mean, raw.std_error

    result = make_result(price, se, raw.n, "trap-kv", wall_seconds=wall, diagnostics=diagnostics)
    logger.info(f"trap-kv: price={result.price:.6f} se={result.std_error:.6f} in {wall:.2f}s")
    return result
