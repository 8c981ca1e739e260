"""Standard Asian options (alpha = 0) by the hybrid pseudo-exact method.

The log-average X_t = log(xi_t / S0) is compared with the Gaussian process
Z_t = (sigma/t) B(t^3/3) + gamma t / 2; the price is
E[e^{A(T, Z_T) - rT} f(S0 e^{Z_T}) exp(-int phi(t, Z_t) dt)]. The positive part
of phi is removed by Poisson thinning (homogeneous on dyadic intervals down to
eps = T/2^(J+1), inhomogeneous below eps), the negative part by a Poisson
product.
"""
import logging
import math
import time
from dataclasses import dataclass
from functools import partial
from typing import Callable, List, Optional, Tuple

import numpy as np

from retromc.exceptions import DivergenceError, DomainError, ModelError
from retromc.models.params import HybridConfig, ModelParams, OptionType, PayoffSpec, StrikeStyle
from retromc.models.results import DOMINANCE_SHARE, STABLE_RATIO, EstimatorSample, HeavyTailReport, RunResult
from retromc.services.asian_positive import floating_strike_reduce
from retromc.services.retro_engine import aggregate_delta1, aggregate_delta2
from retromc.services.runner import concat, run_samples
from retromc.services.statistics import control_variate_estimate, make_result, max_share, merge_all, variance_doubling_ratio
from retromc.services.stochastic_core import (
    PathSkeleton,
    RngStream,
    SegmentedPath,
    internal_clock,
    norm_cdf,
    sample_poisson,
    z_process_values,
    z_value,
)

logger = logging.getLogger(__name__)

# Below this magnitude e^{-z}-1+z and its cubic remainder are summed as series
_SERIES_RADIUS = 1.0
_SERIES_TERMS = 22
_EXP_LIMIT = 700.0
# Times under CLAMP_FRACTION * T are raised to that floor before Z is read
CLAMP_FRACTION = 1e-12


def _exp_series_tail(z: float, start: int) -> float:
    """sum_{n >= start} (-z)^n / n!"""
    term = (-z) ** start / math.factorial(start)
    total = 0.0
    for n in range(start, start + _SERIES_TERMS):
        total += term
        term *= -z / (n + 1)
    return total


def em1z(z: float) -> float:
    """e^{-z} - 1 + z"""
    if abs(z) < _SERIES_RADIUS:
        return _exp_series_tail(z, 2)
    if z < -_EXP_LIMIT:
        return math.inf
    return math.expm1(-z) + z


def em1z2(z: float) -> float:
    """e^{-z} - 1 + z - z^2/2"""
    if abs(z) < _SERIES_RADIUS:
        return _exp_series_tail(z, 3)
    if z < -_EXP_LIMIT:
        return math.inf
    return math.expm1(-z) + z - 0.5 * z * z


def phi_t_z(t: float, z: float, sigma: float, gamma: float) -> float:
    if not t > 0.0:
        raise DomainError(f"phi is defined for t > 0, got {t}")
    if z < -_EXP_LIMIT:
        return math.inf
    s2 = sigma * sigma
    e1 = em1z(z)
    return (em1z2(z) / (s2 * t * t)
            - math.expm1(-z) / (2.0 * t)
            + e1 / (s2 * t) * (e1 / (2.0 * t) + gamma - z / t))


def phi_plus(t: float, z: float, sigma: float, gamma: float) -> float:
    return max(phi_t_z(t, z, sigma, gamma), 0.0)


def phi_minus(t: float, z: float, sigma: float, gamma: float) -> float:
    return max(-phi_t_z(t, z, sigma, gamma), 0.0)


def A_t_z(t: float, z: float, sigma: float) -> float:
    """(1 - z + z^2/2 - e^{-z}) / (sigma^2 t)"""
    if not t > 0.0:
        raise DomainError(f"A is defined for t > 0, got {t}")
    return -em1z2(z) / (sigma * sigma * t)


def phi_plus_interval_bound(t_l: float, t_u: float, m_j: float, sigma: float, gamma: float) -> float:
    """Upper bound of phi+(t, z) over t in [t_l, t_u] and z >= m_j.

    Both pieces decrease in t, so they are evaluated at t_l: one covers
    z >= 0, the other z in [min(m_j, 0), 0].
    """
    if not 0.0 < t_l < t_u:
        raise DomainError(f"need 0 < t_l < t_u, got [{t_l}, {t_u}]")
    s2 = sigma * sigma
    upper = gamma * gamma / s2 + gamma / (s2 * t_l) + max(0.5 - gamma / s2, 0.0) / t_l
    c = min(m_j, 0.0)
    if c == 0.0:
        return upper
    if c < -_EXP_LIMIT:
        return math.inf
    lower = (em1z(c) * (1.0 + max(gamma, 0.0) * t_l) + 0.5 * math.expm1(-c) ** 2 - c * c) / (s2 * t_l * t_l)
    return max(upper, lower)


def z_lower_bound(t_l: float, t_u: float, m_B: float, sigma: float, gamma: float) -> float:
    """Lower bound of Z on [t_l, t_u] given B >= m_B on the matching internal-clock interval."""
    drift_floor = 0.5 * gamma * (t_l if gamma >= 0.0 else t_u)
    return sigma / t_l * min(0.0, m_B) + drift_floor


@dataclass(frozen=True)
class TailIntensity:
    """Intensity kappa t^{-1/2-eta} dominating phi+ near t = 0."""
    kappa: float
    eta: float

    @property
    def exponent(self) -> float:
        return -0.5 - self.eta

    def intensity(self, t: float) -> float:
        return self.kappa * t ** self.exponent

    def cumulative(self, eps: float) -> float:
        p = 0.5 - self.eta
        return self.kappa * eps ** p / p

    def sample_time(self, eps: float, rng: RngStream) -> float:
        return eps * rng.uniform() ** (1.0 / (0.5 - self.eta))


def near_zero_tail_intensity(eta: float, sigma: float, gamma: float) -> TailIntensity:
    if not 0.0 < eta < 0.25:
        raise DomainError(f"eta must lie in (0, 1/4), got {eta}")
    c = max(sigma / 3.0 ** (0.5 - eta / 3.0), 0.5 * gamma)
    kappa = 2.0 * c ** 3 / (3.0 * sigma * sigma) + 0.5 * c
    return TailIntensity(kappa=kappa, eta=eta)


class ZeroAlphaModel:
    """alpha = 0: the underlying is beta T times the average of S over [0, T]."""

    def __init__(self, params: ModelParams):
        if params.alpha != 0.0:
            raise DomainError("the alpha = 0 model needs alpha = 0")
        self.params = params
        self.sigma = params.sigma
        self.gamma = params.gamma
        self.T = params.T
        self.r = params.r
        self.S0 = params.S0
        self.scale = params.beta * params.T

    def phi(self, t: float, z: float) -> float:
        return phi_t_z(t, z, self.sigma, self.gamma)

    def phi_plus(self, t: float, z: float) -> float:
        return phi_plus(t, z, self.sigma, self.gamma)

    def phi_minus(self, t: float, z: float) -> float:
        return phi_minus(t, z, self.sigma, self.gamma)

    def A(self, t: float, z: float) -> float:
        return A_t_z(t, z, self.sigma)

    def underlying(self, z: float) -> float:
        return self.scale * self.S0 * math.exp(z)

    @property
    def terminal_mean(self) -> float:
        return 0.5 * self.gamma * self.T

    @property
    def terminal_variance(self) -> float:
        return self.sigma ** 2 * self.T / 3.0


class HybridTrajectory:
    """One proposal trajectory of Z with its dyadic skeleton.

    B is simulated forward in the internal clock at s_j = (T/2^j)^3 / 3 for
    j = J+1, ..., 0; each interval I_j = [T/2^(j+1), T/2^j] carries a
    minimum-conditioned segment, and [0, eps] a plain bridge.
    """

    def __init__(self, model: ZeroAlphaModel, config: HybridConfig, rng: RngStream):
        self.model = model
        self.config = config
        self.rng = rng
        self.floor = CLAMP_FRACTION * model.T
        self.clamped = 0
        self.points = 0

        J = config.J
        self.nodes = [model.T / 2.0 ** j for j in range(J + 2)]
        b_values = {}
        b, s_prev = 0.0, 0.0
        for j in range(J + 1, -1, -1):
            s = internal_clock(self.nodes[j])
            b = rng.normal(b, math.sqrt(s - s_prev))
            b_values[j] = b
            s_prev = s

        self.tail = PathSkeleton.bridge(0.0, 0.0, internal_clock(self.nodes[J + 1]), b_values[J + 1])
        self.segments: List[PathSkeleton] = []
        for j in range(J + 1):
            s_l, s_u = internal_clock(self.nodes[j + 1]), internal_clock(self.nodes[j])
            self.segments.append(PathSkeleton.with_minimum(s_l, b_values[j + 1], s_u, b_values[j], rng))
        self.path = SegmentedPath([self.tail] + self.segments)
        self.z_T = model.sigma / model.T * b_values[0] + model.terminal_mean

    @property
    def epsilon(self) -> float:
        return self.nodes[-1]

    def z(self, t: float) -> float:
        if t < self.floor:
            t = self.floor
            self.clamped += 1
        return z_value(self.path, t, self.model.gamma, self.model.sigma, self.rng)

    def interval(self, j: int) -> Tuple[float, float]:
        return self.nodes[j + 1], self.nodes[j]

    def interval_bound(self, j: int) -> Tuple[float, float]:
        t_l, t_u = self.interval(j)
        m_j = z_lower_bound(t_l, t_u, self.segments[j].min_value, self.model.sigma, self.model.gamma)
        bound = phi_plus_interval_bound(t_l, t_u, m_j, self.model.sigma, self.model.gamma)
        if not math.isfinite(bound):
            raise ModelError(f"no finite bound for phi+ on [{t_l}, {t_u}] (Z lower bound {m_j})")
        return m_j, bound

    def _count(self, mean: float) -> int:
        n = sample_poisson(mean, self.rng)
        self.points += n
        if self.points > self.config.retry_cap:
            raise DivergenceError(f"trajectory needed more than {self.config.retry_cap} thinning points")
        return n

    def thin_interval(self, j: int) -> bool:
        """True when no point of the Poisson process on I_j x [0, M_j] falls under phi+."""
        t_l, t_u = self.interval(j)
        _, bound = self.interval_bound(j)
        for _ in range(self._count((t_u - t_l) * bound)):
            t = self.rng.uniform(t_l, t_u)
            v = self.rng.uniform(0.0, bound)
            if v <= self.model.phi_plus(t, self.z(t)):
                return False
        return True

    def thin_tail(self) -> bool:
        tail = near_zero_tail_intensity(self.config.eta, self.model.sigma, self.model.gamma)
        eps = self.epsilon
        for _ in range(self._count(tail.cumulative(eps))):
            t = tail.sample_time(eps, self.rng)
            if t < self.floor:
                t = self.floor
                self.clamped += 1
            v = self.rng.uniform(0.0, tail.intensity(t))
            if v <= self.model.phi_plus(t, self.z(t)):
                return False
        return True

    def accept(self) -> bool:
        for j in range(self.config.J + 1):
            if not self.thin_interval(j):
                return False
        return self.thin_tail()

    def negative_part_product(self) -> Tuple[int, float]:
        """N ~ Poisson(c_p T) and e^{c_p T} prod T phi-(U_i, Z_{U_i}) / (c_p T)."""
        c_p, T = self.config.c_p, self.model.T
        n = sample_poisson(c_p * T, self.rng)
        times = np.array([self.rng.uniform(0.0, T) for _ in range(n)])
        self.clamped += int(np.count_nonzero(times < self.floor))
        times = np.maximum(times, self.floor)
        zs = z_process_values(self.path, times, self.model.gamma, self.model.sigma, self.rng)
        product = 1.0
        for u, z in zip(times, zs):
            product *= self.model.phi_minus(float(u), float(z)) / c_p
        return n, product


def _control_value(model: ZeroAlphaModel, payoff: PayoffSpec, z_T: float) -> float:
    return math.exp(-model.r * model.T) * payoff.value(model.underlying(z_T))


def hybrid_price_sample(model: ZeroAlphaModel, config: HybridConfig, payoff: Callable[[float], float],
                        rng: RngStream) -> EstimatorSample:
    """One weight e^{A(T,Z_T) - rT} f(S_T-average) e^{c_p T} prod phi-/c_p * 1{accepted}.

    A trajectory hit by the phi+ thinning contributes zero; it is not redrawn.
    """
    traj = HybridTrajectory(model, config, rng)
    z_T = traj.z_T
    control = _control_value(model, payoff, z_T) if isinstance(payoff, PayoffSpec) else None

    if not traj.accept():
        return EstimatorSample(weight=0.0, accepted=False, poisson_count=0, skeleton_size=len(traj.path),
                               base_weight=0.0, control=control, clamped=traj.clamped)

    n, product = traj.negative_part_product()
    try:
        tilt = math.exp(model.A(model.T, z_T) + config.c_p * model.T)
    except OverflowError:
        raise ModelError(f"weight overflowed at Z_T={z_T}")
    base = tilt * product
    weight = math.exp(-model.r * model.T) * payoff(model.underlying(z_T)) * base
    if not math.isfinite(weight):
        raise ModelError(f"non-finite hybrid weight at Z_T={z_T}")
    return EstimatorSample(weight=weight, accepted=True, poisson_count=n, skeleton_size=len(traj.path),
                           base_weight=base, control=control, clamped=traj.clamped)


def naive_price_sample(model: ZeroAlphaModel, payoff: Callable[[float], float], c_p: float,
                       rng: RngStream) -> EstimatorSample:
    """Product estimator with the full signed phi and no thinning; its weights are not integrable."""
    T = model.T
    s_T = internal_clock(T)
    path = PathSkeleton.bridge(0.0, 0.0, s_T, rng.normal(0.0, math.sqrt(s_T)))
    z_T = z_value(path, T, model.gamma, model.sigma, rng)
    n = sample_poisson(c_p * T, rng)
    times = np.maximum([rng.uniform(0.0, T) for _ in range(n)], CLAMP_FRACTION * T)
    product = 1.0
    for u, z in zip(times, z_process_values(path, times, model.gamma, model.sigma, rng)):
        product *= -model.phi(float(u), float(z)) / c_p
    base = math.exp(model.A(T, z_T) + c_p * T) * product
    weight = math.exp(-model.r * T) * payoff(model.underlying(z_T)) * base
    if not math.isfinite(weight):
        raise ModelError(f"non-finite weight at Z_T={z_T}")
    return EstimatorSample(weight=weight, poisson_count=n, skeleton_size=len(path), base_weight=base)


def kv_control_variate_price(params: ModelParams, K: float, option_type: OptionType = OptionType.CALL) -> float:
    """E[e^{-rT}(beta T S0 e^{Z_T} - K)+] for Z_T ~ N(gamma T/2, sigma^2 T/3); put by parity."""
    if not K > 0.0:
        raise DomainError(f"strike must be positive, got {K}")
    T, r, sigma, gamma = params.T, params.r, params.sigma, params.gamma
    spot = params.beta * T * params.S0
    vol = sigma * math.sqrt(T / 3.0)
    d = (math.log(spot / K) + 0.5 * gamma * T) / vol
    forward = spot * math.exp((0.5 * gamma + sigma * sigma / 6.0 - r) * T)
    call = forward * norm_cdf(d + vol) - K * math.exp(-r * T) * norm_cdf(d)
    if option_type == OptionType.CALL:
        return call
    return call - forward + K * math.exp(-r * T)


def price_asian_hybrid(params: ModelParams, payoff: PayoffSpec, config: Optional[HybridConfig] = None,
                       n: int = 100_000, seed: int = 42, workers: int = 1, control_variate: bool = True,
                       fitted_lambda: bool = False, estimator: str = "delta1") -> RunResult:
    """Hybrid price of a fixed-strike (or reduced floating-strike) alpha = 0 contract."""
    if payoff.style == StrikeStyle.FLOATING:
        params, payoff = floating_strike_reduce(params, payoff)
    config = config or HybridConfig()
    model = ZeroAlphaModel(params)

    logger.info(f"Pricing with hybrid: n={n}, J={config.J}, eta={config.eta}, workers={workers}, seed={seed}")
    start = time.perf_counter()
    batches = run_samples(partial(hybrid_price_sample, model, config, payoff), n, seed, workers)
    wall = time.perf_counter() - start

    accepted = sum(b.total_accepted() for b in batches)
    clamped = sum(b.clamped for b in batches)
    if clamped:
        logger.warning(f"hybrid: {clamped} time point(s) below {CLAMP_FRACTION} * T were clamped")
    common = {"acceptance_rate": accepted / n if n else None, "wall_seconds": wall}

    if estimator == "delta2":
        raw = aggregate_delta2(batches, method="hybrid", **common)
    else:
        raw = aggregate_delta1(batches, method="hybrid", **common)
    diagnostics = {"raw_price": raw.price, "raw_std_error": raw.std_error, "clamped": float(clamped)}

    use_cv = control_variate and estimator != "delta2"
    if use_cv and not payoff.strike > 0.0:
        logger.warning("hybrid: zero strike has no lognormal control price, control variate skipped")
        use_cv = False
    if not use_cv:
        result = raw.model_copy(update={"diagnostics": diagnostics})
    else:
        expectation = kv_control_variate_price(params, payoff.strike, payoff.option_type)
        co = merge_all([b.control_moments() for b in batches])
        price, se, lam = control_variate_estimate(co, expectation, fitted=fitted_lambda)
        diagnostics.update({"cv_expectation": expectation, "cv_lambda": lam})
        result = make_result(price, se, n, "hybrid", diagnostics=diagnostics, **common)

    logger.info(f"hybrid: price={result.price:.6f} se={result.std_error:.6f} "
                f"acceptance={100.0 * (result.acceptance_rate or 0.0):.2f}% in {wall:.2f}s")
    return result


def heavy_tail_diagnostic(model: ZeroAlphaModel, n: int, seed: int = 42, estimator: str = "naive",
                          payoff: Optional[PayoffSpec] = None, config: Optional[HybridConfig] = None,
                          workers: int = 1) -> HeavyTailReport:
    """Running means, variance-doubling ratio and largest-sample share of an estimator's weights."""
    if n <= 0:
        return HeavyTailReport(estimator=estimator)
    payoff = payoff or PayoffSpec(strike=model.params.K)
    config = config or HybridConfig()
    if estimator == "naive":
        task = partial(naive_price_sample, model, payoff, config.c_p)
    elif estimator == "hybrid":
        task = partial(hybrid_price_sample, model, config, payoff)
    else:
        raise DomainError(f"unknown estimator {estimator!r}")

    weights = concat(run_samples(task, n, seed, workers))
    checkpoints = sorted({2 ** k for k in range(int(math.log2(n)) + 1)} | {n})
    cumulative = np.cumsum(weights)
    running = [float(cumulative[c - 1] / c) for c in checkpoints]

    ratio = variance_doubling_ratio(weights)
    share = max_share(weights)
    low, high = STABLE_RATIO

    report = HeavyTailReport(estimator=estimator, n=n, mean=float(cumulative[-1] / n), running_means=running,
                             checkpoints=checkpoints, variance_ratio=ratio, max_share=share,
                             dominated=share is not None and share > DOMINANCE_SHARE,
                             stable=None if ratio is None else low <= ratio <= high)
    logger.info(f"heavy-tail diagnostic ({estimator}): variance ratio={ratio}, max share={share}, "
                f"dominated={report.dominated}, stable={report.stable}")
    return report
