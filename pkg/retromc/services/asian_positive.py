"""Options on alpha*S_T + beta*int S for alpha > 0.

With xi_t = alpha S_t + beta int_0^t S, the process X = log(xi)/sigma is a unit
diffusion with drift a(u) = gamma/sigma + (beta S0/sigma) e^{-sigma u}, started
at log(alpha S0)/sigma, and xi_T = e^{sigma X_T} has the law of the underlying.
"""
import logging
import math
import time
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional, Tuple, Union

from scipy import optimize

from retromc.config.settings import settings
from retromc.exceptions import DivergenceError, DomainError, ModelError, NumericalError
from retromc.models.experiment import Estimator, Method
from retromc.models.params import ModelParams, OptionType, PayoffSpec, StrikeStyle
from retromc.models.results import EstimatorSample, RunResult
from retromc.services.retro_engine import (
    ExactModel,
    aggregate_delta1,
    aggregate_delta2,
    bound_matched_choices,
    constant_rate_choices,
    exact_simulate_terminal,
    gaussian_density,
    measure_acceptance,
    ue_sample,
)
from retromc.services.runner import run_samples
from retromc.services.stochastic_core import RngStream, lambert_w0

logger = logging.getLogger(__name__)


def _neg_exp(x: float) -> float:
    try:
        return math.exp(-x)
    except OverflowError:
        return math.inf


def _phi_of_y(y: float, params: ModelParams) -> float:
    """phi written in y = e^{-sigma u}: a quadratic with positive leading coefficient."""
    if math.isinf(y):
        return math.inf
    s2 = params.sigma ** 2
    g = params.gamma
    b = params.beta * params.S0
    return 0.5 * (g * g / s2 + b * (2.0 * g - s2) * y / s2 + b * b * y * y / s2)


def lower_bound_k(params: ModelParams) -> float:
    """k = inf phi."""
    s2 = params.sigma ** 2
    g = params.gamma
    b = params.beta * params.S0
    if b == 0.0 or 2.0 * g >= s2:
        return g * g / (2.0 * s2)
    u_dagger = math.log(2.0 * b / (s2 - 2.0 * g)) / params.sigma
    return _phi_of_y(_neg_exp(params.sigma * u_dagger), params)


def sup_phi_above(m: float, params: ModelParams, k: Optional[float] = None) -> float:
    """sup{phi(u) - k : u >= m}.

    phi is convex in y = e^{-sigma u} and u >= m maps to y in (0, e^{-sigma m}],
    so the supremum sits at an end: phi(m) or the limit gamma^2 / (2 sigma^2).
    """
    k = lower_bound_k(params) if k is None else k
    limit = params.gamma ** 2 / (2.0 * params.sigma ** 2)
    return max(_phi_of_y(_neg_exp(params.sigma * m), params), limit) - k


def h_mode(params: ModelParams) -> float:
    """Mode u* of h(u) ~ exp(A(u) - (u - x0)^2 / 2T) via the Lambert W function."""
    sigma, gamma, T = params.sigma, params.gamma, params.T
    x0 = math.log(params.alpha * params.S0) / sigma
    # beta S0 T e^{-gamma T - sigma x0} with e^{-sigma x0} = 1 / (alpha S0)
    arg = params.beta * T * math.exp(-gamma * T) / params.alpha
    return (gamma * T + lambert_w0(arg) + sigma * x0) / sigma


class PositiveAlphaModel(ExactModel):
    def __init__(self, params: ModelParams, retry_cap: Optional[int] = None):
        if params.alpha <= 0.0:
            raise DomainError("the alpha > 0 model needs alpha > 0")
        self.params = params
        self.sigma = params.sigma
        self.gamma = params.gamma
        self.horizon = params.T
        self.scale = params.beta * params.S0
        self.x0 = math.log(params.alpha * params.S0) / params.sigma
        self.k = lower_bound_k(params)
        self.limit = self.gamma ** 2 / (2.0 * self.sigma ** 2)
        self.mode = h_mode(params)
        self.retry_cap = retry_cap or settings.retry_cap
        self.log_envelope = maximize_log_ratio(self)

    def drift(self, u: float) -> float:
        return self.gamma / self.sigma + self.scale / self.sigma * _neg_exp(self.sigma * u)

    def drift_derivative(self, u: float) -> float:
        return -self.scale * _neg_exp(self.sigma * u)

    def primitive(self, u: float) -> float:
        return self.gamma / self.sigma * u - self.scale / self.sigma ** 2 * math.expm1(-self.sigma * u)

    def phi(self, u: float) -> float:
        return _phi_of_y(_neg_exp(self.sigma * u), self.params)

    def lower_bound(self) -> float:
        return self.k

    def bound_above_min(self, m: float) -> float:
        return sup_phi_above(m, self.params, self.k)

    def log_ratio(self, u: float) -> float:
        """log h(u) - log N(u; u*, T) up to constants; concave since A'' = a' < 0."""
        T = self.horizon
        return self.primitive(u) - (u - self.x0) ** 2 / (2.0 * T) + (u - self.mode) ** 2 / (2.0 * T)

    def log_ratio_slope(self, u: float) -> float:
        return self.drift(u) + (self.x0 - self.mode) / self.horizon

    def proposal(self, rng: RngStream) -> Tuple[float, float]:
        z = rng.normal(self.mode, math.sqrt(self.horizon))
        return z, gaussian_density(z, self.mode, self.horizon)

    def sample_terminal(self, rng: RngStream) -> Tuple[float, float, int]:
        return sample_h(self, rng)

    def underlying(self, x: float) -> float:
        try:
            return math.exp(self.sigma * x)
        except OverflowError:
            raise ModelError(f"underlying overflowed at X_T={x}")


def maximize_log_ratio(model: PositiveAlphaModel, tol: float = 1e-12, max_iter: int = 50) -> float:
    """Envelope constant max_u log_ratio(u) by safeguarded Newton, with a bracketing fallback."""
    if model.scale == 0.0:
        return model.log_ratio(model.mode)

    u = model.mode
    for _ in range(max_iter):
        slope = model.log_ratio_slope(u)
        if abs(slope) <= tol * (1.0 + abs(model.drift(u))):
            return model.log_ratio(u)
        curvature = model.drift_derivative(u)
        if not curvature < 0.0 or not math.isfinite(curvature):
            break
        step = -slope / curvature
        current = model.log_ratio(u)
        for _ in range(40):
            if model.log_ratio(u + step) >= current:
                break
            step *= 0.5
        u += step

    logger.warning("Newton did not settle on the envelope maximum; falling back to bracketing")
    try:
        lo, hi = model.mode - 1.0, model.mode + 1.0
        for _ in range(200):
            if model.log_ratio_slope(lo) > 0.0:
                break
            lo -= 2.0 * (hi - lo)
        for _ in range(200):
            if model.log_ratio_slope(hi) < 0.0:
                break
            hi += 2.0 * (hi - lo)
        root = optimize.brentq(model.log_ratio_slope, lo, hi, xtol=1e-14, maxiter=500)
    except (ValueError, RuntimeError) as e:
        raise NumericalError(f"envelope maximization failed: {e}")
    return model.log_ratio(root)


def sample_h(model: PositiveAlphaModel, rng: RngStream) -> Tuple[float, float, int]:
    """Rejection sampling of h from N(u*, T); returns (draw, proposal density, attempts)."""
    sd = math.sqrt(model.horizon)
    if model.scale == 0.0:
        z = rng.normal(model.mode, sd)
        return z, gaussian_density(z, model.mode, model.horizon), 1

    for attempts in range(1, model.retry_cap + 1):
        z = rng.normal(model.mode, sd)
        if -rng.exponential() <= model.log_ratio(z) - model.log_envelope:
            return z, gaussian_density(z, model.mode, model.horizon), attempts
    raise DivergenceError(f"terminal sampler rejected {model.retry_cap} consecutive proposals")


def _h_trial(model: PositiveAlphaModel, rng: RngStream) -> EstimatorSample:
    z = rng.normal(model.mode, math.sqrt(model.horizon))
    accepted = -rng.exponential() <= model.log_ratio(z) - model.log_envelope
    return EstimatorSample(weight=1.0 if accepted else 0.0, accepted=accepted)


def measure_h_acceptance(model: PositiveAlphaModel, attempts: int, seed: int, workers: int = 1) -> RunResult:
    return measure_acceptance(model, attempts, seed, workers, trial=_h_trial)


@dataclass(frozen=True)
class DiscountedPayoff:
    """z -> discount * payoff(e^{sigma z})"""
    payoff: Callable[[float], float]
    sigma: float
    discount: float

    def __call__(self, z: float) -> float:
        try:
            underlying = math.exp(self.sigma * z)
        except OverflowError:
            raise ModelError(f"underlying overflowed at X_T={z}")
        return self.discount * self.payoff(underlying)


def _exact_price_sample(model: PositiveAlphaModel, payoff: Callable[[float], float], rng: RngStream) -> EstimatorSample:
    draw = exact_simulate_terminal(model, rng, model.retry_cap)
    return EstimatorSample(weight=payoff(draw.x_T), retries=draw.retries,
                           poisson_count=draw.skeleton.fills, skeleton_size=len(draw.skeleton))


def _identity(x: float) -> float:
    return x


def exact_underlying_draws(params: ModelParams, n: int, seed: int, workers: int = 1):
    """n exact draws of alpha S_T + beta int S."""
    model = PositiveAlphaModel(params)
    task = partial(_exact_price_sample, model, DiscountedPayoff(_identity, model.sigma, 1.0))
    return run_samples(task, n, seed, workers)


def price_option(params: ModelParams, payoff: Callable[[float], float], method: Union[Method, str],
                 n: int, seed: int, workers: int = 1, estimator: Union[Estimator, str] = Estimator.DELTA1,
                 c_P: Optional[float] = None, c: Optional[float] = None,
                 retry_cap: Optional[int] = None) -> RunResult:
    """Price E[e^{-rT} payoff(alpha S_T + beta int S)] with the exact or an unbiased-estimator method.

    ue-bound draws the count from Poisson(M T) with shift M + k, M being the
    bound above the proposal path minimum; ue-free uses Poisson(c_P T) and a
    constant shift c (both default to 1/T) and needs no minimum.
    """
    method = Method(method)
    estimator = Estimator(estimator)
    model = PositiveAlphaModel(params, retry_cap=retry_cap)
    f = DiscountedPayoff(payoff, params.sigma, params.discount)
    T = params.T

    logger.info(f"Pricing with {method.value}: n={n}, workers={workers}, seed={seed}")
    start = time.perf_counter()
    if method == Method.EXACT:
        task = partial(_exact_price_sample, model, f)
    elif method == Method.UE_BOUND:
        task = partial(ue_sample, model, f, bound_matched_choices(T))
    elif method == Method.UE_FREE:
        rate = c_P if c_P is not None else 1.0 / T
        task = partial(ue_sample, model, f, constant_rate_choices(T, rate, c))
    else:
        raise DomainError(f"method {method.value} does not apply to the alpha > 0 model")

    batches = run_samples(task, n, seed, workers)
    wall = time.perf_counter() - start

    kwargs = {"wall_seconds": wall}
    if method == Method.EXACT:
        retries = sum(b.total_retries() for b in batches)
        kwargs["attempts"] = n + retries
        kwargs["acceptance_rate"] = n / (n + retries) if n else None
    if estimator == Estimator.DELTA2 and method != Method.EXACT:
        result = aggregate_delta2(batches, method=method.value, **kwargs)
    else:
        result = aggregate_delta1(batches, method=method.value, **kwargs)

    rate = f", acceptance={100.0 * result.acceptance_rate:.2f}%" if result.acceptance_rate is not None else ""
    logger.info(f"{method.value}: price={result.price:.6f} se={result.std_error:.6f}{rate} in {wall:.2f}s")
    return result


def floating_strike_reduce(params: ModelParams, payoff: Optional[PayoffSpec] = None) -> Tuple[ModelParams, PayoffSpec]:
    """Fixed-strike alpha=0 problem with the same price as a floating-strike contract.

    With S as numeraire and time reversed, E[e^{-rT}(Abar - S_T)+] equals
    E[e^{-delta T}(xi_T - S0)+], xi being the average of a geometric Brownian
    motion from S0 with log-drift -(r - delta + sigma^2/2). The put maps to
    (S0 - xi_T)+ the same way.
    """
    gamma_prime = params.r - params.delta + 0.5 * params.sigma ** 2
    reduced = ModelParams(
        S0=params.S0,
        r=params.delta,
        delta=0.0,
        sigma=params.sigma,
        T=params.T,
        alpha=0.0,
        beta=1.0 / params.T,
        K=params.S0,
        gamma_override=-gamma_prime,
    )
    option_type = payoff.option_type if payoff is not None else OptionType.CALL
    return reduced, PayoffSpec(option_type=option_type, style=StrikeStyle.FIXED, strike=params.S0)
