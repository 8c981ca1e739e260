"""Exact (retrospective) simulation and the generalized Poisson estimator.

Both work on a unit-diffusion model dX = a(X) dt + dW, X_0 = x0, through the
potential phi = (a^2 + a')/2 and the primitive A of a.
"""
import logging
import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import partial
from typing import Callable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate

from retromc.config.settings import settings
from retromc.exceptions import DivergenceError, DomainError, EstimationError, ModelError
from retromc.models.results import EstimatorSample, RunResult
from retromc.services.runner import SampleBatch, run_samples
from retromc.services.statistics import make_result, merge_all, ratio_estimate, stats_reduce
from retromc.services.stochastic_core import PathSkeleton, RngStream, sample_poisson

logger = logging.getLogger(__name__)

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class ExactModel(ABC):
    """A diffusion with unit volatility that the retrospective engine can simulate."""

    x0: float
    horizon: float

    @abstractmethod
    def drift(self, u: float) -> float:
        """a(u)"""

    @abstractmethod
    def drift_derivative(self, u: float) -> float:
        """a'(u)"""

    @abstractmethod
    def primitive(self, u: float) -> float:
        """A(u) with A' = a"""

    @abstractmethod
    def lower_bound(self) -> float:
        """k = inf phi"""

    @abstractmethod
    def bound_above_min(self, m: float) -> float:
        """sup{phi(u) - k : u >= m}"""

    @abstractmethod
    def sample_terminal(self, rng: RngStream) -> Tuple[float, float, int]:
        """Draw from h(u) ~ exp(A(u) - (u - x0)^2 / 2T); returns (draw, proposal density, attempts)."""

    def phi(self, u: float) -> float:
        a = self.drift(u)
        return 0.5 * (a * a + self.drift_derivative(u))

    def proposal(self, rng: RngStream) -> Tuple[float, float]:
        """Terminal draw for the unbiased estimator and its density; N(x0, T) unless overridden."""
        z = rng.normal(self.x0, math.sqrt(self.horizon))
        return z, gaussian_density(z, self.x0, self.horizon)

    def log_tilt(self, z: float, rho: float) -> float:
        """log of exp(A(z) - A(x0) - (z - x0)^2 / 2T) / (sqrt(2 pi T) rho(z))"""
        T = self.horizon
        return (self.primitive(z) - self.primitive(self.x0) - (z - self.x0) ** 2 / (2.0 * T)
                - LOG_SQRT_2PI - 0.5 * math.log(T) - math.log(rho))


def gaussian_density(z: float, mean: float, var: float) -> float:
    return math.exp(-(z - mean) ** 2 / (2.0 * var) - LOG_SQRT_2PI - 0.5 * math.log(var))


def _checked_exp(x: float, what: str) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        raise ModelError(f"{what} overflowed (log value {x})")


# ---------------------------------------------------------------------------
# Exact simulation
# ---------------------------------------------------------------------------

class ExactDraw(NamedTuple):
    x_T: float
    skeleton: PathSkeleton
    retries: int


class AttemptOutcome(NamedTuple):
    accepted: bool
    z_T: float
    skeleton: PathSkeleton
    poisson_count: int


def exact_attempt(model: ExactModel, rng: RngStream) -> AttemptOutcome:
    """One pass of the accept/reject loop for a whole proposal path."""
    T = model.horizon
    z_T, _, _ = model.sample_terminal(rng)
    skeleton = PathSkeleton.with_minimum(0.0, model.x0, T, z_T, rng)
    bound = model.bound_above_min(skeleton.min_value)
    if not math.isfinite(bound) or bound < 0.0:
        raise ModelError(f"bound above the minimum is not a finite non-negative number: {bound}")

    k = model.lower_bound()
    n_points = sample_poisson(T * bound, rng)
    for _ in range(n_points):
        u = rng.uniform(0.0, T)
        v = rng.uniform(0.0, bound)
        if v <= model.phi(skeleton.value_at(u, rng)) - k:
            return AttemptOutcome(False, z_T, skeleton, n_points)
    return AttemptOutcome(True, z_T, skeleton, n_points)


def exact_simulate_terminal(model: ExactModel, rng: RngStream, retry_cap: Optional[int] = None) -> ExactDraw:
    """Exact draw of X_T; restarts on rejection until a path is accepted."""
    cap = retry_cap or settings.retry_cap
    for retries in range(cap):
        outcome = exact_attempt(model, rng)
        if outcome.accepted:
            return ExactDraw(outcome.z_T, outcome.skeleton, retries)
    raise DivergenceError(f"exact simulation rejected {cap} consecutive paths")


def _acceptance_trial(model: ExactModel, rng: RngStream) -> EstimatorSample:
    outcome = exact_attempt(model, rng)
    return EstimatorSample(weight=1.0 if outcome.accepted else 0.0, accepted=outcome.accepted,
                           poisson_count=outcome.poisson_count, skeleton_size=len(outcome.skeleton))


def measure_acceptance(model: ExactModel, attempts: int, seed: int, workers: int = 1,
                       trial: Optional[Callable] = None) -> RunResult:
    """Fraction of accepted attempts over a fixed attempt budget, with its CI."""
    task = partial(trial or _acceptance_trial, model)
    start = time.perf_counter()
    batches = run_samples(task, attempts, seed, workers)
    accepted = sum(b.total_accepted() for b in batches)
    result = stats_reduce([b.moments() for b in batches], method="acceptance", attempts=attempts,
                          acceptance_rate=accepted / attempts, wall_seconds=time.perf_counter() - start)
    logger.info(f"acceptance over {attempts} attempts: {100.0 * result.price:.4f}%")
    return result


# ---------------------------------------------------------------------------
# Count and time laws of the generalized Poisson estimator
# ---------------------------------------------------------------------------

class CountLaw(ABC):
    """Law p of the number of product factors; must charge every n >= 0."""

    @abstractmethod
    def sample(self, rng: RngStream) -> int:
        pass

    @abstractmethod
    def log_pmf(self, n: int) -> float:
        pass

    def pmf(self, n: int) -> float:
        return math.exp(self.log_pmf(n))

    def log_inverse_weight(self, n: int) -> float:
        """log of 1 / (p(n) n!)"""
        log_p = self.log_pmf(n)
        if log_p == -math.inf:
            raise DomainError(f"count law gives zero mass to n={n}")
        return -log_p - math.lgamma(n + 1)


@dataclass(frozen=True)
class PoissonCountLaw(CountLaw):
    mean: float

    def __post_init__(self):
        if not (self.mean >= 0.0) or math.isinf(self.mean):
            raise DomainError(f"Poisson count mean must be finite and >= 0, got {self.mean}")

    def sample(self, rng: RngStream) -> int:
        return sample_poisson(self.mean, rng)

    def log_pmf(self, n: int) -> float:
        if self.mean == 0.0:
            return 0.0 if n == 0 else -math.inf
        return -self.mean + n * math.log(self.mean) - math.lgamma(n + 1)

    def log_inverse_weight(self, n: int) -> float:
        if self.mean == 0.0:
            if n != 0:
                raise DomainError(f"count law gives zero mass to n={n}")
            return 0.0
        return self.mean - n * math.log(self.mean)


@dataclass(frozen=True)
class GeometricCountLaw(CountLaw):
    """p(n) = (1 - ratio) ratio^n on n >= 0."""
    ratio: float

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise DomainError(f"geometric ratio must lie in (0, 1), got {self.ratio}")

    def sample(self, rng: RngStream) -> int:
        return int(rng.generator.geometric(1.0 - self.ratio)) - 1

    def log_pmf(self, n: int) -> float:
        return math.log1p(-self.ratio) + n * math.log(self.ratio)


class TimeLaw(ABC):
    """Density q on [0, horizon] of the product's time points."""
    horizon: float

    @abstractmethod
    def sample(self, rng: RngStream) -> float:
        pass

    @abstractmethod
    def density(self, t: float) -> float:
        pass


@dataclass(frozen=True)
class UniformTimeLaw(TimeLaw):
    horizon: float

    def sample(self, rng: RngStream) -> float:
        return rng.uniform(0.0, self.horizon)

    def density(self, t: float) -> float:
        return 1.0 / self.horizon if 0.0 <= t <= self.horizon else 0.0


class PiecewiseLinearTimeLaw(TimeLaw):
    """Normalized piecewise-linear density through (knots, heights), sampled exactly."""

    def __init__(self, knots: Sequence[float], heights: Sequence[float]):
        self.knots = np.asarray(knots, dtype=float)
        h = np.asarray(heights, dtype=float)
        if self.knots.ndim != 1 or self.knots.size < 2 or h.shape != self.knots.shape:
            raise DomainError("need matching knots and heights, at least two of each")
        if np.any(np.diff(self.knots) <= 0.0) or np.any(h < 0.0):
            raise DomainError("knots must increase and heights must be non-negative")
        masses = 0.5 * (h[:-1] + h[1:]) * np.diff(self.knots)
        total = masses.sum()
        if not total > 0.0:
            raise DomainError("piecewise-linear density has zero mass")
        self.heights = h / total
        self.masses = masses / total
        self.cumulative = np.concatenate([[0.0], np.cumsum(self.masses)])
        self.horizon = float(self.knots[-1])

    def sample(self, rng: RngStream) -> float:
        u = rng.uniform() * self.cumulative[-1]
        i = int(np.searchsorted(self.cumulative, u, side="right")) - 1
        i = min(max(i, 0), self.masses.size - 1)
        target = u - self.cumulative[i]
        width = self.knots[i + 1] - self.knots[i]
        h0 = self.heights[i]
        slope = (self.heights[i + 1] - h0) / width
        root = h0 * h0 + 2.0 * slope * target
        x = 2.0 * target / (h0 + math.sqrt(max(root, 0.0))) if target > 0.0 else 0.0
        return float(self.knots[i] + min(max(x, 0.0), width))

    def density(self, t: float) -> float:
        if t < self.knots[0] or t > self.knots[-1]:
            return 0.0
        return float(np.interp(t, self.knots, self.heights))


# ---------------------------------------------------------------------------
# Generalized Poisson estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UEChoices:
    """Count law, time law and shift c of the product estimator.

    With bound_matched the count law is Poisson(M T) and c = M + k, where M is
    the model's bound above the proposal path minimum; the path is then drawn
    conditioned on its minimum.
    """
    time_law: TimeLaw
    count_law: Optional[CountLaw] = None
    shift: float = 0.0
    bound_matched: bool = False

    def __post_init__(self):
        if not self.bound_matched and self.count_law is None:
            raise DomainError("a count law is required unless the choices are bound-matched")

    @property
    def needs_minimum(self) -> bool:
        return self.bound_matched

    def resolve(self, model: ExactModel, skeleton: PathSkeleton) -> Tuple[CountLaw, float]:
        if not self.bound_matched:
            return self.count_law, self.shift
        bound = model.bound_above_min(skeleton.min_value)
        if not math.isfinite(bound) or bound < 0.0:
            raise ModelError(f"bound above the minimum is not a finite non-negative number: {bound}")
        return PoissonCountLaw(bound * model.horizon), bound + model.lower_bound()


def bound_matched_choices(horizon: float) -> UEChoices:
    return UEChoices(time_law=UniformTimeLaw(horizon), bound_matched=True)


def constant_rate_choices(horizon: float, c_P: float, c: Optional[float] = None) -> UEChoices:
    if not c_P > 0.0:
        raise DomainError(f"Poisson rate must be positive, got {c_P}")
    return UEChoices(time_law=UniformTimeLaw(horizon), count_law=PoissonCountLaw(c_P * horizon),
                     shift=c_P if c is None else c)


def poisson_product(g: Callable[[float], float], count_law: CountLaw, time_law: TimeLaw,
                    rng: RngStream) -> Tuple[int, float, float]:
    """N ~ p, V_i ~ q: returns (N, log 1 / (p(N) N!), prod g(V_i) / q(V_i)).

    The weighted product has mean exp(int g); g is evaluated right after each
    time draw, so it may consume rng itself.
    """
    n = count_law.sample(rng)
    log_scale = count_law.log_inverse_weight(n)
    product = 1.0
    for _ in range(n):
        v = time_law.sample(rng)
        q = time_law.density(v)
        if not q > 0.0:
            raise DomainError(f"time density vanishes at its own draw {v}")
        product *= g(v) / q
    return n, log_scale, product


def ue_sample(model: ExactModel, payoff: Callable[[float], float], choices: UEChoices,
              rng: RngStream) -> EstimatorSample:
    """One draw of psi(Z_T) e^{-cT} / (p(N) N!) * prod (c - phi(Z_V)) / q(V).

    payoff is the discounted payoff as a function of the model variable; the
    payoff-free weight of the same draw is returned as base_weight.
    """
    T = model.horizon
    z, rho = model.proposal(rng)
    if not rho > 0.0:
        raise DomainError("terminal proposal density vanished at its own draw")
    if choices.needs_minimum:
        skeleton = PathSkeleton.with_minimum(0.0, model.x0, T, z, rng)
    else:
        skeleton = PathSkeleton.bridge(0.0, model.x0, T, z)

    count_law, shift = choices.resolve(model, skeleton)
    n, log_scale, product = poisson_product(lambda v: shift - model.phi(skeleton.value_at(v, rng)),
                                            count_law, choices.time_law, rng)
    log_weight = model.log_tilt(z, rho) - shift * T + log_scale

    base = _checked_exp(log_weight, "estimator weight") * product
    weight = payoff(z) * base
    if not (math.isfinite(weight) and math.isfinite(base)):
        raise ModelError(f"non-finite estimator weight at Z_T={z}")
    return EstimatorSample(weight=weight, poisson_count=n, skeleton_size=len(skeleton), base_weight=base)


def ue_poisson_variant(model: ExactModel, payoff: Callable[[float], float], c_P: float, c: float,
                       rng: RngStream) -> EstimatorSample:
    """Poisson(c_P T) count and uniform times: psi e^{(c_P - c)T} prod (c - phi) / c_P."""
    return ue_sample(model, payoff, constant_rate_choices(model.horizon, c_P, c), rng)


# ---------------------------------------------------------------------------
# Variance-optimal count and time laws
# ---------------------------------------------------------------------------

@dataclass
class OptimalLaws:
    count_law: PoissonCountLaw
    time_law: TimeLaw
    integral: float
    density: Callable[[float], float]

    @property
    def second_moment(self) -> float:
        return math.exp(2.0 * self.integral)


def _quad(fn, a: float, b: float) -> float:
    value, _ = integrate.quad(fn, a, b, epsabs=1e-12, epsrel=1e-10, limit=200)
    return value


def optimal_count_time_laws(g: Callable[[float], float], horizon: float, knots: int = 513) -> OptimalLaws:
    """p = Poisson(int |g|), q = |g| / int |g|.

    The sampler for q interpolates |g| linearly on a uniform grid, which is
    exact when g is piecewise linear on that grid.
    """
    integral = _quad(lambda t: abs(g(t)), 0.0, horizon)
    if not (integral > 0.0 and math.isfinite(integral)):
        raise DomainError(f"int |g| must be positive and finite, got {integral}")
    grid = np.linspace(0.0, horizon, knots)
    heights = np.abs([g(t) for t in grid])
    return OptimalLaws(
        count_law=PoissonCountLaw(integral),
        time_law=PiecewiseLinearTimeLaw(grid, heights),
        integral=integral,
        density=lambda t: abs(g(t)) / integral,
    )


def product_second_moment(g: Callable[[float], float], count_law: CountLaw,
                          density: Callable[[float], float], horizon: float,
                          rtol: float = 1e-16, max_terms: int = 10_000) -> float:
    """E[(1/(p(N) N!) prod g(V_i)/q(V_i))^2] = sum_n (int g^2/q)^n / (p(n) (n!)^2)."""

    def ratio(t: float) -> float:
        q = density(t)
        return g(t) ** 2 / q if q > 0.0 else 0.0

    j = _quad(ratio, 0.0, horizon)
    total = math.exp(-count_law.log_pmf(0))
    if j <= 0.0:
        return total
    previous = total
    for n in range(1, max_terms):
        term = math.exp(n * math.log(j) - count_law.log_pmf(n) - 2.0 * math.lgamma(n + 1))
        total += term
        if term <= previous and term < rtol * total:
            break
        previous = term
    return total


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _as_batches(samples) -> Sequence[SampleBatch]:
    samples = list(samples)
    if samples and isinstance(samples[0], SampleBatch):
        return samples
    return [SampleBatch.from_samples(0, samples)]


def aggregate_delta1(samples, method: str = "ue", **kwargs) -> RunResult:
    """Plain mean of the weights."""
    batches = _as_batches(samples)
    return stats_reduce([b.moments() for b in batches], method=method, estimator="delta1", **kwargs)


def aggregate_delta2(samples, method: str = "ue", **kwargs) -> RunResult:
    """Sum of payoff weights over sum of payoff-free weights."""
    batches = _as_batches(samples)
    co = merge_all([b.ratio_moments() for b in batches])
    if co.n < 2:
        raise EstimationError(f"need at least 2 samples, got {co.n}")
    price, se = ratio_estimate(co)
    return make_result(price, se, co.n, method, estimator="delta2", **kwargs)
