"""Random streams, special functions and Brownian path primitives."""
import bisect
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import ndtr

from retromc.exceptions import DomainError

logger = logging.getLogger(__name__)

# Smallest positive fraction of an interval used when an argmin lands on an endpoint
_EDGE = 1e-12
# Largest mismatch tolerated between the shared boundary values of adjacent segments
BOUNDARY_ATOL = 1e-12


class RngStream:
    """Seeded generator addressed by (seed, worker_id, sample_id).

    Streams are derived with SeedSequence spawn keys, so two streams with the
    same triple replay the same draws and distinct triples share no state.
    """

    def __init__(self, seed: int, worker_id: int = 0, sample_id: int = 0):
        self.seed = int(seed)
        self.worker_id = int(worker_id)
        self.sample_id = int(sample_id)
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.worker_id, self.sample_id))
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def substream(self, worker_id: int, sample_id: int) -> "RngStream":
        return RngStream(self.seed, worker_id, sample_id)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self.generator.uniform(low, high))

    def normal(self, loc: float = 0.0, scale: float = 1.0) -> float:
        return loc + scale * float(self.generator.standard_normal())

    def exponential(self) -> float:
        return float(self.generator.standard_exponential())

    def poisson(self, lam: float) -> int:
        return int(self.generator.poisson(lam))

    def wald(self, mean: float, shape: float) -> float:
        return float(self.generator.wald(mean, shape))

    def normals(self, size) -> np.ndarray:
        return self.generator.standard_normal(size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, worker_id={self.worker_id}, sample_id={self.sample_id})"


def lambert_w0(x: float, tol: float = 1e-15, max_iter: int = 64) -> float:
    """Principal branch of the Lambert W function on [0, inf), by Halley iteration."""
    if not (x >= 0.0) or math.isinf(x):
        raise DomainError(f"lambert_w0 requires a finite x >= 0, got {x}")
    if x == 0.0:
        return 0.0

    w = math.log1p(x) if x < 3.0 else math.log(x) - math.log(math.log(x))
    for _ in range(max_iter):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= step
        if abs(step) <= tol * (1.0 + abs(w)):
            break
    return w


def norm_cdf(x: float) -> float:
    return float(ndtr(x))


def sample_poisson(lam: float, rng: RngStream) -> int:
    if not (lam >= 0.0) or math.isinf(lam):
        raise DomainError(f"Poisson mean must be finite and >= 0, got {lam}")
    if lam == 0.0:
        return 0
    return rng.poisson(lam)


def bridge_minimum(w_start: float, w_end: float, dt: float, rng: RngStream) -> Tuple[float, float]:
    """Minimum of a Brownian bridge and the offset at which it is attained.

    The minimum inverts P(min <= m) = exp(-2 (w_start - m)(w_end - m) / dt);
    its location is drawn from the inverse-Gaussian mixture representation of
    the argmin given the minimum.
    """
    if not dt > 0.0:
        raise DomainError(f"bridge duration must be positive, got {dt}")

    e = rng.exponential()
    gap = w_end - w_start
    m = 0.5 * (w_start + w_end - math.sqrt(gap * gap + 2.0 * dt * e))
    m = min(m, w_start, w_end)

    c_start = (w_start - m) ** 2 / (2.0 * dt)
    c_end = (w_end - m) ** 2 / (2.0 * dt)
    if c_start <= 0.0:
        return m, _EDGE * dt
    if c_end <= 0.0:
        return m, (1.0 - _EDGE) * dt

    mu = math.sqrt(c_end / c_start)
    if rng.uniform() < 1.0 / (1.0 + mu):
        v = rng.wald(mu, 2.0 * c_end)
    else:
        v = 1.0 / rng.wald(1.0 / mu, 2.0 * c_start)
    theta = dt / (1.0 + v)
    theta = min(max(theta, _EDGE * dt), (1.0 - _EDGE) * dt)
    return m, theta


def _bessel_bridge_point(x: float, y: float, length: float, s: float, rng: RngStream) -> float:
    """Value at offset s of a 3-d Bessel bridge from x >= 0 to y >= 0 over length.

    Realized as the norm of a 3-d Brownian bridge from (x, 0, 0) to y*v, where
    the direction v follows the von Mises-Fisher law with concentration x*y/length.
    """
    kappa = x * y / length
    u = rng.uniform()
    if kappa > 0.0:
        cos_t = 1.0 + math.log1p((1.0 - u) * math.expm1(-2.0 * kappa)) / kappa
        cos_t = min(1.0, max(-1.0, cos_t))
    else:
        cos_t = 2.0 * u - 1.0
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    azimuth = 2.0 * math.pi * rng.uniform()

    end = (y * cos_t, y * sin_t * math.cos(azimuth), y * sin_t * math.sin(azimuth))
    start = (x, 0.0, 0.0)
    frac = s / length
    sd = math.sqrt(s * (length - s) / length)
    total = 0.0
    for a, b in zip(start, end):
        coord = a + (b - a) * frac + sd * rng.normal()
        total += coord * coord
    return math.sqrt(total)


@dataclass
class PathSkeleton:
    """Finite skeleton of a Brownian path, optionally conditioned on its minimum.

    When the minimum is recorded its location is one of the nodes, so every
    gap between consecutive nodes lies on one side of the argmin and is filled
    with a Bessel(3) bridge above the minimum.
    """
    times: List[float]
    values: List[float]
    min_value: Optional[float] = None
    min_time: Optional[float] = None
    fills: int = field(default=0, compare=False)

    def __post_init__(self):
        self.times = [float(t) for t in self.times]
        self.values = [float(v) for v in self.values]
        if len(self.times) != len(self.values):
            raise DomainError("skeleton times and values must have the same length")
        if not self.times:
            raise DomainError("skeleton needs at least one node")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise DomainError("skeleton times must be strictly increasing")
        if self.min_value is not None:
            if self.min_time is None:
                raise DomainError("a recorded minimum needs its time")
            if any(v < self.min_value for v in self.values):
                raise DomainError("recorded minimum exceeds a stored value")

    @classmethod
    def bridge(cls, t0: float, w0: float, t1: float, w1: float) -> "PathSkeleton":
        return cls([t0, t1], [w0, w1])

    @classmethod
    def with_minimum(cls, t0: float, w0: float, t1: float, w1: float, rng: RngStream) -> "PathSkeleton":
        """Bridge from (t0, w0) to (t1, w1) with its minimum drawn and stored as a node."""
        m, theta = bridge_minimum(w0, w1, t1 - t0, rng)
        t_min = min(max(t0 + theta, math.nextafter(t0, math.inf)), math.nextafter(t1, -math.inf))
        return cls([t0, t_min, t1], [w0, m, w1], min_value=m, min_time=t_min)

    @property
    def origin(self) -> Tuple[float, float]:
        return self.times[0], self.values[0]

    @property
    def span(self) -> Tuple[float, float]:
        return self.times[0], self.times[-1]

    def __len__(self) -> int:
        return len(self.times)

    def contains(self, t: float) -> bool:
        return self.times[0] <= t <= self.times[-1]

    def value_at(self, t: float, rng: RngStream) -> float:
        """Value at t, drawing it from the conditional law and storing it if new."""
        i = bisect.bisect_left(self.times, t)
        if i < len(self.times) and self.times[i] == t:
            return self.values[i]
        if i == 0 or i == len(self.times):
            raise DomainError(f"time {t} outside skeleton span {self.span}")

        t_left, t_right = self.times[i - 1], self.times[i]
        length = t_right - t_left
        s = t - t_left
        if self.min_value is None:
            mean = self.values[i - 1] + (self.values[i] - self.values[i - 1]) * s / length
            value = rng.normal(mean, math.sqrt(s * (t_right - t) / length))
        else:
            x = self.values[i - 1] - self.min_value
            y = self.values[i] - self.min_value
            value = self.min_value + _bessel_bridge_point(x, y, length, s, rng)

        self.times.insert(i, t)
        self.values.insert(i, value)
        self.fills += 1
        return value

    def extend(self, t: float, rng: RngStream) -> float:
        """Append a free Brownian value at t beyond the last node."""
        if self.min_value is not None:
            raise DomainError("cannot extend a minimum-conditioned skeleton")
        last_t, last_v = self.times[-1], self.values[-1]
        if t <= last_t:
            raise DomainError(f"extension time {t} must exceed {last_t}")
        value = rng.normal(last_v, math.sqrt(t - last_t))
        self.times.append(t)
        self.values.append(value)
        return value


def fill_conditioned(skeleton: Union[PathSkeleton, "SegmentedPath"], new_times: Iterable[float],
                     rng: RngStream) -> np.ndarray:
    """Values at new_times from the skeleton's conditional law; the skeleton keeps them."""
    return np.array([skeleton.value_at(float(t), rng) for t in new_times])


class SegmentedPath:
    """Contiguous skeleton segments; queries go to the segment covering the time."""

    def __init__(self, segments: Sequence[PathSkeleton]):
        ordered = sorted(segments, key=lambda seg: seg.times[0])
        for left, right in zip(ordered, ordered[1:]):
            if left.times[-1] != right.times[0]:
                raise DomainError(f"segments must share their boundary times, got {left.times[-1]} and {right.times[0]}")
            gap = abs(left.values[-1] - right.values[0])
            if gap > BOUNDARY_ATOL * max(1.0, abs(left.values[-1])):
                raise DomainError(f"segments disagree at t={right.times[0]}: {left.values[-1]} vs {right.values[0]}")
        self.segments = list(ordered)
        self._starts = [seg.times[0] for seg in self.segments]

    @property
    def span(self) -> Tuple[float, float]:
        return self._starts[0], self.segments[-1].times[-1]

    def segment_for(self, t: float) -> PathSkeleton:
        i = bisect.bisect_right(self._starts, t) - 1
        if i < 0 or t > self.segments[-1].times[-1]:
            raise DomainError(f"time {t} outside path span {self.span}")
        return self.segments[i]

    def value_at(self, t: float, rng: RngStream) -> float:
        return self.segment_for(t).value_at(t, rng)

    def __len__(self) -> int:
        return sum(len(seg) for seg in self.segments) - (len(self.segments) - 1)


def internal_clock(t: float) -> float:
    return t ** 3 / 3.0


def z_value(b_path, t: float, gamma: float, sigma: float, rng: RngStream) -> float:
    if not t > 0.0:
        raise DomainError(f"Z is queried at t > 0 only, got {t}")
    b = b_path.value_at(internal_clock(t), rng)
    return sigma / t * b + 0.5 * gamma * t


def z_process_values(b_path, times: Sequence[float], gamma: float, sigma: float, rng: RngStream) -> np.ndarray:
    """Z_t = (sigma/t) B(t^3/3) + gamma t / 2 read off (and filled into) a B skeleton."""
    t = np.asarray(times, dtype=float)
    if np.any(t <= 0.0):
        raise DomainError("Z is queried at t > 0 only")
    b = fill_conditioned(b_path, internal_clock(t), rng)
    return sigma / t * b + 0.5 * gamma * t
