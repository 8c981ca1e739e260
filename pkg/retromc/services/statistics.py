import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from retromc.config.settings import settings
from retromc.exceptions import EstimationError
from retromc.models.results import RunResult

logger = logging.getLogger(__name__)


@dataclass
class PartialMoments:
    """Count, mean and centred sum of squares of one worker's samples."""
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def from_values(cls, values: Iterable[float]) -> "PartialMoments":
        arr = np.asarray(values, dtype=float)
        n = int(arr.size)
        if n == 0:
            return cls()
        mean = math.fsum(arr) / n
        m2 = math.fsum((arr - mean) ** 2)
        return cls(n, mean, m2)

    def merge(self, other: "PartialMoments") -> "PartialMoments":
        if other.n == 0:
            return PartialMoments(self.n, self.mean, self.m2)
        if self.n == 0:
            return PartialMoments(other.n, other.mean, other.m2)
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return PartialMoments(n, mean, m2)

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.n) if self.n > 1 else 0.0


@dataclass
class PartialCoMoments:
    """Paired moments of (x, y), merged the same way as PartialMoments."""
    n: int = 0
    mean_x: float = 0.0
    mean_y: float = 0.0
    m2_x: float = 0.0
    m2_y: float = 0.0
    c_xy: float = 0.0

    @classmethod
    def from_values(cls, x: Iterable[float], y: Iterable[float]) -> "PartialCoMoments":
        ax = np.asarray(x, dtype=float)
        ay = np.asarray(y, dtype=float)
        if ax.shape != ay.shape:
            raise EstimationError("paired samples must have the same length")
        n = int(ax.size)
        if n == 0:
            return cls()
        mx = math.fsum(ax) / n
        my = math.fsum(ay) / n
        dx = ax - mx
        dy = ay - my
        return cls(n, mx, my, math.fsum(dx * dx), math.fsum(dy * dy), math.fsum(dx * dy))

    def merge(self, other: "PartialCoMoments") -> "PartialCoMoments":
        if other.n == 0:
            return PartialCoMoments(**self.__dict__)
        if self.n == 0:
            return PartialCoMoments(**other.__dict__)
        n = self.n + other.n
        dx = other.mean_x - self.mean_x
        dy = other.mean_y - self.mean_y
        w = self.n * other.n / n
        return PartialCoMoments(
            n=n,
            mean_x=self.mean_x + dx * other.n / n,
            mean_y=self.mean_y + dy * other.n / n,
            m2_x=self.m2_x + other.m2_x + dx * dx * w,
            m2_y=self.m2_y + other.m2_y + dy * dy * w,
            c_xy=self.c_xy + other.c_xy + dx * dy * w,
        )

    @property
    def var_x(self) -> float:
        return self.m2_x / (self.n - 1) if self.n > 1 else 0.0

    @property
    def var_y(self) -> float:
        return self.m2_y / (self.n - 1) if self.n > 1 else 0.0

    @property
    def cov(self) -> float:
        return self.c_xy / (self.n - 1) if self.n > 1 else 0.0


def merge_all(partials: Sequence):
    """Merge partials left to right (worker order)."""
    if not partials:
        return PartialMoments()
    total = partials[0]
    for p in partials[1:]:
        total = total.merge(p)
    return total


def make_result(price: float, std_error: float, n: int, method: str,
                acceptance_rate: Optional[float] = None, attempts: Optional[int] = None,
                wall_seconds: float = 0.0, estimator: str = "delta1",
                diagnostics: Optional[Dict[str, float]] = None,
                z: Optional[float] = None) -> RunResult:
    if not (math.isfinite(price) and math.isfinite(std_error)):
        raise EstimationError(f"{method}: non-finite estimate (price={price}, se={std_error})")
    z = settings.ci_z if z is None else z
    half = z * std_error
    return RunResult(
        method=method,
        price=price,
        std_error=std_error,
        ci_low=price - half,
        ci_high=price + half,
        n=n,
        acceptance_rate=acceptance_rate,
        attempts=attempts,
        wall_seconds=wall_seconds,
        estimator=estimator,
        diagnostics=diagnostics or {},
    )


def stats_reduce(partials: Sequence[PartialMoments], method: str = "", **kwargs) -> RunResult:
    """Merge per-worker partial moments in order and form mean, SE and 95% CI."""
    total = merge_all(list(partials))
    if total.n < 2:
        raise EstimationError(f"need at least 2 samples, got {total.n}")
    return make_result(total.mean, total.std_error, total.n, method, **kwargs)


def ratio_estimate(co: PartialCoMoments) -> Tuple[float, float]:
    """Self-normalized mean(y)/mean(x) with its delta-method standard error."""
    if co.n < 2:
        raise EstimationError(f"need at least 2 samples, got {co.n}")
    if co.mean_x == 0.0 or not math.isfinite(co.mean_x):
        raise EstimationError("self-normalized estimator has a zero denominator")
    ratio = co.mean_y / co.mean_x
    var_d = co.var_y - 2.0 * ratio * co.cov + ratio * ratio * co.var_x
    se = math.sqrt(max(var_d, 0.0) / co.n) / abs(co.mean_x)
    return ratio, se


def control_variate_estimate(co: PartialCoMoments, expectation: float, fitted: bool = False) -> Tuple[float, float, float]:
    """Control-variate adjusted mean of y with control x of known expectation.

    Returns (price, standard error, coefficient); the coefficient is 1 unless
    fitted, in which case it is cov(x, y)/var(x).
    """
    if co.n < 2:
        raise EstimationError(f"need at least 2 samples, got {co.n}")
    lam = 1.0
    if fitted:
        lam = co.cov / co.var_x if co.var_x > 0.0 else 0.0
    price = co.mean_y - lam * (co.mean_x - expectation)
    var = co.var_y - 2.0 * lam * co.cov + lam * lam * co.var_x
    return price, math.sqrt(max(var, 0.0) / co.n), lam


def ks_distance(sample_a: Sequence[float], sample_b: Sequence[float]) -> float:
    return float(stats.ks_2samp(sample_a, sample_b).statistic)


def ks_against_cdf(sample: Sequence[float], cdf) -> float:
    return float(stats.kstest(sample, cdf).statistic)


def histogram_pair(sample_a: Sequence[float], sample_b: Sequence[float], bins: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts of two samples on common bins; returns (centers, counts_a, counts_b)."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    edges = np.histogram_bin_edges(np.concatenate([a, b]), bins=bins)
    counts_a, _ = np.histogram(a, bins=edges)
    counts_b, _ = np.histogram(b, bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, counts_a, counts_b


def variance_doubling_ratio(values: Sequence[float]) -> Optional[float]:
    """Sample variance of all values over that of the first half; None when undefined."""
    arr = np.asarray(values, dtype=float)
    half = arr.size // 2
    if half < 2:
        return None
    first = float(np.var(arr[:half], ddof=1))
    if not first > 0.0:
        return None
    return float(np.var(arr[:2 * half], ddof=1)) / first


def max_share(values: Sequence[float]) -> Optional[float]:
    """Largest |value| over the sum of |values|."""
    arr = np.abs(np.asarray(values, dtype=float))
    total = float(arr.sum())
    return float(arr.max()) / total if total > 0.0 else None
