"""Worker pool driving per-sample and per-batch Monte Carlo tasks."""
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from retromc.models.results import EstimatorSample
from retromc.services.statistics import PartialCoMoments, PartialMoments, merge_all
from retromc.services.stochastic_core import RngStream

logger = logging.getLogger(__name__)

SampleTask = Callable[[RngStream], EstimatorSample]
BatchTask = Callable[[RngStream, int], "SampleBatch"]


@dataclass
class SampleBatch:
    """Columnar samples produced by one worker."""
    worker_id: int
    weights: np.ndarray
    base_weights: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None
    accepted: Optional[np.ndarray] = None
    retries: Optional[np.ndarray] = None
    poisson_counts: Optional[np.ndarray] = None
    skeleton_sizes: Optional[np.ndarray] = None
    clamped: int = 0

    @classmethod
    def from_samples(cls, worker_id: int, samples: Sequence[EstimatorSample]) -> "SampleBatch":
        n = len(samples)
        base = [s.base_weight for s in samples]
        controls = [s.control for s in samples]
        return cls(
            worker_id=worker_id,
            weights=np.fromiter((s.weight for s in samples), dtype=float, count=n),
            base_weights=None if any(b is None for b in base) else np.asarray(base, dtype=float),
            controls=None if any(c is None for c in controls) else np.asarray(controls, dtype=float),
            accepted=np.fromiter((s.accepted for s in samples), dtype=bool, count=n),
            retries=np.fromiter((s.retries for s in samples), dtype=np.int64, count=n),
            poisson_counts=np.fromiter((s.poisson_count for s in samples), dtype=np.int64, count=n),
            skeleton_sizes=np.fromiter((s.skeleton_size for s in samples), dtype=np.int64, count=n),
            clamped=sum(s.clamped for s in samples),
        )

    @property
    def n(self) -> int:
        return int(self.weights.size)

    def moments(self) -> PartialMoments:
        return PartialMoments.from_values(self.weights)

    def ratio_moments(self) -> PartialCoMoments:
        if self.base_weights is None:
            raise ValueError("batch carries no payoff-free weights")
        return PartialCoMoments.from_values(self.base_weights, self.weights)

    def control_moments(self) -> PartialCoMoments:
        if self.controls is None:
            raise ValueError("batch carries no control values")
        return PartialCoMoments.from_values(self.controls, self.weights)

    def total_retries(self) -> int:
        return int(self.retries.sum()) if self.retries is not None else 0

    def total_accepted(self) -> int:
        return int(self.accepted.sum()) if self.accepted is not None else self.n


def split_counts(n: int, workers: int) -> List[int]:
    """Contiguous block sizes; the first n % workers workers take one extra sample."""
    base, extra = divmod(n, workers)
    return [base + (1 if w < extra else 0) for w in range(workers)]


def _run_block(task: SampleTask, seed: int, worker_id: int, count: int) -> SampleBatch:
    samples = [task(RngStream(seed, worker_id, i)) for i in range(count)]
    return SampleBatch.from_samples(worker_id, samples)


def _run_batch(task: BatchTask, seed: int, worker_id: int, count: int) -> SampleBatch:
    batch = task(RngStream(seed, worker_id, 0), count)
    batch.worker_id = worker_id
    return batch


def _dispatch(fn, task, n: int, seed: int, workers: int) -> List[SampleBatch]:
    counts = split_counts(n, workers)
    if workers == 1:
        return [fn(task, seed, 0, counts[0])]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map keeps worker order, which keeps the merge deterministic
        return list(pool.map(fn, [task] * workers, [seed] * workers, range(workers), counts))


def run_samples(task: SampleTask, n: int, seed: int, workers: int = 1) -> List[SampleBatch]:
    """Run n independent draws; sample i of worker w uses stream (seed, w, i)."""
    start = time.perf_counter()
    batches = _dispatch(_run_block, task, n, seed, workers)
    logger.debug(f"run_samples: {n} samples on {workers} worker(s) in {time.perf_counter() - start:.2f}s")
    return batches


def run_batches(task: BatchTask, n: int, seed: int, workers: int = 1) -> List[SampleBatch]:
    """Run a vectorized task once per worker on stream (seed, w, 0)."""
    return _dispatch(_run_batch, task, n, seed, workers)


def merged_moments(batches: Sequence[SampleBatch]) -> PartialMoments:
    return merge_all([b.moments() for b in batches])


def concat(batches: Sequence[SampleBatch], attr: str = "weights") -> np.ndarray:
    parts = [getattr(b, attr) for b in batches]
    return np.concatenate(parts) if parts else np.empty(0)
