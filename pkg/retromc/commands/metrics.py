from prometheus_client import CollectorRegistry, Counter, Histogram, write_to_textfile
import logging

from retromc.models.results import RunResult

logger = logging.getLogger(__name__)

registry = CollectorRegistry()

# Metrics
samples_total = Counter(
    'retromc_samples',
    'Total number of Monte Carlo samples produced',
    ['method'],
    registry=registry
)

attempts_total = Counter(
    'retromc_attempts',
    'Total number of proposal attempts (exact method and acceptance runs)',
    ['method'],
    registry=registry
)

accepted_total = Counter(
    'retromc_accepted',
    'Total number of accepted proposals',
    ['method'],
    registry=registry
)

run_duration = Histogram(
    'retromc_run_duration_seconds',
    'Wall time of one pricing or acceptance run in seconds',
    buckets=(0.1, 0.5, 1.0, 5.0, 15.0, 60.0, 300.0, 900.0, float('inf')),
    registry=registry
)


def record_run(result: RunResult):
    """Update the counters from one finished run"""
    samples_total.labels(method=result.method).inc(result.n)
    attempts = result.attempts if result.attempts is not None else result.n
    attempts_total.labels(method=result.method).inc(attempts)
    if result.acceptance_rate is not None:
        accepted_total.labels(method=result.method).inc(round(result.acceptance_rate * attempts))
    run_duration.observe(result.wall_seconds)


def export_metrics(path: str):
    """Write the registry in the Prometheus text format"""
    write_to_textfile(path, registry)
    logger.info(f"Wrote metrics to {path}")
