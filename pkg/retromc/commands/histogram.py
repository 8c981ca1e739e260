"""`histogram` command: exact draws of the underlying against a lognormal S_T reference."""
import logging
import math
from typing import Any, Dict, Optional

import numpy as np

from retromc.commands.output import write_csv
from retromc.config.settings import settings
from retromc.exceptions import ConfigError
from retromc.models.experiment import ExperimentConfig
from retromc.services.asian_positive import exact_underlying_draws
from retromc.services.baseline_mc import trap_underlying_samples
from retromc.services.runner import concat
from retromc.services.statistics import histogram_pair, ks_distance
from retromc.services.stochastic_core import RngStream

logger = logging.getLogger(__name__)

HISTOGRAM_FIELDS = ["bin_center", "exact_count", "lognormal_count"]


def lognormal_terminal(config: ExperimentConfig, rng: RngStream) -> np.ndarray:
    p = config.params
    return p.S0 * np.exp(p.gamma * p.T + p.sigma * math.sqrt(p.T) * rng.normals(config.n))


def cmd_histogram(config: ExperimentConfig, bins: Optional[int] = None, csv_path: Optional[str] = None,
                  ks_steps: Optional[int] = None) -> Dict[str, Any]:
    """Histogram n exact draws of alpha S_T + beta int S next to n lognormal S_T draws.

    With ks_steps > 0 the exact sample is also compared, by the two-sample
    Kolmogorov-Smirnov distance, with a trapezoidal sample on ks_steps steps.
    """
    if config.params.alpha <= 0.0:
        raise ConfigError("histogram needs alpha > 0", field="alpha")
    bins = bins or config.bins
    ks_steps = settings.engine_default("histogram", "ks_steps", 2048) if ks_steps is None else ks_steps

    exact = concat(exact_underlying_draws(config.params, config.n, config.seed, config.workers))
    # worker ids from config.workers upwards are unused by the exact draws
    reference = lognormal_terminal(config, RngStream(config.seed, config.workers, 0))
    centers, exact_counts, reference_counts = histogram_pair(exact, reference, bins)

    report: Dict[str, Any] = {"bins": bins, "n": config.n, "centers": centers,
                              "exact_counts": exact_counts, "lognormal_counts": reference_counts}
    if ks_steps:
        trap = trap_underlying_samples(config.params, ks_steps, config.n, config.seed + 1, config.workers)
        report["ks_distance"] = ks_distance(exact, trap)
        logger.info(f"KS distance exact vs trapezoidal ({ks_steps} steps): {report['ks_distance']:.5f}")

    print(f"{'bin_center':>14} {'exact':>10} {'lognormal':>10}")
    for c, a, b in zip(centers, exact_counts, reference_counts):
        print(f"{c:>14.4f} {a:>10d} {b:>10d}")
    if "ks_distance" in report:
        print(f"KS distance vs trapezoidal sample: {report['ks_distance']:.5f}")

    path = csv_path or config.csv
    if path:
        write_csv(path, HISTOGRAM_FIELDS, ({"bin_center": float(c), "exact_count": int(a), "lognormal_count": int(b)}
                                           for c, a, b in zip(centers, exact_counts, reference_counts)))
    return report
