"""`tails` command: running-mean and variance-doubling report of the alpha = 0 product weights."""
import logging
from typing import Optional

from retromc.commands.output import write_csv
from retromc.exceptions import ConfigError
from retromc.models.experiment import ExperimentConfig
from retromc.models.results import HeavyTailReport
from retromc.services.asian_zero import ZeroAlphaModel, heavy_tail_diagnostic

logger = logging.getLogger(__name__)

TAIL_FIELDS = ["estimator", "checkpoint", "running_mean", "variance_ratio", "max_share", "dominated", "stable"]
ESTIMATORS = ("naive", "hybrid")


def cmd_tails(config: ExperimentConfig, estimator: str = "naive", csv_path: Optional[str] = None) -> HeavyTailReport:
    if config.params.alpha != 0.0:
        raise ConfigError("tails needs alpha = 0", field="alpha")
    if estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}", field="estimator")

    report = heavy_tail_diagnostic(ZeroAlphaModel(config.params), config.n, seed=config.seed, estimator=estimator,
                                   payoff=config.payoff, config=config.hybrid, workers=config.workers)

    print(f"{'checkpoint':>12} {'running_mean':>14}")
    for c, m in zip(report.checkpoints, report.running_means):
        print(f"{c:>12d} {m:>14.6f}")
    print(f"variance ratio: {report.variance_ratio}  max share: {report.max_share}  "
          f"dominated: {report.dominated}  stable: {report.stable}")

    path = csv_path or config.csv
    if path:
        summary = {"estimator": estimator, "variance_ratio": report.variance_ratio, "max_share": report.max_share,
                   "dominated": report.dominated, "stable": report.stable}
        write_csv(path, TAIL_FIELDS, ({**summary, "checkpoint": c, "running_mean": m}
                                      for c, m in zip(report.checkpoints, report.running_means)))
    return report
