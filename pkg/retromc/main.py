import argparse
import logging
import logging.config
import os
import sys
from typing import Any, Dict, List, Optional

import yaml
from pydantic import ValidationError

from retromc.commands.histogram import cmd_histogram
from retromc.commands.metrics import export_metrics
from retromc.commands.price import cmd_price, load_experiment
from retromc.commands.tables import TABLES, cmd_table
from retromc.commands.tails import ESTIMATORS, cmd_tails
from retromc.config.settings import CONFIG_PATH, settings
from retromc.exceptions import ConfigError, DivergenceError, DomainError, EstimationError, ModelError, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

logger = logging.getLogger(__name__)


def setup_logging(level: Optional[str] = None):
    """Configure logging from the `logging` section of config.yaml"""
    # Ensure logs directory exists
    logs_dir = os.path.abspath(os.path.join(os.path.dirname(CONFIG_PATH), 'logs'))
    os.makedirs(logs_dir, exist_ok=True)

    if os.path.exists(CONFIG_PATH):
        try:
            with open(CONFIG_PATH, 'r') as f:
                config = yaml.safe_load(f) or {}
            if 'logging' in config:
                # relative log files live under the project logs directory
                for handler in config['logging'].get('handlers', {}).values():
                    if 'filename' in handler and not os.path.isabs(handler['filename']):
                        handler['filename'] = os.path.join(logs_dir, os.path.basename(handler['filename']))
                logging.config.dictConfig(config['logging'])
            else:
                logging.basicConfig(level=logging.INFO)
        except Exception as e:
            print(f"Failed to load logging config from config.yaml: {e}", file=sys.stderr)
            logging.basicConfig(level=logging.INFO)
    else:
        logging.basicConfig(level=logging.INFO)

    if level:
        logging.getLogger().setLevel(level.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retromc",
        description="Retrospective Monte Carlo pricing of options on alpha*S_T + beta*int S",
    )
    parser.add_argument("--version", action="version", version=f"{settings.service_name} {settings.service_version}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value experiment file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("--csv", help="CSV output path")
    common.add_argument("--metrics", help="write Prometheus text metrics to this path")
    common.add_argument("--log-level", default=settings.log_level, help="root log level")

    sub = parser.add_subparsers(dest="command", required=True)

    price = sub.add_parser("price", parents=[common], help="price one contract")
    price.add_argument("--samples", type=int, help="number of samples")
    price.add_argument("--method", choices=["trap-kv", "exact", "ue-bound", "ue-free", "hybrid"])

    table = sub.add_parser("table", parents=[common], help="reproduce a benchmark table")
    table.add_argument("table_id", choices=sorted(TABLES))
    table.add_argument("--scale", type=float, default=1.0, help="fraction of the reference sample counts")

    histogram = sub.add_parser("histogram", parents=[common], help="histogram of exact draws")
    histogram.add_argument("--samples", type=int, help="number of draws")
    histogram.add_argument("--bins", type=int, help="number of bins")
    histogram.add_argument("--ks-steps", type=int, help="trapezoid steps of the KS comparison (0 disables)")

    tails = sub.add_parser("tails", parents=[common], help="heavy-tail report of the alpha = 0 product weights")
    tails.add_argument("--samples", type=int, help="number of samples")
    tails.add_argument("--estimator", choices=ESTIMATORS, default="naive")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "seed": args.seed,
        "workers": args.workers,
        "n": getattr(args, "samples", None),
        "method": getattr(args, "method", None),
        "bins": getattr(args, "bins", None),
    }


def run(args: argparse.Namespace) -> int:
    if args.command == "price":
        config = load_experiment(args.config, _overrides(args))
        cmd_price(config, args.csv)
    elif args.command == "table":
        cmd_table(args.table_id, args.scale, args.seed, args.workers, args.csv)
    elif args.command == "tails":
        config = load_experiment(args.config, _overrides(args))
        cmd_tails(config, args.estimator, args.csv)
    else:
        config = load_experiment(args.config, _overrides(args))
        cmd_histogram(config, args.bins, args.csv, args.ks_steps)
    if args.metrics:
        export_metrics(args.metrics)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return run(args)
    except (ConfigError, ValidationError, DomainError) as e:
        logger.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, DivergenceError, ModelError, EstimationError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
