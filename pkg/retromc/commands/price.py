"""`price` command: load an experiment config and run one pricing method."""
import logging
from typing import Any, Dict, Optional, Tuple

from pydantic import ValidationError

from retromc.commands.metrics import record_run
from retromc.commands.output import RESULT_FIELDS, write_csv
from retromc.config.settings import settings
from retromc.exceptions import ConfigError
from retromc.models.experiment import FLAT_KEYS, ExperimentConfig, Method
from retromc.models.results import RunResult
from retromc.services.asian_positive import price_option
from retromc.services.asian_zero import price_asian_hybrid
from retromc.services.baseline_mc import trap_kv_price

logger = logging.getLogger(__name__)

# A parsed file: key -> (raw value, line number)
ParsedFile = Dict[str, Tuple[str, Optional[int]]]


def parse_config_file(path: str) -> ParsedFile:
    """Read a flat key=value experiment file; '#' starts a comment."""
    values: ParsedFile = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")

    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FLAT_KEYS:
            raise ConfigError(f"unknown key {key!r}", field=key, line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {values[key][1]})", field=key, line=lineno)
        values[key] = (value, lineno)
    return values


def _engine_defaults() -> Dict[str, Any]:
    defaults = {
        "seed": settings.default_seed,
        "workers": settings.default_workers,
        "retry_cap": settings.retry_cap,
    }
    for key, (section, name) in (("J", ("hybrid", "J")), ("eta", ("hybrid", "eta")), ("c_p", ("hybrid", "c_p")),
                                 ("M", ("baseline", "steps")), ("c_P", ("ue", "c_P")), ("c", ("ue", "c")),
                                 ("bins", ("histogram", "bins"))):
        value = settings.engine_default(section, name)
        if value is not None:
            defaults[key] = value
    return defaults


def build_config(file_values: Optional[ParsedFile] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Engine defaults, then file values, then CLI overrides, validated as one ExperimentConfig."""
    merged: Dict[str, Tuple[Any, Optional[int]]] = {k: (v, None) for k, v in _engine_defaults().items()}
    merged.update(file_values or {})
    merged.update({k: (v, None) for k, v in (overrides or {}).items() if v is not None})

    data: Dict[str, Any] = {}
    origin: Dict[Tuple[str, ...], Tuple[str, Optional[int]]] = {}
    for key, (value, lineno) in merged.items():
        section, name = FLAT_KEYS[key]
        target = data.setdefault(section, {}) if section else data
        target[name] = value
        origin[(section, name) if section else (name,)] = (key, lineno)

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        error = e.errors()[0]
        loc = tuple(str(part) for part in error["loc"])
        key, lineno = origin.get(loc[:2], origin.get(loc[:1], (".".join(loc) or None, None)))
        raise ConfigError(error["msg"], field=key, line=lineno)


def load_experiment(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    file_values = parse_config_file(path) if path else None
    config = build_config(file_values, overrides)
    logger.info(f"Loaded experiment: method={config.method.value}, n={config.n}, seed={config.seed}, "
                f"workers={config.workers}")
    return config


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Dispatch to the pricer of the configured method."""
    if config.method == Method.TRAP_KV:
        result = trap_kv_price(config.params, config.payoff, config.grid, config.n, config.seed, config.workers,
                               control_variate=config.control_variate, fitted_lambda=config.fitted_lambda)
    elif config.method == Method.HYBRID:
        result = price_asian_hybrid(config.params, config.payoff, config.hybrid, config.n, config.seed,
                                    config.workers, control_variate=config.control_variate,
                                    fitted_lambda=config.fitted_lambda, estimator=config.ue.estimator.value)
    else:
        result = price_option(config.params, config.payoff, config.method, config.n, config.seed, config.workers,
                              estimator=config.ue.estimator, c_P=config.ue.c_P, c=config.ue.c)
    record_run(result)
    return result


def format_result(result: RunResult) -> str:
    lines = [
        f"method          {result.method}",
        f"price           {result.price:.6f}",
        f"std error       {result.std_error:.6f}",
        f"95% CI          [{result.ci_low:.6f}, {result.ci_high:.6f}]",
        f"samples         {result.n}",
    ]
    if result.acceptance_rate is not None:
        lines.append(f"acceptance      {100.0 * result.acceptance_rate:.2f}%")
    for key, value in sorted(result.diagnostics.items()):
        lines.append(f"{key:<15} {value:.6g}")
    lines.append(f"wall time       {result.wall_seconds:.2f}s")
    return "\n".join(lines)


def result_row(result: RunResult) -> Dict[str, Any]:
    return {field: getattr(result, field) for field in RESULT_FIELDS}


def cmd_price(config: ExperimentConfig, csv_path: Optional[str] = None) -> RunResult:
    result = run_experiment(config)
    print(format_result(result))
    path = csv_path or config.csv
    if path:
        write_csv(path, RESULT_FIELDS, [result_row(result)], append=True)
    return result
