import csv
import logging
import os
from typing import Any, Dict, Iterable, Sequence

logger = logging.getLogger(__name__)

RESULT_FIELDS = ["method", "price", "std_error", "ci_low", "ci_high", "n", "acceptance_rate", "estimator"]


def write_csv(path: str, fieldnames: Sequence[str], rows: Iterable[Dict[str, Any]], append: bool = False):
    """Write rows as UTF-8 CSV with a header row (RFC-4180 quoting and CRLF line ends)."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\r\n")
        if not exists:
            writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
    logger.info(f"Wrote {path}")
