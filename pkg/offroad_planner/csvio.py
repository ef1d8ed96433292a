"""
CSV emission for every numeric result file.

Floats are written with 17 significant digits so 64-bit values round-trip
exactly; line endings are LF.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Any, Iterable, List, Sequence, Union

import numpy as np

from offroad_planner.errors import DomainError

logger = logging.getLogger(__name__)


def format_value(value: Any) -> str:
    """Render one cell."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".17g")
    return str(value)


def emit_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """
    Write a rectangular table as CSV.

    Args:
        path: Target file; parent directories are created
        header: Column names
        rows: Iterable of rows, each exactly len(header) wide

    Returns:
        The written path

    Raises:
        DomainError: If a row width differs from the header width
        OSError: If the path is not writable
    """
    materialized: List[List[str]] = []
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DomainError(f"Row {i} has {len(row)} cells, header has {len(header)}")
        materialized.append([format_value(v) for v in row])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(list(header))
        writer.writerows(materialized)

    logger.debug(f"Wrote {len(materialized)} rows to {path}")
    return path


def read_csv(path: Union[str, Path]) -> List[dict]:
    """Read a CSV written by emit_csv back as a list of dicts of strings."""
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))
