import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, TextIO

from lcmsec.core.exceptions import BenchException

logger = logging.getLogger(__name__)

LATENCY_COLUMNS = (
    "mode",
    "size",
    "count",
    "received",
    "loss_rate",
    "datagrams",
    "p50_us",
    "p90_us",
    "p99_us",
    "baseline_p50_us",
    "baseline_p90_us",
    "baseline_p99_us",
    "delta_p50_us",
)

DISCOVERY_COLUMNS = (
    "nodes",
    "seed",
    "loss",
    "mu_ms",
    "sigma_ms",
    "converged",
    "time_ms",
    "joins",
    "join_responses",
    "restarts",
)


def percentile(values: Iterable[float], q: float) -> Optional[float]:
    """
    Linear-interpolated quantile of values, q in [0, 1].

    Returns None for an empty sample.
    """
    if not 0.0 <= q <= 1.0:
        raise BenchException(f"quantile {q} outside [0, 1]")
    data = sorted(values)
    if not data:
        return None
    pos = q * (len(data) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(data) - 1)
    return data[lo] + (data[hi] - data[lo]) * (pos - lo)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return f"{value:.3f}"
    return str(value)


@dataclass
class BenchReport:
    """Rows of one benchmark run under a fixed CSV header"""

    columns: tuple[str, ...]
    parameters: dict = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)

    def add_row(self, **values) -> dict:
        unknown = set(values) - set(self.columns)
        if unknown:
            raise BenchException(f"unknown report columns: {', '.join(sorted(unknown))}")
        row = {c: values.get(c) for c in self.columns}
        self.rows.append(row)
        return row

    def column(self, name: str) -> list:
        if name not in self.columns:
            raise BenchException(f"report has no column {name}")
        return [row[name] for row in self.rows]

    def write_csv(self, stream: TextIO):
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_cell(row[c]) for c in self.columns])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    def save(self, path: str):
        try:
            with open(path, "w", newline="") as f:
                self.write_csv(f)
        except OSError as e:
            raise BenchException(f"cannot write report to {path}") from e
        logger.info(f"wrote {len(self.rows)} rows to {path}")
