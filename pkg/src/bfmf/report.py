"""Solve reports and their JSON / CSV serialization."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

SCHEMA_VERSION = 1
TIMING_FIELDS = ("factor_time_s", "solve_time_s", "analysis_time_s")


@dataclass
class SolveReport:
    """One configuration's outcome; see ``docs/report_schema.md`` for the field list."""

    problem: str
    n: int
    nnz: int
    solver: str
    eps: float | None = None
    n_min: int | None = None
    seed: int = 0
    rhs: str = "ones"
    status: str = "converged"
    error: str | None = None
    analysis_time_s: float = 0.0
    factor_time_s: float = 0.0
    factor_flops: int = 0
    factor_flops_by_phase: dict = field(default_factory=dict)
    exact_factor_flops: int = 0
    flop_compression_pct: float | None = None
    factor_memory_units: int = 0
    exact_memory_units: int = 0
    mem_compression_pct: float | None = None
    compressed_fronts: int = 0
    max_rank: int = 0
    root_front_dim: int = 0
    root_max_rank: int = 0
    gmres_iterations: int | None = None
    refinement_steps: int | None = None
    relative_residual: float | None = None
    solve_flops: int = 0
    solve_time_s: float = 0.0
    top_fronts: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolveReport":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown report fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "SolveReport":
        return cls.from_dict(json.loads(text))

    def deterministic_dict(self) -> dict:
        """Fields that must match across runs with the same seed."""
        d = self.to_dict()
        for k in TIMING_FIELDS:
            d.pop(k)
        return d


def field_names() -> list:
    return [f.name for f in fields(SolveReport)]


# --- CSV -----------------------------------------------------------------------
# Every cell is the JSON encoding of the value, so types survive the round trip.

def _cell(value) -> str:
    return json.dumps(value, sort_keys=True, allow_nan=True)


def report_to_row(r: SolveReport) -> list:
    d = r.to_dict()
    return [_cell(d[k]) for k in field_names()]


def report_from_row(header, row) -> SolveReport:
    return SolveReport.from_dict({k: json.loads(v) for k, v in zip(header, row)})


SLOPE_MARKER = "#slopes"


def write_csv(target, reports, slopes: dict | None = None) -> None:
    """Header, one row per report, then an optional ``#slopes`` footer record.

    ``target`` is a path or an open text file.
    """
    if hasattr(target, "write"):
        _write_rows(target, reports, slopes)
        return
    with open(target, "w", newline="") as fh:
        _write_rows(fh, reports, slopes)


def _write_rows(fh, reports, slopes):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(field_names())
    for r in reports:
        w.writerow(report_to_row(r))
    if slopes:
        w.writerow([SLOPE_MARKER, _cell(slopes)])


def read_csv(path):
    """Return ``(reports, slopes)``; ``slopes`` is ``None`` without a footer."""
    reports, slopes = [], None
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    for row in rows[1:]:
        if row and row[0] == SLOPE_MARKER:
            slopes = json.loads(row[1])
        elif row:
            reports.append(report_from_row(header, row))
    return reports, slopes


def percent(part, whole):
    if not whole:
        return None
    return 100.0 * part / whole


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``; NaN if undefined."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    if ok.sum() < 2 or np.ptp(np.log(x[ok])) == 0:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])
