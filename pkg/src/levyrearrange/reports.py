"""Comparison reports and their deterministic CSV / JSON serialization."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["MCEstimate", "compare_estimates", "ComparisonReport", "CSV_COLUMNS", "rows_to_csv", "dump_json",
           "write_report"]

CSV_COLUMNS = ("instance_id", "n", "lhs", "rhs", "margin", "tol", "holds")


@dataclass(frozen=True)
class ComparisonReport:
    """Paired estimate of a raw and a rearranged functional.

    ``margin`` is oriented so that the inequality under test reads
    ``margin >= -tol``. Deterministic computations have zero standard errors.
    """

    lhs: float
    rhs: float
    margin: float
    tol: float
    holds: bool
    lhs_se: float = 0.0
    rhs_se: float = 0.0
    margin_se: float = 0.0
    paired_se: float = 0.0
    seed: int | None = None
    label: str = ""
    extra: dict = field(default_factory=dict)

    def __bool__(self):
        return bool(self.holds)

    def to_dict(self) -> dict:
        return _clean(asdict(self))


@dataclass(frozen=True)
class MCEstimate:
    """Sample mean with its standard error; ``samples`` holds the per-path values."""

    value: float
    std_error: float
    samples: np.ndarray = field(repr=False, compare=False, default=None)

    @classmethod
    def from_samples(cls, y) -> "MCEstimate":
        y = np.asarray(y, dtype=float)
        if len(y) < 2 or np.all(y == y[0]):
            se = 0.0  # a constant sample has no spread; avoid rounding noise from std
        else:
            se = float(y.std(ddof=1) / math.sqrt(len(y)))
        return cls(float(y.mean()), se, y)


def compare_estimates(raw: MCEstimate, star: MCEstimate, allowance_rel: float, seed: int, label: str,
                      extra: dict) -> ComparisonReport:
    """``raw - star`` against ``3`` combined standard errors plus a relative allowance.

    ``paired_se`` is the standard error of the per-path differences, which is
    the relevant spread when both sides share random numbers.
    """
    margin = raw.value - star.value
    se = math.hypot(raw.std_error, star.std_error)
    paired = 0.0
    if raw.samples is not None and star.samples is not None and len(raw.samples) == len(star.samples) > 1:
        diff = raw.samples - star.samples
        paired = float(diff.std(ddof=1) / math.sqrt(len(diff)))
    allowance = allowance_rel * max(abs(raw.value), abs(star.value))
    tol = 3 * se + allowance
    return ComparisonReport(lhs=raw.value, rhs=star.value, margin=margin, tol=tol, holds=bool(margin >= -tol),
                            lhs_se=raw.std_error, rhs_se=star.std_error, margin_se=se, paired_se=paired,
                            seed=seed, label=label, extra={"allowance": allowance, **extra})


def _clean(obj):
    """Make a structure JSON-safe with stable float text (``inf`` as a string)."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "tolist"):
        return _clean(obj.tolist())
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, int):
        return int(obj)
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return float(obj)
    return obj


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: list[dict], columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def write_report(out_dir, stem: str, payload: dict, rows: list[dict], columns=CSV_COLUMNS):
    """Write ``<stem>.json`` and ``<stem>.csv`` atomically-enough (write then rename)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for suffix, text in ((".json", dump_json(payload)), (".csv", rows_to_csv(rows, columns))):
        p = out / f"{stem}{suffix}"
        tmp = p.with_suffix(suffix + ".tmp")
        tmp.write_text(text)
        tmp.replace(p)
        paths.append(p)
    return paths
