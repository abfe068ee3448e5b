"""Machine-readable metric records: one TSV row per (kind, severity, metric, value) cell."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, NamedTuple

FIELDS = ("kind", "severity", "metric", "value")


class MetricRecord(NamedTuple):
    kind: str
    severity: str  # "1".."5", "clean", "mean" or a probe label
    metric: str
    value: float | None


def _fmt(v: float | None) -> str:
    return "nan" if v is None else repr(float(v))


def _parse(v: str) -> float | None:
    x = float(v)
    return None if math.isnan(x) else x


def write_records(path: str | Path, records: Iterable[MetricRecord]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(FIELDS)
        for r in records:
            w.writerow([r.kind, str(r.severity), r.metric, _fmt(r.value)])
    return path


def read_records(path: str | Path) -> list[MetricRecord]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != FIELDS:
        raise ValueError(f"{path}: bad header {rows[0] if rows else None}")
    return [MetricRecord(k, s, m, _parse(v)) for k, s, m, v in rows[1:]]
