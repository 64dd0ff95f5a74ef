"""Per-epoch metrics CSV: ``epoch,split,loss,accuracy,jsd_0..,alpha_0..``."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    jsd: tuple[float, ...]
    alpha: tuple[float, ...]


def header(k: int) -> list[str]:
    return (
        ["epoch", "split", "loss", "accuracy"]
        + [f"jsd_{i}" for i in range(k)]
        + [f"alpha_{i}" for i in range(k)]
    )


def format_metrics(records: Sequence[MetricsRecord]) -> str:
    k = len(records[0].jsd) if records else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header(k))
    for r in records:
        if len(r.jsd) != k or len(r.alpha) != k:
            raise ValueError(f"epoch {r.epoch}: expected {k} jsd/alpha columns")
        w.writerow([r.epoch, r.split, repr(float(r.loss)), repr(float(r.accuracy))]
                   + [repr(float(v)) for v in r.jsd] + [repr(float(v)) for v in r.alpha])
    return buf.getvalue()


def write_metrics(path, records: Sequence[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_metrics(records))


def parse_metrics(text: str) -> list[MetricsRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("metrics file has no header row")
    head = rows[0]
    k = sum(1 for h in head if h.startswith("jsd_"))
    if head != header(k):
        raise ValueError(f"unexpected metrics header: {head}")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(head):
            raise ValueError(f"metrics line {line}: {len(row)} columns, expected {len(head)}")
        out.append(MetricsRecord(
            int(row[0]), row[1], float(row[2]), float(row[3]),
            tuple(float(v) for v in row[4:4 + k]),
            tuple(float(v) for v in row[4 + k:]),
        ))
    return out


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        return parse_metrics(fh.read())


def tidy_rows(records: Iterable[MetricsRecord]) -> list[tuple]:
    """Long format ``(epoch, split, metric, value)`` for external plotting."""
    rows = []
    for r in records:
        rows.append((r.epoch, r.split, "loss", r.loss))
        rows.append((r.epoch, r.split, "accuracy", r.accuracy))
        rows.extend((r.epoch, r.split, f"jsd_{i}", v) for i, v in enumerate(r.jsd))
        rows.extend((r.epoch, r.split, f"alpha_{i}", v) for i, v in enumerate(r.alpha))
    return rows
