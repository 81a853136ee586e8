"""Per-figure data files from sweep CSVs.

Each sweep axis maps to one figure. Rows aggregate the repeats of a
(value, optimizer, method) group by their median; ``aggregation`` says
whether the underlying per-repeat number was the sample-pooled row or the
mean of the per-client rows. Nothing is recomputed from models here.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .harness import METHODS, OPTIMIZERS, POOLED, MetricRow, read_metrics_csv

FIGURES = {
    "num_clusters": "fig_accuracy_vs_clusters.csv",
    "train_fraction": "fig_accuracy_vs_train_fraction.csv",
    "epsilon": "fig_accuracy_vs_epsilon.csv",
    "ul_snr": "fig_accuracy_vs_ul_snr.csv",
}

COLUMNS = ("value", "optimizer", "method", "aggregation", "repeats", "accuracy", "top3_accuracy",
           "mean_capacity", "local_epochs", "model_bytes")

_METRICS = ("accuracy", "top3_accuracy", "mean_capacity", "local_epochs", "model_bytes")


def figure_rows(rows: Sequence[MetricRow]) -> list[dict]:
    """Median-over-repeats table for the rows of one sweep axis."""
    pooled: dict[tuple, list[MetricRow]] = defaultdict(list)
    clients: dict[tuple, list[MetricRow]] = defaultdict(list)
    for r in rows:
        if r.error:
            continue
        key = (r.value, r.optimizer, r.method)
        if r.client_id == POOLED:
            pooled[key].append(r)
        else:
            clients[key + (r.repeat,)].append(r)

    client_mean: dict[tuple, list[dict]] = defaultdict(list)
    for (value, opt, method, _), rs in sorted(clients.items()):
        client_mean[(value, opt, method)].append(
            {m: float(np.mean([getattr(r, m) for r in rs])) for m in _METRICS})

    out = []
    mi = {m: i for i, m in enumerate(METHODS)}
    oi = {o: i for i, o in enumerate(OPTIMIZERS)}
    for key in sorted(pooled, key=lambda k: (k[0], oi.get(k[1], 99), mi.get(k[2], 99))):
        value, opt, method = key
        for agg, per_repeat in (
            ("pooled", [{m: float(getattr(r, m)) for m in _METRICS} for r in pooled[key]]),
            ("client_mean", client_mean.get(key, [])),
        ):
            if not per_repeat:
                continue
            row = {"value": value, "optimizer": opt, "method": method, "aggregation": agg,
                   "repeats": len(per_repeat)}
            for m in _METRICS:
                row[m] = float(np.median([d[m] for d in per_repeat]))
            out.append(row)
    return out


def write_report(sweep_dirs: Iterable[Path], out_dir: Path) -> list[Path]:
    """One CSV per figure for every axis found in the given sweep directories."""
    by_axis: dict[str, list[MetricRow]] = defaultdict(list)
    for d in sweep_dirs:
        for r in read_metrics_csv(Path(d) / "metrics.csv"):
            by_axis[r.axis].append(r)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for axis, rows in sorted(by_axis.items()):
        path = out_dir / FIGURES[axis]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in figure_rows(rows):
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        written.append(path)
    return written
