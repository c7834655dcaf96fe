"""
Emitters module for the Slow SDE Laboratory.
Writes trajectories and experiment reports as CSV, and series as SVG plots.
"""

import csv
import io
import logging
import os
from typing import Dict, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from config import Config
from exceptions import DomainError
from optim import TrajectoryRecord

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = Config.SVG_HASH_SALT


def format_number(value):
    """17 significant digits; integers and non-finite values spelled plainly."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if np.isnan(value):
        return "nan"
    if np.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.{Config.CSV_DIGITS}g}"


def _format(value):
    if isinstance(value, (bool, int, float, np.bool_, np.integer, np.floating)):
        return format_number(value)
    return str(value)


def trajectory_header(dim):
    return (["s", "t"] + [f"theta_{i}" for i in range(dim)] + [f"phi_{i}" for i in range(dim)]
            + ["dist_manifold", "loss", "tr_hess"])


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def emit_csv(record: TrajectoryRecord, path):
    """Header row, then one row per record; LF line endings."""
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(trajectory_header(record.dim))
        for i in range(len(record)):
            row = [format_number(int(record.rounds[i])), format_number(record.times[i])]
            row += [format_number(v) for v in record.thetas[i]]
            row += [format_number(v) for v in record.phis[i]]
            row += [format_number(record.dist[i]), format_number(record.loss[i]), format_number(record.tr_hess[i])]
            writer.writerow(row)
    logger.info(f"Wrote {len(record)} records to {path}")
    return path


def read_csv(path):
    """Inverse of emit_csv; metadata is not stored in the file."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [row for row in reader if row]
    dim = (len(header) - 5) // 2
    if header != trajectory_header(dim):
        raise DomainError(f"{path}: not a trajectory CSV (header {header[:3]}...)")
    if not rows:
        return TrajectoryRecord.empty(dim)
    table = np.array([[float(v) for v in row] for row in rows])
    return TrajectoryRecord(
        rounds=table[:, 0].astype(int),
        times=table[:, 1],
        thetas=table[:, 2:2 + dim],
        phis=table[:, 2 + dim:2 + 2 * dim],
        dist=table[:, 2 + 2 * dim],
        loss=table[:, 3 + 2 * dim],
        tr_hess=table[:, 4 + 2 * dim],
    )


def report_csv_text(report):
    """Long-format CSV of a Report: kind,name,key,value."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["kind", "name", "key", "value"])
    for i, row in enumerate(report.rows):
        for key, value in row.items():
            writer.writerow(["row", i, key, _format(value)])
    for fit in report.fits:
        for key in ("estimate", "low", "high"):
            writer.writerow(["fit", fit.name, key, format_number(getattr(fit, key))])
    for a in report.assertions:
        writer.writerow(["assertion", a.name, "target", a.target])
        writer.writerow(["assertion", a.name, "observed", format_number(a.observed)])
        writer.writerow(["assertion", a.name, "tolerance", a.tolerance])
        writer.writerow(["assertion", a.name, "passed", format_number(a.passed)])
    for name, values in report.samples.items():
        for index, value in enumerate(np.asarray(values, dtype=float).ravel()):
            writer.writerow(["sample", name, index, format_number(value)])
    for message in report.notices:
        writer.writerow(["notice", "", "", message])
    return buffer.getvalue()


def emit_report_csv(report, path):
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(report_csv_text(report))
    logger.info(f"Wrote report CSV for {report.experiment} to {path}")
    return path


def emit_table_csv(rows, path):
    """Rows of dicts sharing the first row's keys, one CSV line each."""
    if not rows:
        raise DomainError(f"no rows to write to {path}")
    _ensure_parent(path)
    columns = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(row.get(c, "")) for c in columns])
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def emit_svg(series: Dict[str, tuple], path, title="", xlabel="", ylabel="", log_x=False, log_y=False,
             annotation: Optional[str] = None, scatter=False):
    """Line (or scatter) plot of named (xs, ys) series; byte-stable for fixed input."""
    series = {name: (np.asarray(xs, dtype=float), np.asarray(ys, dtype=float))
              for name, (xs, ys) in series.items() if len(xs)}
    if not series:
        raise DomainError(f"nothing to plot for {path}: every series is empty")

    _ensure_parent(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        for name in sorted(series):
            xs, ys = series[name]
            if scatter:
                ax.plot(xs, ys, "o", label=name, markersize=4)
            else:
                ax.plot(xs, ys, "-", label=name, linewidth=1.5)
        if log_x:
            ax.set_xscale("log")
        if log_y:
            ax.set_yscale("log")
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if annotation:
            ax.text(0.02, 0.02, annotation, transform=ax.transAxes, fontsize=8)
        ax.legend(fontsize=7, loc="best")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.info(f"Wrote plot {path}")
    return path


def emit_trajectory_svg(record: TrajectoryRecord, path, title=""):
    """Loss and tr ∇²L(Φ) against time."""
    series = {"loss": (record.times, record.loss)}
    finite = np.isfinite(record.tr_hess)
    if np.any(finite):
        series["tr_hess"] = (record.times[finite], record.tr_hess[finite])
    return emit_svg(series, path, title=title, xlabel="t = steps·η²", ylabel="value")


def emit_report_svgs(report, directory, stem):
    """One SVG per report with the series that share a plot; returns the paths."""
    if not report.series:
        return []
    positive = all(np.all(np.asarray(ys, dtype=float) > 0) for _, ys in report.series.values())
    log_x = report.experiment in ("tracking", "closeness")
    log_y = positive and report.experiment in ("tracking", "closeness", "drift_ratio")
    annotation = "; ".join(f"{f.name} = {f.estimate:.3g}" for f in report.fits[:4]) or None
    path = os.path.join(directory, f"{stem}.svg")
    emit_svg(report.series, path, title=report.experiment, xlabel="η" if log_x else "t",
             ylabel=report.experiment, log_x=log_x, log_y=log_y, annotation=annotation, scatter=log_x)
    return [path]
