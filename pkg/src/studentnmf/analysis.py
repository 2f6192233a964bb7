"""Report tables from a fitted model: cluster matrix, membership histograms, time series."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .errors import ValidationError
from .wnmf import FactorModel, is_normalized

LOG_FLOOR = -4.0
N_BINS = 10


@dataclass(frozen=True, eq=False)
class ClusterReport:
    table: np.ndarray
    feature_names: list[str]
    scale: str = "linear"
    floored: np.ndarray | None = None  # log10 cells clamped at LOG_FLOOR

    @property
    def cluster_ids(self) -> list[str]:
        return [f"c{i + 1}" for i in range(self.table.shape[0])]


@dataclass(frozen=True, eq=False)
class MembershipDistribution:
    bins: np.ndarray  # k x 10 fractions
    n_rows_used: int
    n_rows_skipped: int = 0

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, N_BINS + 1)


@dataclass(frozen=True, eq=False)
class MembershipSeries:
    means: np.ndarray  # n_periods x k
    row_counts: np.ndarray
    empty: np.ndarray  # bool per period

    @property
    def period_count(self) -> int:
        return self.means.shape[0]


def cluster_report(model: FactorModel, feature_names: Sequence[str] | None = None, scale: str = "linear") -> ClusterReport:
    """Cluster matrix V with labels, linear or log10 (clamped at 1e-4)."""
    if scale not in ("linear", "log10"):
        raise ValidationError(f"scale must be 'linear' or 'log10', got {scale!r}")
    if not is_normalized(model):
        raise ValidationError("cluster rows do not sum to one; run normalize_clusters first")
    V = np.array(model.V, dtype=float)
    if feature_names is None:
        feature_names = [f"f{c}" for c in model.col_labels] if model.col_labels else [f"x{j + 1}" for j in range(V.shape[1])]
    feature_names = list(feature_names)
    if len(feature_names) != V.shape[1]:
        raise ValidationError(f"{len(feature_names)} feature names for {V.shape[1]} columns")
    if scale == "linear":
        return ClusterReport(table=V, feature_names=feature_names, scale=scale)
    with np.errstate(divide="ignore"):
        logged = np.log10(V)
    floored = logged < LOG_FLOOR
    return ClusterReport(table=np.where(floored, LOG_FLOOR, logged), feature_names=feature_names,
                         scale=scale, floored=floored)


def membership_distribution(model_or_U) -> MembershipDistribution:
    """Histogram of row-normalized memberships per cluster over [0, 0.1), ..., [0.9, 1.0]."""
    U = np.asarray(getattr(model_or_U, "U", model_or_U), dtype=float)
    sums = U.sum(axis=1)
    keep = sums > 0
    P = U[keep] / sums[keep, None]
    k = U.shape[1]
    bins = np.zeros((k, N_BINS))
    if P.shape[0]:
        idx = np.clip(np.floor(P * N_BINS).astype(int), 0, N_BINS - 1)
        for c in range(k):
            bins[c] = np.bincount(idx[:, c], minlength=N_BINS) / P.shape[0]
    return MembershipDistribution(bins=bins, n_rows_used=int(keep.sum()), n_rows_skipped=int((~keep).sum()))


def membership_timeseries(model: FactorModel, row_labels: Sequence | None = None,
                          period_count: int | None = None) -> MembershipSeries:
    """Mean of the (un-normalized) U rows of each period."""
    U = np.asarray(model.U, dtype=float)
    labels = row_labels if row_labels is not None else model.row_labels
    if labels is None:
        raise ValidationError("row labels are required for the time series")
    if len(labels) != U.shape[0]:
        raise ValidationError(f"{len(labels)} row labels for {U.shape[0]} rows of U")
    periods = np.array([int(lab[1]) for lab in labels], dtype=int)
    if period_count is None:
        period_count = int(periods.max()) + 1 if periods.size else 0
    k = U.shape[1]
    sums = np.zeros((period_count, k))
    counts = np.zeros(period_count, dtype=int)
    inside = (periods >= 0) & (periods < period_count)
    np.add.at(sums, periods[inside], U[inside])
    np.add.at(counts, periods[inside], 1)
    means = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return MembershipSeries(means=means, row_counts=counts, empty=counts == 0)


# --- serialization -----------------------------------------------------------

def fmt(x: float) -> str:
    """17 significant digits: parses back to the identical double."""
    return format(float(x), ".17g")


def _sidecar(path: str, meta: dict) -> None:
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_cluster_report(report: ClusterReport, stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["cluster", *report.feature_names])
    for cid, row in zip(report.cluster_ids, report.table):
        w.writerow([cid, *(fmt(v) for v in row)])


def read_cluster_table(stream: IO[str]) -> tuple[list[str], np.ndarray]:
    rows = list(csv.reader(stream))
    return rows[0][1:], np.array([[float(v) for v in r[1:]] for r in rows[1:]])


def write_distribution(dist: MembershipDistribution, stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    k = dist.bins.shape[0]
    w.writerow(["bin", "lower", "upper", *(f"c{i + 1}" for i in range(k))])
    edges = dist.edges
    for b in range(N_BINS):
        w.writerow([b, fmt(edges[b]), fmt(edges[b + 1]), *(fmt(dist.bins[c, b]) for c in range(k))])


def write_timeseries(series: MembershipSeries, stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    k = series.means.shape[1]
    w.writerow(["period", "rows", "empty", *(f"c{i + 1}" for i in range(k))])
    for p in range(series.period_count):
        w.writerow([p, int(series.row_counts[p]), int(series.empty[p]), *(fmt(v) for v in series.means[p])])


def write_activity(counts: Sequence[tuple[int, int]], stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["period", "students"])
    w.writerows(counts)


def write_report(kind: str, obj, prefix: str, meta: dict | None = None) -> list[str]:
    """Write ``<prefix>.<kind>.csv`` plus a JSON metadata sidecar; return the paths."""
    writers = {
        "clusters": write_cluster_report,
        "distribution": write_distribution,
        "timeseries": write_timeseries,
        "activity": write_activity,
    }
    csv_path, meta_path = f"{prefix}.{kind}.csv", f"{prefix}.{kind}.json"
    with open(csv_path, "w", newline="") as fh:
        writers[kind](obj, fh)
    info = {"report": kind, **(meta or {})}
    if kind == "clusters":
        info["scale"] = obj.scale
        if obj.floored is not None:
            info["floor"] = LOG_FLOOR
            info["floored_cells"] = [[int(i), int(j)] for i, j in np.argwhere(obj.floored)]
    elif kind == "distribution":
        info["n_rows_used"] = obj.n_rows_used
        info["n_rows_skipped"] = obj.n_rows_skipped
    elif kind == "timeseries":
        info["empty_periods"] = [int(p) for p in np.flatnonzero(obj.empty)]
    _sidecar(meta_path, info)
    return [csv_path, meta_path]
