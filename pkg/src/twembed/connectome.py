"""Sliding-window correlation graphs from ROI time-series.

A subject's ``T x R`` signal matrix is cut into overlapping windows; inside
each window every region pair is correlated and only pairs whose (signed)
correlation lies strictly above the window's percentile threshold survive.
The surviving pairs, tagged with the window index, form a dynamic graph.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, TooShortSeriesError, ValidationError


class DegenerateCorrelationWarning(UserWarning):
    """A zero-variance signal made a correlation undefined; 0 was used."""


@dataclass(frozen=True)
class TimeSeriesMatrix:
    subject_id: str
    values: np.ndarray  # (T, R)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError(f"{self.subject_id}: expected a 2-D matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"{self.subject_id}: time-series contains NaN or Inf")
        object.__setattr__(self, "values", values)

    @property
    def n_timepoints(self) -> int:
        return self.values.shape[0]

    @property
    def n_regions(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    window_length: int = 50
    stride: int = 5
    threshold_percentile: float = 80.0

    def __post_init__(self):
        if int(self.window_length) != self.window_length or self.window_length < 2:
            raise ValidationError("window_length must be an integer >= 2")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValidationError("stride must be a positive integer")
        if not 0.0 < self.threshold_percentile < 100.0:
            raise ValidationError("threshold_percentile must lie in (0, 100)")

    def n_windows(self, n_timepoints: int) -> int:
        if n_timepoints < self.window_length:
            return 0
        return (n_timepoints - self.window_length) // self.stride + 1


@dataclass
class DynamicGraph:
    """Undirected, unweighted temporal edges ``(u, v, t)`` with ``u < v``.

    ``edges`` is an ``(E, 3)`` integer array sorted by ``(t, u, v)``.
    """

    graph_id: str
    node_count: int
    n_snapshots: int
    edges: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        if len(edges):
            u, v, t = edges.T
            if np.any(u == v):
                raise ValidationError(f"{self.graph_id}: self-loop in edge list")
            if np.any(u > v):
                raise ValidationError(f"{self.graph_id}: edges must be stored with u < v")
            if u.min() < 0 or v.max() >= self.node_count:
                raise ValidationError(f"{self.graph_id}: node index out of range")
            if t.min() < 0 or t.max() >= self.n_snapshots:
                raise ValidationError(f"{self.graph_id}: snapshot index out of range")
            order = np.lexsort((v, u, t))
            edges = edges[order]
        self.edges = edges

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def edges_at(self, t: int) -> np.ndarray:
        return self.edges[self.edges[:, 2] == t]

    def edge_set(self) -> set:
        return {(int(u), int(v), int(t)) for u, v, t in self.edges}


def pearson(x, y) -> float:
    """Sample Pearson correlation of two equal-length vectors.

    Returns 0.0 (and emits :class:`DegenerateCorrelationWarning`) when either
    vector is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValidationError(f"pearson needs two vectors of equal length, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValidationError("pearson needs at least two observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("pearson input contains NaN or Inf")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        warnings.warn("zero-variance input, correlation set to 0", DegenerateCorrelationWarning, stacklevel=2)
        return 0.0
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def window_correlation(window: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All pairwise correlations of the columns of ``window``.

    Returns the ``(R, R)`` matrix and a boolean mask of zero-variance columns
    (whose correlations are defined as 0).
    """
    xc = window - window.mean(axis=0)
    ss = np.einsum("tr,tr->r", xc, xc)
    flat = ss == 0.0
    denom = np.sqrt(np.outer(ss, ss))
    cov = xc.T @ xc
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, cov / np.where(denom > 0, denom, 1.0), 0.0)
    np.clip(corr, -1.0, 1.0, out=corr)
    np.fill_diagonal(corr, 1.0)
    return corr, flat


def threshold_edges(corr: np.ndarray, percentile: float) -> tuple[np.ndarray, float]:
    """Upper-triangle pairs whose correlation strictly exceeds the percentile.

    The threshold is the linear-interpolation percentile of the signed
    upper-triangle values. Returns ``(pairs, threshold)`` with ``pairs`` an
    ``(E, 2)`` array of ``(u, v)``, ``u < v``.
    """
    iu, iv = np.triu_indices(corr.shape[0], k=1)
    vals = corr[iu, iv]
    thr = float(np.percentile(vals, percentile, method="linear"))
    keep = vals > thr
    return np.stack([iu[keep], iv[keep]], axis=1), thr


def build_dynamic_graph(ts: TimeSeriesMatrix, spec: WindowSpec = WindowSpec()) -> DynamicGraph:
    T, R = ts.values.shape
    if R < 2:
        raise ValidationError(f"{ts.subject_id}: need at least two regions")
    S = spec.n_windows(T)
    if S < 1:
        raise TooShortSeriesError(
            f"{ts.subject_id}: {T} time points is shorter than window_length={spec.window_length}"
        )
    chunks = []
    thresholds = []
    degenerate = []
    for t in range(S):
        start = t * spec.stride
        corr, flat = window_correlation(ts.values[start:start + spec.window_length])
        if flat.any():
            degenerate.append(t)
        pairs, thr = threshold_edges(corr, spec.threshold_percentile)
        thresholds.append(thr)
        chunks.append(np.column_stack([pairs, np.full(len(pairs), t, dtype=np.int64)]))
    if degenerate:
        warnings.warn(
            f"{ts.subject_id}: zero-variance regions in {len(degenerate)} window(s); correlations set to 0",
            DegenerateCorrelationWarning,
            stacklevel=2,
        )
    edges = np.concatenate(chunks) if chunks else np.empty((0, 3), dtype=np.int64)
    meta = {"thresholds": thresholds, "degenerate_windows": degenerate}
    return DynamicGraph(ts.subject_id, R, S, edges, meta)


def expected_edge_count(n_nodes: int, percentile: float) -> int:
    """Edges per snapshot when no correlations tie at the threshold."""
    n_pairs = n_nodes * (n_nodes - 1) // 2
    pos = percentile / 100.0 * (n_pairs - 1)
    # strict exceedance keeps every sorted index above floor(pos), or above pos when pos is integral
    return n_pairs - 1 - math.floor(pos)


# --- files -----------------------------------------------------------------

def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_timeseries_csv(path, subject_id: str | None = None) -> TimeSeriesMatrix:
    """One subject's ``T x R`` CSV; a non-numeric first row is taken as a header."""
    if subject_id is None:
        subject_id = os.path.splitext(os.path.basename(path))[0]
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not all(_is_number(c) for c in row):
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise FormatError("non-numeric value in time-series", path, lineno) from None
    if not rows:
        raise FormatError("empty time-series file", path)
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise FormatError(f"row has {len(r)} columns, expected {width}", path, i + 1)
    return TimeSeriesMatrix(subject_id, np.array(rows))


def write_timeseries_csv(ts: TimeSeriesMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(f"roi{j}" for j in range(ts.n_regions)) + "\n")
        for row in ts.values:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")


def read_phenotype(path) -> dict[str, tuple[int, str]]:
    """``subject_id,label,site`` rows -> ``{subject_id: (label, site)}``."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "label", "site"} - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"phenotype file lacks columns {sorted(missing)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                label = int(row["label"])
            except (TypeError, ValueError):
                raise FormatError(f"label {row['label']!r} is not an integer", path, lineno) from None
            if label not in (0, 1):
                raise FormatError(f"label must be 0 or 1, got {label}", path, lineno)
            out[row["subject_id"]] = (label, row["site"])
    return out


def write_phenotype(rows, path) -> None:
    """``rows`` is an iterable of ``(subject_id, label, site)``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("subject_id,label,site\n")
        for sid, label, site in rows:
            fh.write(f"{sid},{int(label)},{site}\n")


def write_graph(graph: DynamicGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"#{graph.graph_id} nodes={graph.node_count} snapshots={graph.n_snapshots}\n")
        for u, v, t in graph.edges:
            fh.write(f"{u}\t{v}\t{t}\n")


def read_graph(path) -> DynamicGraph:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        parts = header[1:].split(" ") if header.startswith("#") else []
        if len(parts) < 3 or not parts[-2].startswith("nodes=") or not parts[-1].startswith("snapshots="):
            raise FormatError("expected header '#graph_id nodes=R snapshots=S'", path, 1)
        graph_id = " ".join(parts[:-2])
        try:
            R = int(parts[-2][len("nodes="):])
            S = int(parts[-1][len("snapshots="):])
        except ValueError:
            raise FormatError("malformed node or snapshot count in header", path, 1) from None
        edges = []
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError("expected 'u<TAB>v<TAB>t'", path, lineno)
            try:
                edges.append([int(f) for f in fields])
            except ValueError:
                raise FormatError("non-integer edge field", path, lineno) from None
    try:
        return DynamicGraph(graph_id, R, S, np.array(edges, dtype=np.int64).reshape(-1, 3))
    except ValidationError as exc:
        raise FormatError(str(exc), path) from None
