"""Feature tables, base-class Gaussian statistics and the Tukey power transform."""

from __future__ import annotations

import csv
import gzip
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CovarianceUndefined,
    DimensionMismatch,
    EmptyFile,
    LogOfNonPositive,
    NegativeInput,
    ParseError,
    SchemaMismatch,
)


@dataclass(frozen=True)
class FeatureTable:
    """Labeled feature vectors in file order.

    ``vectors`` is an ``(n, dim)`` float64 array and ``labels`` the matching
    list of class-identifier strings.  Class ids are assigned in order of first
    appearance.
    """

    vectors: np.ndarray
    labels: tuple
    label_index: dict = field(default_factory=dict)

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        if vectors.ndim != 2:
            raise DimensionMismatch(f"feature matrix must be 2-D, got shape {vectors.shape}")
        if len(self.labels) != vectors.shape[0]:
            raise DimensionMismatch(
                f"{len(self.labels)} labels for {vectors.shape[0]} feature rows"
            )
        vectors.setflags(write=False)
        labels = tuple(str(lab) for lab in self.labels)
        index = dict(self.label_index)
        for lab in labels:
            if lab not in index:
                index[lab] = len(index)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_index", index)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.label_index)

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([self.label_index[lab] for lab in self.labels], dtype=np.int64)

    @property
    def class_labels(self) -> list:
        """Labels ordered by class id."""
        return sorted(self.label_index, key=self.label_index.__getitem__)

    @property
    def min_entry(self) -> float:
        return float(self.vectors.min()) if self.vectors.size else 0.0

    def __len__(self):
        return self.vectors.shape[0]

    def rows_of(self, label) -> np.ndarray:
        """Row indices (file order) belonging to ``label``."""
        return np.flatnonzero(np.array(self.labels, dtype=object) == label)

    def class_rows(self) -> list:
        """Row-index arrays for every class, indexed by class id."""
        groups = [[] for _ in range(self.num_classes)]
        for i, lab in enumerate(self.labels):
            groups[self.label_index[lab]].append(i)
        return [np.array(g, dtype=np.int64) for g in groups]

    def take(self, rows) -> "FeatureTable":
        """Sub-table of the given rows; class ids are re-assigned for the subset."""
        rows = np.asarray(rows, dtype=np.int64)
        return FeatureTable(self.vectors[rows], tuple(self.labels[i] for i in rows))


def _open_text(path, mode):
    path = os.fspath(path)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8", newline="")
    return open(path, mode, encoding="utf-8", newline="")


def load_features(path) -> FeatureTable:
    """Read a ``label,f0,...,f{V-1}`` CSV (optionally gzipped)."""
    with _open_text(path, "r") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise EmptyFile(f"{os.fspath(path)}: no header line")
        if header[0].strip() != "label":
            raise ParseError("header must start with 'label'", line=1)
        dim = len(header) - 1
        expected = [f"f{i}" for i in range(dim)]
        if dim < 1 or [h.strip() for h in header[1:]] != expected:
            raise ParseError("header must be label,f0,f1,...,f{V-1}", line=1)

        labels = []
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if not record or (len(record) == 1 and not record[0].strip()):
                continue
            if len(record) != dim + 1:
                raise ParseError(f"expected {dim + 1} fields, found {len(record)}", line=lineno)
            try:
                vec = np.array([float(v) for v in record[1:]], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not np.all(np.isfinite(vec)):
                raise ParseError("non-finite feature value", line=lineno)
            labels.append(record[0])
            rows.append(vec)
    if not rows:
        raise EmptyFile(f"{os.fspath(path)}: no data rows")
    return FeatureTable(np.vstack(rows), tuple(labels))


def save_features(table: FeatureTable, path) -> None:
    with _open_text(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{i}" for i in range(table.dim)])
        for lab, vec in zip(table.labels, table.vectors):
            writer.writerow([lab] + [repr(float(v)) for v in vec])


@dataclass(frozen=True)
class ClassStats:
    class_id: int
    label: str
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def base_statistics(table: FeatureTable, dtype=np.float64) -> list:
    """Per-class sample mean and unbiased (``J_b - 1``) covariance."""
    stats = []
    for label, rows in zip(table.class_labels, table.class_rows()):
        if rows.size < 2:
            raise CovarianceUndefined(label)
        x = table.vectors[rows]
        mean = x.mean(axis=0)
        centered = x - mean
        cov = centered.T @ centered / (rows.size - 1)
        # symmetrize away rounding from the matmul
        cov = 0.5 * (cov + cov.T)
        stats.append(
            ClassStats(
                class_id=table.label_index[label],
                label=label,
                mean=mean.astype(dtype),
                cov=cov.astype(dtype),
                count=int(rows.size),
            )
        )
    return stats


def tukey_transform(x, lam: float) -> np.ndarray:
    """Elementwise ``x**lam`` (``log x`` when ``lam == 0``)."""
    x = np.asarray(x, dtype=np.float64)
    if lam == 0:
        if np.any(x <= 0):
            raise LogOfNonPositive("log transform needs strictly positive features")
        return np.log(x)
    if np.any(x < 0):
        raise NegativeInput(f"power transform with lambda={lam} needs nonnegative features")
    if lam == 1:
        return x.copy()
    return np.power(x, lam)


def save_stats(stats, path) -> None:
    dims = {s.dim for s in stats}
    if len(dims) > 1:
        raise SchemaMismatch(f"mixed dimensions in stats: {sorted(dims)}")
    payload = {
        "dim": dims.pop() if dims else 0,
        "classes": [
            {
                "label": s.label,
                "count": s.count,
                "mean": [float(v) for v in s.mean],
                "cov_rows": [[float(v) for v in row] for row in s.cov],
            }
            for s in stats
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_stats(path, dtype=np.float64) -> list:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaMismatch(f"{os.fspath(path)}: not valid JSON ({exc})") from None
    if not isinstance(payload, dict) or "dim" not in payload or "classes" not in payload:
        raise SchemaMismatch(f"{os.fspath(path)}: expected keys 'dim' and 'classes'")
    dim = payload["dim"]
    stats = []
    for cid, entry in enumerate(payload["classes"]):
        try:
            mean = np.array(entry["mean"], dtype=dtype)
            cov = np.array(entry["cov_rows"], dtype=dtype)
            label, count = str(entry["label"]), int(entry["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"class entry {cid}: {exc}") from None
        if mean.shape != (dim,) or cov.shape != (dim, dim):
            raise SchemaMismatch(
                f"class {label!r}: mean {mean.shape} / cov {cov.shape} do not match dim={dim}"
            )
        stats.append(ClassStats(cid, label, mean, cov, count))
    return stats


def check_stats_dim(stats, dim: int) -> None:
    """Raise :class:`SchemaMismatch` if ``stats`` were computed at another dimension."""
    for s in stats:
        if s.dim != dim:
            raise SchemaMismatch(f"stats for {s.label!r} have dim {s.dim}, features have {dim}")
