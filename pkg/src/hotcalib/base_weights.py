"""Per-sample importance weights inside each base class.

A linear classifier ``phi`` is fit on the raw base features.  For every base
class its samples are scored by the probability ``phi`` assigns to that class,
and the scores are softmax-normalized across the class's samples.  The result
turns each base class into a weighted empirical distribution over its samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .errors import DimensionMismatch, InsufficientClasses, SchemaMismatch
from .features_io import FeatureTable
from .linear_classifier import LinearModel, LRConfig, predict_proba, train_lr


@dataclass(frozen=True)
class SampleWeights:
    """``indices[b]`` are row numbers in the base table, ``weights[b]`` their masses."""

    labels: tuple
    indices: tuple
    weights: tuple

    def __len__(self):
        return len(self.weights)

    def to_dict(self) -> dict:
        return {
            "classes": [
                {"label": lab, "indices": [int(i) for i in idx], "weights": [float(w) for w in wts]}
                for lab, idx, wts in zip(self.labels, self.indices, self.weights)
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleWeights":
        try:
            entries = d["classes"]
            labels = tuple(str(e["label"]) for e in entries)
            indices = tuple(np.array(e["indices"], dtype=np.int64) for e in entries)
            weights = tuple(np.array(e["weights"], dtype=np.float64) for e in entries)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatch(f"bad sample-weights record: {exc}") from None
        for lab, idx, w in zip(labels, indices, weights):
            if idx.shape != w.shape or w.ndim != 1:
                raise SchemaMismatch(f"class {lab!r}: {idx.size} indices vs {w.size} weights")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise SchemaMismatch(f"class {lab!r}: weights are not on the simplex")
        return cls(labels, indices, weights)

    @classmethod
    def uniform(cls, base: FeatureTable) -> "SampleWeights":
        rows = base.class_rows()
        return cls(
            tuple(base.class_labels),
            tuple(rows),
            tuple(np.full(r.size, 1.0 / r.size) for r in rows),
        )


def train_phi(base: FeatureTable, cfg: LRConfig = LRConfig()) -> LinearModel:
    if base.num_classes < 2:
        raise InsufficientClasses(f"phi needs at least 2 base classes, got {base.num_classes}")
    return train_lr(base.vectors, base.class_ids, cfg)


def own_class_scores(phi: LinearModel, base: FeatureTable) -> np.ndarray:
    """Probability ``phi`` assigns to each row's own class."""
    if phi.dim != base.dim:
        raise DimensionMismatch(f"phi trained on dim {phi.dim}, base features have dim {base.dim}")
    probs = predict_proba(phi, base.vectors)
    column = {cid: k for k, cid in enumerate(phi.class_ids)}
    try:
        cols = np.array([column[c] for c in base.class_ids])
    except KeyError as exc:
        raise DimensionMismatch(f"phi has no output for base class id {exc.args[0]}") from None
    return probs[np.arange(len(base)), cols]


def weights_from_scores(scores, base: FeatureTable) -> SampleWeights:
    """Softmax of per-row scores taken separately within each class."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(base),):
        raise DimensionMismatch(f"{scores.shape} scores for {len(base)} base rows")
    rows = base.class_rows()
    return SampleWeights(
        tuple(base.class_labels),
        tuple(rows),
        tuple(softmax(scores[r]) for r in rows),
    )


def compute_sample_weights(phi: LinearModel, base: FeatureTable) -> SampleWeights:
    return weights_from_scores(own_class_scores(phi, base), base)


def save_phi(phi: LinearModel, weights: SampleWeights, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"phi": phi.to_dict(), "sample_weights": weights.to_dict()}, fh)
        fh.write("\n")


def load_phi(path):
    """Return ``(phi, sample_weights)`` from a cache written by :func:`save_phi`."""
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaMismatch(f"phi cache is not valid JSON: {exc}") from None
    if not isinstance(payload, dict) or "phi" not in payload or "sample_weights" not in payload:
        raise SchemaMismatch("phi cache must hold 'phi' and 'sample_weights'")
    return LinearModel.from_dict(payload["phi"]), SampleWeights.from_dict(payload["sample_weights"])
