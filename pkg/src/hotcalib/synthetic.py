"""Synthetic instances for desk-scale checks.

``make_toy`` builds novel samples as known convex combinations of base means,
so a learned base-class weighting can be scored against the truth.
``make_gaussian_world`` builds full labeled base/novel feature tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InputError
from .features_io import FeatureTable


@dataclass(frozen=True)
class ToyInstance:
    U: np.ndarray       # (B, V) base means
    W_true: np.ndarray  # (N, B) simplex rows
    X: np.ndarray       # (N, V) = W_true @ U


def gamma_simplex_rows(n: int, b: int, rng: np.random.Generator, shape: float = 0.8,
                       scale: float = 1.0) -> np.ndarray:
    w = rng.gamma(shape, scale, size=(n, b))
    sums = w.sum(axis=1, keepdims=True)
    # all-zero draws are possible in principle at small shape; fall back to one-hot
    zero = sums[:, 0] == 0
    if np.any(zero):
        w[zero, rng.integers(b, size=int(zero.sum()))] = 1.0
        sums = w.sum(axis=1, keepdims=True)
    return w / sums


def make_toy(B: int, V: int, N: int, rng: np.random.Generator, base_means=None) -> ToyInstance:
    """Toy weight-recovery instance.

    Base means are i.i.d. standard normal unless ``base_means`` (``B x V``, e.g.
    real class means) is given.  Weight rows are gamma(0.8, 1) draws,
    L1-normalized.
    """
    if B < 2 or V < 1 or N < 1:
        raise InputError(f"make_toy needs B>=2, V>=1, N>=1 (got B={B}, V={V}, N={N})")
    if base_means is None:
        U = rng.standard_normal((B, V))
    else:
        U = np.array(base_means, dtype=np.float64)
        if U.shape != (B, V):
            raise DimensionMismatch(f"base_means shape {U.shape}, expected ({B}, {V})")
    W = gamma_simplex_rows(N, B, rng)
    return ToyInstance(U, W, W @ U)


def _cosine_rows(x, y):
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    dots = np.sum(x * y, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where((nx > 0) & (ny > 0), dots / (nx * ny), 0.0)
    return cos


def _top2(rows):
    return np.argsort(-rows, axis=1, kind="stable")[:, :2]


def recovery_score(learned, truth) -> dict:
    """Per-row cosine to the truth and whether truth's top-2 classes are learned's top-2."""
    learned = np.asarray(learned, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if learned.shape != truth.shape:
        raise DimensionMismatch(f"learned {learned.shape} vs truth {truth.shape}")
    if np.any(learned < 0):
        raise InputError("learned weights must be nonnegative")
    cos = _cosine_rows(learned, truth)
    hits = np.array([set(t) <= set(l) for t, l in zip(_top2(truth), _top2(learned))], dtype=float)
    return {
        "cosine": cos,
        "top2_hit": hits,
        "mean_cosine": float(cos.mean()),
        "top2_hit_rate": float(hits.mean()),
    }


def _separated_means(count, V, separation, sigma, rng):
    """Half-normal (ReLU-like, nonnegative) means, scaled so the closest pair
    sits exactly ``separation * sigma`` apart."""
    z = np.abs(rng.standard_normal((count, V)))
    if count < 2 or separation <= 0:
        return np.zeros_like(z) if separation <= 0 else z
    diff = z[:, None, :] - z[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    closest = dist[np.triu_indices(count, 1)].min()
    return z * (separation * sigma / closest)


def sparse_mixing(n: int, b: int, parents: int, rng: np.random.Generator) -> np.ndarray:
    """Convex rows supported on ``parents`` random base classes, flat-Dirichlet weights."""
    if not 1 <= parents <= b:
        raise InputError(f"parents must lie in [1, {b}], got {parents}")
    mix = np.zeros((n, b))
    for i in range(n):
        mix[i, rng.choice(b, size=parents, replace=False)] = rng.dirichlet(np.ones(parents))
    return mix


def make_gaussian_world(B: int, N_novel: int, V: int, samples_per_class: int,
                        class_separation: float, rng: np.random.Generator,
                        mixing=None, sigma: float = 1.0, novel_samples_per_class=None):
    """Base and novel feature tables drawn from isotropic Gaussians.

    Base means have minimum pairwise distance ``class_separation * sigma``.
    Novel means are ``mixing @ base_means`` when ``mixing`` (``N_novel x B``,
    convex rows) is given, otherwise fresh means built the same way.  Samples
    are clamped at zero so power transforms apply.
    """
    if min(B, N_novel, V, samples_per_class) < 1:
        raise InputError("counts must be positive")
    base_means = _separated_means(B, V, class_separation, sigma, rng)
    if mixing is not None:
        mixing = np.asarray(mixing, dtype=np.float64)
        if mixing.shape != (N_novel, B):
            raise DimensionMismatch(f"mixing shape {mixing.shape}, expected ({N_novel}, {B})")
        if np.any(mixing < 0) or not np.allclose(mixing.sum(axis=1), 1.0, atol=1e-9):
            raise InputError("mixing rows must be convex weights")
        novel_means = mixing @ base_means
    else:
        novel_means = _separated_means(N_novel, V, class_separation, sigma, rng)
    n_novel = samples_per_class if novel_samples_per_class is None else novel_samples_per_class

    def table(means, count, prefix):
        x = means[:, None, :] + sigma * rng.standard_normal((means.shape[0], count, means.shape[1]))
        x = np.maximum(x.reshape(-1, means.shape[1]), 0.0)
        labels = tuple(f"{prefix}{i}" for i in range(means.shape[0]) for _ in range(count))
        return FeatureTable(x, labels)

    return table(base_means, samples_per_class, "base"), table(novel_means, n_novel, "novel")
