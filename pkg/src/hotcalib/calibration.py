"""Hierarchical-OT distribution calibration.

Per episode:

1. every base class ``b`` (a weighted cloud of samples) is matched to the
   support set by an entropic OT problem with cosine-distance cost; the
   realized transport cost becomes ``C[b, n]``;
2. a second entropic OT problem between uniform base classes and uniform
   support samples, using ``C``, yields the plan ``T``;
3. column ``n`` of ``T``, rescaled to sum to one, mixes the base means and
   covariances into a Gaussian for support sample ``n``;
4. features are drawn from those Gaussians.

The Free-Lunch top-k calibration and the fixed-cost ablation variants live
here too, since they share the same inputs and outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .base_weights import SampleWeights
from .errors import CovarianceNotPD, DimensionMismatch, InputError, ZeroVector
from .features_io import ClassStats, FeatureTable, tukey_transform
from .ot_core import TransportPlan, sinkhorn

log = logging.getLogger(__name__)

CALIBRATION_MODES = ("paper", "convex")
VARIANT_KINDS = ("euclid_mean", "cosine_mean", "euclid_weighted", "cosine_weighted")


@dataclass(frozen=True)
class EpisodeSupport:
    """TLPT-transformed support rows in class-major order."""

    n_way: int
    k_shot: int
    transformed: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.transformed.shape[0] != self.n_way * self.k_shot:
            raise DimensionMismatch(
                f"{self.transformed.shape[0]} rows for a {self.n_way}-way {self.k_shot}-shot support"
            )
        if self.labels.shape != (self.transformed.shape[0],):
            raise DimensionMismatch("one label per support row required")

    @property
    def size(self) -> int:
        return self.transformed.shape[0]

    @property
    def dim(self) -> int:
        return self.transformed.shape[1]

    @property
    def marginal(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.size)


@dataclass(frozen=True)
class StatsArrays:
    """Base statistics stacked for vectorized mixing: ``means (B, V)``, ``covs (B, V, V)``."""

    labels: tuple
    means: np.ndarray
    covs: np.ndarray

    @classmethod
    def from_stats(cls, stats) -> "StatsArrays":
        if isinstance(stats, StatsArrays):
            return stats
        stats = list(stats)
        if not stats:
            raise InputError("no base statistics")
        return cls(
            tuple(s.label for s in stats),
            np.stack([np.asarray(s.mean, dtype=np.float64) for s in stats]),
            np.stack([np.asarray(s.cov) for s in stats]),
        )

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def reorder(self, labels) -> "StatsArrays":
        pos = {lab: i for i, lab in enumerate(self.labels)}
        try:
            idx = np.array([pos[lab] for lab in labels])
        except KeyError as exc:
            raise DimensionMismatch(f"no statistics for base class {exc.args[0]!r}") from None
        return StatsArrays(tuple(labels), self.means[idx], self.covs[idx])


@dataclass(frozen=True)
class AdaptiveCost:
    values: np.ndarray  # (B, N*K)
    per_class_plans: tuple | None = None
    zero_vectors: int = 0
    converged_all: bool = True
    mask: np.ndarray | None = None  # True where a cell was kept by top_k_mask


@dataclass(frozen=True)
class CalibratedGaussian:
    mean: np.ndarray
    cov: np.ndarray
    source_support_index: int


@dataclass(frozen=True)
class GeneratedFeatures:
    per_class: dict = field(default_factory=dict)

    def stacked(self):
        """``(features, labels)`` with classes in ascending label order."""
        keys = sorted(self.per_class)
        if not keys:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        xs = [self.per_class[k] for k in keys]
        ys = [np.full(self.per_class[k].shape[0], k, dtype=np.int64) for k in keys]
        return np.vstack(xs), np.concatenate(ys)


def build_support(raw_support: FeatureTable, lam: float) -> EpisodeSupport:
    """TLPT-transform a support slice; rows are regrouped class-major.

    Episode class ids follow the slice's own label order (first appearance).
    """
    rows = raw_support.class_rows()
    sizes = {r.size for r in rows}
    if len(sizes) != 1:
        raise DimensionMismatch(f"support classes have unequal sizes {sorted(sizes)}")
    order = np.concatenate(rows)
    labels = np.repeat(np.arange(len(rows)), sizes.pop())
    transformed = tukey_transform(raw_support.vectors[order], lam)
    return EpisodeSupport(len(rows), len(order) // len(rows), transformed, labels)


def cosine_distance(x, y):
    """``1 - cos`` between the rows of ``x`` and ``y``.

    A zero-norm row has cosine 0 with everything (distance 1).  Returns the
    distance matrix and the number of zero-norm rows seen.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    nx = np.linalg.norm(x, axis=1)
    ny = np.linalg.norm(y, axis=1)
    zeros = int(np.sum(nx == 0) + np.sum(ny == 0))
    xs = np.divide(x, nx[:, None], out=np.zeros_like(x), where=nx[:, None] > 0)
    ys = np.divide(y, ny[:, None], out=np.zeros_like(y), where=ny[:, None] > 0)
    dist = np.clip(1.0 - xs @ ys.T, 0.0, 2.0)
    return dist, zeros


def low_level_cost(
    base: FeatureTable,
    weights: SampleWeights,
    support: EpisodeSupport,
    epsilon: float = 0.01,
    max_iter: int = 200,
    tol: float = 1e-6,
    keep_plans: bool = False,
) -> AdaptiveCost:
    """Adaptive cost ``C[b, n] = sum_j D[j, n] * M[j, n]`` from per-class OT.

    Row order follows ``weights.labels``.  Each ``M`` couples the class's
    sample weights with the uniform support marginal, so every column of
    ``M`` carries mass ``1 / (N*K)`` and ``C`` inherits that scale.
    """
    if base.dim != support.dim:
        raise DimensionMismatch(f"base dim {base.dim} vs support dim {support.dim}")
    q = support.marginal
    costs = np.empty((len(weights), support.size))
    plans = []
    zeros = 0
    converged = True
    for b, (idx, p) in enumerate(zip(weights.indices, weights.weights)):
        if idx.size == 0:
            raise InputError(f"base class {weights.labels[b]!r} has no samples")
        dist, z = cosine_distance(base.vectors[idx], support.transformed)
        zeros += z
        plan = sinkhorn(p, q, dist, epsilon, max_iter=max_iter, tol=tol)
        converged &= plan.converged
        costs[b] = np.sum(dist * plan.values, axis=0)
        if keep_plans:
            plans.append(plan.values)
    if zeros:
        log.warning("cosine distance met %d zero-norm vectors (treated as distance 1)", zeros)
    return AdaptiveCost(costs, tuple(plans) if keep_plans else None, zeros, converged)


def high_level_plan(
    cost: AdaptiveCost,
    epsilon: float = 0.01,
    max_iter: int = 200,
    tol: float = 1e-6,
    rescale: bool = False,
) -> TransportPlan:
    """Entropic plan between uniform base classes (rows) and uniform support samples."""
    values = np.asarray(cost.values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InputError("adaptive cost has non-finite entries")
    if rescale:
        top = values.max()
        if top > 0:
            values = values / top
    n_base, n_support = values.shape
    return sinkhorn(
        np.full(n_base, 1.0 / n_base),
        np.full(n_support, 1.0 / n_support),
        values,
        epsilon,
        max_iter=max_iter,
        tol=tol,
    )


def mix_statistics(weights, stats: StatsArrays):
    """Convex mixtures of base statistics; ``weights`` is ``(B, n)`` with unit columns."""
    means = weights.T @ stats.means
    covs = np.tensordot(weights.T, stats.covs, axes=(1, 0))
    return means, covs


def calibrate(support: EpisodeSupport, plan, stats, alpha: float = 0.21, mode: str = "convex"):
    """Calibrated Gaussian per support sample from a transport plan.

    ``mode="paper"`` divides by ``B + 1`` and ``B``; ``mode="convex"`` by 2 and 1.
    ``alpha`` is added to every covariance entry.
    """
    if mode not in CALIBRATION_MODES:
        raise InputError(f"calibration mode must be one of {CALIBRATION_MODES}, got {mode!r}")
    stats = StatsArrays.from_stats(stats)
    values = plan.values if isinstance(plan, TransportPlan) else np.asarray(plan)
    n_base = stats.num_classes
    if values.shape != (n_base, support.size):
        raise DimensionMismatch(f"plan shape {values.shape}, expected ({n_base}, {support.size})")
    if stats.dim != support.dim:
        raise DimensionMismatch(f"stats dim {stats.dim} vs support dim {support.dim}")

    mixed_means, mixed_covs = mix_statistics(support.size * values, stats)
    if mode == "paper":
        mean_div, cov_div = n_base + 1.0, float(n_base)
    else:
        mean_div, cov_div = 2.0, 1.0
    out = []
    for n in range(support.size):
        mean = (mixed_means[n] + support.transformed[n]) / mean_div
        cov = mixed_covs[n] / cov_div + alpha
        out.append(CalibratedGaussian(mean, 0.5 * (cov + cov.T), n))
    return out


def build_calibrated_sets(calibrated, labels) -> dict:
    labels = np.asarray(labels)
    if len(calibrated) != labels.size:
        raise DimensionMismatch(f"{len(calibrated)} calibrated Gaussians for {labels.size} labels")
    sets = {}
    for g, y in zip(calibrated, labels):
        sets.setdefault(int(y), []).append(g)
    return sets


def cholesky_with_jitter(cov: np.ndarray, attempts: int = 3) -> np.ndarray:
    """Cholesky factor, adding ``eta * I`` (``eta = 1e-6 * trace / V``, x10 per retry) on failure."""
    cov = 0.5 * (cov + cov.T)
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    dim = cov.shape[0]
    eta = 1e-6 * float(np.trace(cov)) / dim
    if eta > 0:
        eye = np.eye(dim)
        for _ in range(attempts):
            try:
                return np.linalg.cholesky(cov + eta * eye)
            except np.linalg.LinAlgError:
                eta *= 10.0
    raise CovarianceNotPD(f"covariance not positive definite after {attempts} jitter attempts")


def split_counts(total: int, parts: int) -> list:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def sample_features(sets: dict, total_per_class: int, rng: np.random.Generator) -> GeneratedFeatures:
    """Draw ``total_per_class`` features per class, split evenly over its Gaussians."""
    out = {}
    for y in sorted(sets):
        gaussians = sets[y]
        chunks = []
        for g, count in zip(gaussians, split_counts(total_per_class, len(gaussians))):
            if count == 0:
                continue
            factor = cholesky_with_jitter(np.asarray(g.cov, dtype=np.float64))
            z = rng.standard_normal((count, g.mean.shape[0]))
            chunks.append(g.mean + z @ factor.T)
        dim = gaussians[0].mean.shape[0]
        out[y] = np.vstack(chunks) if chunks else np.zeros((0, dim))
    return GeneratedFeatures(out)


def squared_distances(points, centers) -> np.ndarray:
    """``(len(points), len(centers))`` squared Euclidean distances, computed by differences."""
    diff = np.asarray(points)[:, None, :] - np.asarray(centers)[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def free_lunch_select(support: EpisodeSupport, means, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest base means per support row; ties to the lower index."""
    means = np.asarray(means)
    if not 1 <= k <= means.shape[0]:
        raise InputError(f"k must lie in [1, {means.shape[0]}], got {k}")
    if means.shape[1] != support.dim:
        raise DimensionMismatch(f"means dim {means.shape[1]} vs support dim {support.dim}")
    dist = squared_distances(support.transformed, means)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def free_lunch_calibrate(support: EpisodeSupport, stats, k: int = 2, alpha: float = 0.21):
    """Top-k equal-weight calibration: mean over ``k + 1``, covariance over ``k``."""
    stats = StatsArrays.from_stats(stats)
    chosen = free_lunch_select(support, stats.means, k)
    out = []
    for n, idx in enumerate(chosen):
        mean = (stats.means[idx].sum(axis=0) + support.transformed[n]) / (k + 1)
        cov = stats.covs[idx].sum(axis=0) / k + alpha
        out.append(CalibratedGaussian(mean, cov, n))
    return out


def weighted_means(base: FeatureTable, weights: SampleWeights) -> np.ndarray:
    return np.stack([w @ base.vectors[idx] for idx, w in zip(weights.indices, weights.weights)])


def variant_cost(support: EpisodeSupport, stats, kind: str, weights=None, base=None) -> AdaptiveCost:
    """Closed-form high-level costs for the ablation variants.

    ``*_mean`` kinds use the plain base means, ``*_weighted`` kinds the
    sample-weighted means (``weights`` and ``base`` required).
    """
    if kind not in VARIANT_KINDS:
        raise InputError(f"variant kind must be one of {VARIANT_KINDS}, got {kind!r}")
    if kind.endswith("_weighted"):
        if weights is None or base is None:
            raise InputError(f"{kind} needs sample weights and the base feature table")
        centers = weighted_means(base, weights)
    else:
        centers = StatsArrays.from_stats(stats).means
    if centers.shape[1] != support.dim:
        raise DimensionMismatch(f"base dim {centers.shape[1]} vs support dim {support.dim}")
    if kind.startswith("euclid"):
        values = squared_distances(centers, support.transformed)
    else:
        if np.any(np.linalg.norm(centers, axis=1) == 0):
            raise ZeroVector("cosine cost with a zero-norm base mean")
        values, zeros = cosine_distance(centers, support.transformed)
        return AdaptiveCost(values, zero_vectors=zeros)
    return AdaptiveCost(values)


def top_k_mask(cost: AdaptiveCost, k: int) -> AdaptiveCost:
    """Keep the ``k`` cheapest base classes per column; push the rest to a sentinel cost."""
    values = np.asarray(cost.values, dtype=np.float64)
    n_base = values.shape[0]
    if not 1 <= k <= n_base:
        raise InputError(f"top-k must lie in [1, {n_base}], got {k}")
    if k == n_base:
        return AdaptiveCost(values.copy(), cost.per_class_plans, cost.zero_vectors,
                            cost.converged_all, np.ones_like(values, dtype=bool))
    top, low = float(values.max()), float(values.min())
    span = top - low
    if span == 0:
        span = max(abs(top), 1.0)
    sentinel = top + 10.0 * span
    keep = np.zeros_like(values, dtype=bool)
    order = np.argsort(values, axis=0, kind="stable")[:k]
    keep[order, np.arange(values.shape[1])[None, :]] = True
    masked = np.where(keep, values, sentinel)
    return AdaptiveCost(masked, cost.per_class_plans, cost.zero_vectors, cost.converged_all, keep)
