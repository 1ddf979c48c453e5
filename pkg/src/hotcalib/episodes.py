"""N-way K-shot episode sampling, per-task pipeline, and aggregate evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .base_weights import SampleWeights
from .calibration import (
    CALIBRATION_MODES,
    VARIANT_KINDS,
    StatsArrays,
    build_calibrated_sets,
    build_support,
    calibrate,
    free_lunch_calibrate,
    high_level_plan,
    low_level_cost,
    sample_features,
    top_k_mask,
    variant_cost,
)
from .errors import (
    DimensionMismatch,
    HotCalibError,
    InputError,
    NotEnoughClasses,
    NotEnoughSamples,
    SchemaMismatch,
)
from .features_io import FeatureTable, tukey_transform
from .linear_classifier import LRConfig, predict, train_lr

log = logging.getLogger(__name__)

METHODS = ("hot", "free_lunch", "support_only") + tuple(f"variant:{k}" for k in VARIANT_KINDS)


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    seed: int = 0
    task_index: int = 0

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1:
            raise InputError(f"invalid episode shape N={self.n_way} K={self.k_shot} q={self.n_query}")


@dataclass(frozen=True)
class HyperParams:
    """Per-episode pipeline settings.

    ``lam`` and ``calibration_mode`` have no defaults on purpose: the power
    transform is dataset-specific and the two calibration modes differ a lot.
    """

    lam: float
    calibration_mode: str
    alpha: float = 0.21
    epsilon: float = 0.01
    generated: int = 750
    sinkhorn_max_iter: int = 200
    sinkhorn_tol: float = 1e-6
    rescale_cost: bool = False
    top_k: int | None = None
    free_lunch_k: int = 2
    theta: LRConfig = field(default_factory=LRConfig)

    def __post_init__(self):
        if self.calibration_mode not in CALIBRATION_MODES:
            raise InputError(f"calibration_mode must be one of {CALIBRATION_MODES}")
        if self.epsilon <= 0 or self.sinkhorn_tol <= 0 or self.sinkhorn_max_iter < 1:
            raise InputError("epsilon, sinkhorn_tol and sinkhorn_max_iter must be positive")
        if self.generated < 0:
            raise InputError("generated must be nonnegative")
        if self.top_k is not None and self.top_k < 1:
            raise InputError("top_k must be at least 1")


@dataclass(frozen=True)
class BaseContext:
    """Everything an episode reads from the base side; shared read-only across tasks."""

    base: FeatureTable
    stats: StatsArrays
    weights: SampleWeights

    @classmethod
    def build(cls, base: FeatureTable, stats, weights: SampleWeights) -> "BaseContext":
        stats = StatsArrays.from_stats(stats).reorder(weights.labels)
        if stats.dim != base.dim:
            raise SchemaMismatch(f"stats dim {stats.dim} vs base features dim {base.dim}")
        return cls(base, stats, weights)


@dataclass(frozen=True)
class EpisodeResult:
    task_index: int
    accuracy: float
    sinkhorn_converged_all: bool = True
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95_halfwidth: float
    num_tasks: int
    per_task: list
    config: dict = field(default_factory=dict)

    @property
    def num_failed(self) -> int:
        return sum(1 for r in self.per_task if not r.ok)

    @property
    def num_unconverged(self) -> int:
        return sum(1 for r in self.per_task if r.ok and not r.sinkhorn_converged_all)

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "ci95_halfwidth": self.ci95_halfwidth,
            "num_tasks": self.num_tasks,
            "num_failed": self.num_failed,
            "num_sinkhorn_unconverged": self.num_unconverged,
            "config": self.config,
            "per_task": [asdict(r) for r in self.per_task],
        }

    def write_per_task_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("task_index,accuracy\n")
            for r in self.per_task:
                fh.write(f"{r.task_index},{r.accuracy!r}\n")


def task_rng(seed: int, task_index: int) -> np.random.Generator:
    """Independent PCG64 stream for one task (SeedSequence spawn-key derivation)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(task_index,))))


def sample_episode(novel: FeatureTable, spec: EpisodeSpec, rng: np.random.Generator | None = None):
    """Pick ``N`` classes, then ``K`` support and ``q`` query rows per class.

    Without an explicit ``rng`` the stream is derived from ``(spec.seed, spec.task_index)``.
    Both returned tables are class-major.
    """
    if rng is None:
        rng = task_rng(spec.seed, spec.task_index)
    if novel.num_classes < spec.n_way:
        raise NotEnoughClasses(f"{novel.num_classes} novel classes, episode needs {spec.n_way}")
    need = spec.k_shot + spec.n_query
    rows = novel.class_rows()
    labels = novel.class_labels
    chosen = np.sort(rng.choice(novel.num_classes, size=spec.n_way, replace=False))
    support, query = [], []
    for c in chosen:
        if rows[c].size < need:
            raise NotEnoughSamples(labels[c], rows[c].size, need)
        picked = rng.permutation(rows[c])[:need]
        support.append(picked[: spec.k_shot])
        query.append(picked[spec.k_shot:])
    return novel.take(np.concatenate(support)), novel.take(np.concatenate(query))


def parse_method(method: str):
    if method in ("hot", "free_lunch", "support_only"):
        return method, None
    if method.startswith("variant:") and method.split(":", 1)[1] in VARIANT_KINDS:
        return "variant", method.split(":", 1)[1]
    raise InputError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def episode_plan(support, ctx: BaseContext, hyper: HyperParams, kind: str | None = None,
                 keep_plans: bool = False):
    """Cost and high-level plan for one support set (``kind=None`` is full H-OT)."""
    if kind is None:
        cost = low_level_cost(ctx.base, ctx.weights, support, hyper.epsilon,
                              hyper.sinkhorn_max_iter, hyper.sinkhorn_tol, keep_plans=keep_plans)
    else:
        cost = variant_cost(support, ctx.stats, kind, weights=ctx.weights, base=ctx.base)
    if hyper.top_k is not None and hyper.top_k < cost.values.shape[0]:
        cost = top_k_mask(cost, hyper.top_k)
    plan = high_level_plan(cost, hyper.epsilon, hyper.sinkhorn_max_iter, hyper.sinkhorn_tol,
                           rescale=hyper.rescale_cost)
    return cost, plan


def run_episode(support_table: FeatureTable, query_table: FeatureTable, ctx: BaseContext,
                hyper: HyperParams, method: str, rng: np.random.Generator,
                task_index: int = 0) -> EpisodeResult:
    family, kind = parse_method(method)
    support = build_support(support_table, hyper.lam)
    episode_ids = {lab: i for i, lab in enumerate(support_table.class_labels)}
    try:
        query_y = np.array([episode_ids[lab] for lab in query_table.labels])
    except KeyError as exc:
        raise DimensionMismatch(f"query class {exc.args[0]!r} absent from support") from None
    query_x = tukey_transform(query_table.vectors, hyper.lam)

    converged = True
    if family == "support_only":
        calibrated = []
    elif family == "free_lunch":
        calibrated = free_lunch_calibrate(support, ctx.stats, hyper.free_lunch_k, hyper.alpha)
    else:
        cost, plan = episode_plan(support, ctx, hyper, kind)
        converged = cost.converged_all and plan.converged
        calibrated = calibrate(support, plan, ctx.stats, hyper.alpha, hyper.calibration_mode)

    train_x, train_y = support.transformed, support.labels
    if calibrated and hyper.generated > 0:
        sets = build_calibrated_sets(calibrated, support.labels)
        gen_x, gen_y = sample_features(sets, hyper.generated, rng).stacked()
        train_x = np.vstack([train_x, gen_x])
        train_y = np.concatenate([train_y, gen_y])
    theta = train_lr(train_x, train_y, hyper.theta)
    predicted, _ = predict(theta, query_x)
    accuracy = float(np.sum(predicted == query_y)) / query_y.size
    return EpisodeResult(task_index, accuracy, bool(converged))


def ci95_halfwidth(accuracies) -> float:
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size < 2:
        return 0.0
    return float(1.96 * acc.std(ddof=1) / math.sqrt(acc.size))


def _one_task(ctx, novel, spec, hyper, method, task_index):
    rng = task_rng(spec.seed, task_index)
    try:
        support, query = sample_episode(novel, spec, rng)
        return run_episode(support, query, ctx, hyper, method, rng, task_index)
    except HotCalibError as exc:
        log.warning("task %d failed: %s", task_index, exc)
        return EpisodeResult(task_index, float("nan"), False, f"{type(exc).__name__}: {exc}")


def evaluate(ctx: BaseContext, novel: FeatureTable, spec: EpisodeSpec, num_tasks: int,
             hyper: HyperParams, method: str, threads: int = 1, config: dict | None = None,
             progress_every: int = 0) -> EvalReport:
    """Run ``num_tasks`` episodes; task ``t`` draws from the stream of ``(spec.seed, t)``.

    Results are gathered by task index, so the report does not depend on
    ``threads``.  Failed tasks are recorded and excluded from the mean.
    """
    parse_method(method)
    if num_tasks < 1:
        raise InputError("num_tasks must be at least 1")
    if novel.dim != ctx.base.dim:
        raise DimensionMismatch(f"novel dim {novel.dim} vs base dim {ctx.base.dim}")

    def job(t):
        result = _one_task(ctx, novel, spec, hyper, method, t)
        if progress_every and (t + 1) % progress_every == 0:
            log.info("task %d/%d done", t + 1, num_tasks)
        return result

    if threads <= 1:
        results = [job(t) for t in range(num_tasks)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(num_tasks)))

    acc = np.array([r.accuracy for r in results if r.ok])
    mean = float(acc.mean()) if acc.size else float("nan")
    return EvalReport(mean, ci95_halfwidth(acc), num_tasks, results, dict(config or {}))
