"""Command-line front end: ``hotcalib {stats,train-phi,eval,plan,toy}``.

Settings come from three layers, later ones winning: built-in defaults, an
optional JSON ``--config`` file (snake_case keys), and kebab-case flags.  The
effective configuration is embedded in every report.  Primary outputs are
byte-identical for identical inputs; wall-clock details go to a
``<output>.meta.json`` sidecar.

Exit codes: 0 success, 1 numerical failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import __version__
from .base_weights import compute_sample_weights, load_phi, own_class_scores, save_phi, train_phi
from .calibration import (
    CALIBRATION_MODES,
    EpisodeSupport,
    StatsArrays,
    build_support,
    free_lunch_select,
    high_level_plan,
    low_level_cost,
    variant_cost,
)
from .episodes import (
    METHODS,
    BaseContext,
    EpisodeSpec,
    HyperParams,
    episode_plan,
    evaluate,
    parse_method,
    sample_episode,
)
from .errors import HotCalibError, InputError, NumericalError, SchemaMismatch
from .features_io import (
    FeatureTable,
    base_statistics,
    check_stats_dim,
    load_features,
    load_stats,
    save_stats,
)
from .linear_classifier import LRConfig, predict
from .synthetic import make_toy, recovery_score

log = logging.getLogger("hotcalib")

EXIT_OK, EXIT_NUMERICAL, EXIT_INPUT = 0, 1, 2
THREADS_ENV = "HOTCALIB_THREADS"


@dataclass
class RunConfig:
    # paths
    base: str | None = None
    novel: str | None = None
    stats: str | None = None
    phi: str | None = None
    output: str | None = None
    per_task_csv: str | None = None
    # episode shape and evaluation
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    tasks: int = 10000
    seed: int = 0
    threads: int | None = None
    task_index: int = 0
    method: str = "hot"
    # pipeline
    lam: float | None = None
    calibration_mode: str | None = None
    alpha: float = 0.21
    epsilon: float = 0.01
    generated: int = 750
    sinkhorn_max_iter: int = 200
    sinkhorn_tol: float = 1e-6
    rescale_cost: bool = False
    top_k: int | None = None
    free_lunch_k: int = 2
    # classifiers (phi: base weighting, theta: episode classifier)
    phi_l2: float = 1.0
    theta_l2: float = 1.0
    lr_grad_tol: float = 1e-4
    lr_max_iter: int = 1000
    # caching and storage
    reuse: bool = False
    f32_stats: bool = False
    keep_plans: bool = True
    # toy weight-recovery experiment
    toy_base: int = 20
    toy_dim: int = 16
    toy_novel: int = 5
    toy_instances: int = 100
    toy_epsilon: float = 0.025
    toy_rescale: bool = True
    toy_sweep: tuple = (1.0, 0.3, 0.1, 0.05, 0.025, 0.01)
    toy_base_samples: int = 50
    toy_noise: float = 0.5
    progress_every: int = 0

    def validate(self) -> None:
        if min(self.n_way, self.k_shot, self.n_query, self.tasks) < 1 or self.n_way < 2:
            raise InputError("n-way must be >= 2 and k-shot, n-query, tasks >= 1")
        if self.calibration_mode is not None and self.calibration_mode not in CALIBRATION_MODES:
            raise InputError(f"calibration-mode must be one of {CALIBRATION_MODES}")
        if self.method not in METHODS:
            raise InputError(f"method must be one of {', '.join(METHODS)}")
        if self.alpha < 0 or self.epsilon <= 0 or self.sinkhorn_tol <= 0 or self.sinkhorn_max_iter < 1:
            raise InputError("alpha must be >= 0; epsilon, sinkhorn-tol, sinkhorn-max-iter > 0")
        if self.generated < 0 or self.free_lunch_k < 1:
            raise InputError("generated must be >= 0 and free-lunch-k >= 1")
        if self.top_k is not None and self.top_k < 1:
            raise InputError("top-k must be >= 1")
        if self.threads is not None and self.threads < 1:
            raise InputError("threads must be >= 1")
        if self.toy_base < 2 or self.toy_dim < 1 or self.toy_novel < 1 or self.toy_instances < 1:
            raise InputError("toy sizes must be positive (toy-base >= 2)")
        if self.toy_epsilon <= 0 or any(e <= 0 for e in self.toy_sweep):
            raise InputError("toy epsilons must be positive")

    def require(self, *names) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            flags = ", ".join("--" + n.replace("_", "-") for n in missing)
            raise InputError(f"missing required setting(s): {flags}")

    def hyper(self) -> HyperParams:
        return HyperParams(
            lam=self.lam,
            calibration_mode=self.calibration_mode,
            alpha=self.alpha,
            epsilon=self.epsilon,
            generated=self.generated,
            sinkhorn_max_iter=self.sinkhorn_max_iter,
            sinkhorn_tol=self.sinkhorn_tol,
            rescale_cost=self.rescale_cost,
            top_k=self.top_k,
            free_lunch_k=self.free_lunch_k,
            theta=LRConfig(self.theta_l2, self.lr_grad_tol, self.lr_max_iter, self.seed),
        )

    def phi_config(self) -> LRConfig:
        return LRConfig(self.phi_l2, self.lr_grad_tol, self.lr_max_iter, self.seed)

    def snapshot(self) -> dict:
        """Effective settings for provenance; thread count is left out so reports
        do not depend on it."""
        d = asdict(self)
        d.pop("threads")
        d["toy_sweep"] = list(self.toy_sweep)
        return d


# ---------------------------------------------------------------- argument plumbing

def _flag_type(f):
    t = str(f.type)
    if "bool" in t:
        return bool
    if "tuple" in t:
        return tuple
    if "int" in t:
        return int
    if "float" in t:
        return float
    return str


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file of settings (snake_case keys)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = _flag_type(f)
        if kind is bool:
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif kind is tuple:
            parser.add_argument(flag, dest=f.name, type=float, nargs="+", default=None)
        elif f.name == "calibration_mode":
            parser.add_argument(flag, dest=f.name, choices=CALIBRATION_MODES, default=None)
        else:
            parser.add_argument(flag, dest=f.name, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hotcalib", description="Hierarchical-OT distribution calibration for few-shot learning."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "stats": "compute per-class base statistics into --stats",
        "train-phi": "train the base classifier and sample weights into --phi",
        "eval": "evaluate a method over many episodes",
        "plan": "dump the cost and transport plans of one episode",
        "toy": "toy weight-recovery experiment",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _add_config_flags(p)
        p.add_argument("-v", "--verbose", action="store_true", help="progress and debug logging")
    return parser


def _read_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"config file {path} must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InputError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
    return data


def resolve_config(args: argparse.Namespace, env=None) -> RunConfig:
    env = os.environ if env is None else env
    values = {}
    if args.config:
        values.update(_read_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if "toy_sweep" in values:
        values["toy_sweep"] = tuple(float(e) for e in values["toy_sweep"])
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise InputError(f"bad configuration: {exc}") from None
    if cfg.threads is None:
        raw = env.get(THREADS_ENV)
        if raw:
            try:
                cfg.threads = int(raw)
            except ValueError:
                raise InputError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        else:
            cfg.threads = 1
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- outputs

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def write_meta(path, command: str, started: float) -> None:
    meta = {
        "command": command,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "elapsed_seconds": round(time.time() - started, 3),
        "hotcalib_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    with open(os.fspath(path) + ".meta.json", "w", encoding="utf-8") as fh:
        fh.write(_dumps(meta))


def _matrix(a) -> list:
    return [[float(v) for v in row] for row in np.asarray(a)]


# ---------------------------------------------------------------- shared loading

def _load_base(cfg: RunConfig):
    cfg.require("base")
    return load_features(cfg.base)


def _stats_for(cfg: RunConfig, base):
    dtype = np.float32 if cfg.f32_stats else np.float64
    if cfg.stats and os.path.exists(cfg.stats):
        stats = load_stats(cfg.stats, dtype=dtype)
        check_stats_dim(stats, base.dim)
        return stats
    log.info("no stats file given or found; computing base statistics in memory")
    return base_statistics(base, dtype=dtype)


def _phi_for(cfg: RunConfig, base):
    """Load the phi cache when it exists, else train (and store it if a path is set)."""
    if cfg.phi and os.path.exists(cfg.phi):
        phi, weights = load_phi(cfg.phi)
        _check_phi(phi, weights, base)
        return phi, weights, True
    phi = train_phi(base, cfg.phi_config())
    weights = compute_sample_weights(phi, base)
    if cfg.phi:
        save_phi(phi, weights, cfg.phi)
    return phi, weights, False


def _check_phi(phi, weights, base) -> None:
    if phi.dim != base.dim:
        raise SchemaMismatch(f"phi cache has dim {phi.dim}, base features have {base.dim}")
    if tuple(weights.labels) != tuple(base.class_labels):
        raise SchemaMismatch("phi cache was built for different base classes")
    for lab, idx in zip(weights.labels, weights.indices):
        if idx.size and (idx.max() >= len(base) or any(base.labels[i] != lab for i in idx)):
            raise SchemaMismatch(f"phi cache rows for {lab!r} do not match the base features")


def _context(cfg: RunConfig):
    base = _load_base(cfg)
    stats = _stats_for(cfg, base)
    _, weights, _ = _phi_for(cfg, base)
    return BaseContext.build(base, stats, weights)


# ---------------------------------------------------------------- subcommands

def cmd_stats(cfg: RunConfig) -> dict:
    cfg.require("base", "stats")
    base = _load_base(cfg)
    stats = base_statistics(base, dtype=np.float32 if cfg.f32_stats else np.float64)
    save_stats(stats, cfg.stats)
    return {"classes": len(stats), "dim": base.dim, "stats": cfg.stats}


def cmd_train_phi(cfg: RunConfig) -> dict:
    cfg.require("base", "phi")
    base = _load_base(cfg)
    if cfg.reuse and os.path.exists(cfg.phi):
        phi, weights = load_phi(cfg.phi)
        _check_phi(phi, weights, base)
        reused = True
    else:
        phi = train_phi(base, cfg.phi_config())
        weights = compute_sample_weights(phi, base)
        save_phi(phi, weights, cfg.phi)
        reused = False
    predicted, _ = predict(phi, base.vectors)
    accuracy = float(np.mean(np.asarray(predicted) == base.class_ids))
    scores = own_class_scores(phi, base)
    return {
        "phi": cfg.phi,
        "reused": reused,
        "train_accuracy": accuracy,
        "train_loss": phi.train_loss,
        "converged": phi.converged,
        "mean_own_class_score": float(scores.mean()),
    }


def cmd_eval(cfg: RunConfig) -> dict:
    cfg.require("base", "novel", "lam", "calibration_mode", "output")
    hyper = cfg.hyper()
    ctx = _context(cfg)
    novel = load_features(cfg.novel)
    spec = EpisodeSpec(cfg.n_way, cfg.k_shot, cfg.n_query, cfg.seed)
    report = evaluate(ctx, novel, spec, cfg.tasks, hyper, cfg.method, threads=cfg.threads,
                      config=cfg.snapshot(), progress_every=cfg.progress_every)
    payload = report.to_dict()
    with open(cfg.output, "w", encoding="utf-8") as fh:
        fh.write(_dumps(payload))
    if cfg.per_task_csv:
        report.write_per_task_csv(cfg.per_task_csv)
    if report.num_failed == report.num_tasks:
        raise NumericalError(f"all {report.num_tasks} tasks failed; first: {report.per_task[0].error}")
    return {
        "method": cfg.method,
        "mean_accuracy": report.mean_accuracy,
        "ci95_halfwidth": report.ci95_halfwidth,
        "num_failed": report.num_failed,
        "num_sinkhorn_unconverged": report.num_unconverged,
        "output": cfg.output,
    }


def cmd_plan(cfg: RunConfig) -> dict:
    cfg.require("base", "novel", "lam", "output")
    family, kind = parse_method(cfg.method)
    if family not in ("hot", "variant"):
        raise InputError(f"plan needs method hot or variant:<kind>, got {cfg.method!r}")
    # calibration mode does not enter the plan; any valid value builds the hyperparameters
    hyper = replace(cfg, calibration_mode=cfg.calibration_mode or "convex").hyper()
    ctx = _context(cfg)
    novel = load_features(cfg.novel)
    spec = EpisodeSpec(cfg.n_way, cfg.k_shot, cfg.n_query, cfg.seed, cfg.task_index)
    support_table, _ = sample_episode(novel, spec)
    support = build_support(support_table, hyper.lam)
    cost, plan = episode_plan(support, ctx, hyper, kind, keep_plans=cfg.keep_plans)
    payload = {
        "config": cfg.snapshot(),
        "task_index": cfg.task_index,
        "base_labels": list(ctx.weights.labels),
        "support_labels": [support_table.class_labels[i] for i in support.labels],
        "C": _matrix(cost.values),
        "T": _matrix(plan.values),
        "row_marginal": [float(v) for v in plan.row_marginal],
        "col_marginal": [float(v) for v in plan.col_marginal],
        "objective": plan.objective,
        "iterations": plan.iterations,
        "converged": plan.converged and cost.converged_all,
        "zero_vectors": cost.zero_vectors,
        "mask": None if cost.mask is None else [[bool(v) for v in row] for row in cost.mask],
        "M": None if cost.per_class_plans is None else [_matrix(m) for m in cost.per_class_plans],
    }
    with open(cfg.output, "w", encoding="utf-8") as fh:
        fh.write(_dumps(payload))
    return {"output": cfg.output, "converged": payload["converged"], "objective": plan.objective}


def _toy_labels(B):
    return tuple(f"base{b}" for b in range(B))


def toy_weights(inst, method: str, epsilon: float, rescale: bool, rng=None, cfg=None) -> np.ndarray:
    """Learned ``N x B`` weight rows for one toy instance.

    ``hot_euclid`` is the high-level plan on squared Euclidean cost to the base
    means; ``free_lunch`` puts 1/2 on the two nearest means; ``hot`` is full
    H-OT on base samples synthesized around the means.
    """
    B, V = inst.U.shape
    N = inst.X.shape[0]
    support = EpisodeSupport(N, 1, inst.X, np.arange(N))
    stats = StatsArrays(_toy_labels(B), inst.U, np.zeros((B, V, V)))
    if method == "uniform":
        return np.full((N, B), 1.0 / B)
    if method == "free_lunch":
        idx = free_lunch_select(support, inst.U, 2)
        w = np.zeros((N, B))
        np.put_along_axis(w, idx, 0.5, axis=1)
        return w
    if method == "hot_euclid":
        cost = variant_cost(support, stats, "euclid_mean")
        return N * high_level_plan(cost, epsilon, rescale=rescale).values.T
    if method == "hot":
        samples = inst.U[:, None, :] + cfg.toy_noise * rng.standard_normal((B, cfg.toy_base_samples, V))
        labels = tuple(lab for lab in _toy_labels(B) for _ in range(cfg.toy_base_samples))
        base = FeatureTable(samples.reshape(-1, V), labels)
        weights = compute_sample_weights(train_phi(base, cfg.phi_config()), base)
        cost = low_level_cost(base, weights, support, cfg.epsilon, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol)
        plan = high_level_plan(cost, cfg.epsilon, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol,
                               rescale=cfg.rescale_cost)
        return N * plan.values.T
    raise InputError(f"unknown toy method {method!r}")


def run_toy(cfg: RunConfig, with_full_hot: bool = True) -> dict:
    base_means = None
    if cfg.stats:
        stats = StatsArrays.from_stats(load_stats(cfg.stats))
        if stats.means.shape[0] < cfg.toy_base:
            raise InputError(f"stats file has {stats.means.shape[0]} classes, toy needs {cfg.toy_base}")
        base_means = stats.means[: cfg.toy_base]
        cfg.toy_dim = base_means.shape[1]
    methods = ["hot_euclid", "free_lunch", "uniform"] + (["hot"] if with_full_hot else [])
    scores = {m: [] for m in methods}
    hits = {m: [] for m in methods}
    sweep = {float(e): [] for e in cfg.toy_sweep}
    first = {}
    for i in range(cfg.toy_instances):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(i,))))
        inst = make_toy(cfg.toy_base, cfg.toy_dim, cfg.toy_novel, rng, base_means)
        for m in methods:
            w = toy_weights(inst, m, cfg.toy_epsilon, cfg.toy_rescale, rng, cfg)
            r = recovery_score(w, inst.W_true)
            scores[m].append(r["mean_cosine"])
            hits[m].append(r["top2_hit_rate"])
            if i == 0:
                first[m] = _matrix(w)
        for e in sweep:
            w = toy_weights(inst, "hot_euclid", e, cfg.toy_rescale)
            sweep[e].append(recovery_score(w, inst.W_true)["mean_cosine"])
        if i == 0:
            first["truth"] = _matrix(inst.W_true)
    return {
        "config": cfg.snapshot(),
        "methods": {
            m: {"mean_cosine": float(np.mean(scores[m])), "top2_hit_rate": float(np.mean(hits[m])),
                "per_instance_cosine": [float(v) for v in scores[m]]}
            for m in methods
        },
        "epsilon_sweep_hot_euclid": {repr(e): float(np.mean(v)) for e, v in sweep.items()},
        "instance0_weights": first,
    }


def cmd_toy(cfg: RunConfig) -> dict:
    cfg.require("output")
    payload = run_toy(cfg)
    with open(cfg.output, "w", encoding="utf-8") as fh:
        fh.write(_dumps(payload))
    return {m: v["mean_cosine"] for m, v in payload["methods"].items()} | {"output": cfg.output}


COMMANDS = {
    "stats": cmd_stats,
    "train-phi": cmd_train_phi,
    "eval": cmd_eval,
    "plan": cmd_plan,
    "toy": cmd_toy,
}

# which setting holds each command's primary output (gets the .meta.json sidecar)
_PRIMARY = {"stats": "stats", "train-phi": "phi", "eval": "output", "plan": "output", "toy": "output"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    started = time.time()
    try:
        cfg = resolve_config(args)
        summary = COMMANDS[args.command](cfg)
        write_meta(getattr(cfg, _PRIMARY[args.command]), args.command, started)
    except InputError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_INPUT
    except (IsADirectoryError, PermissionError) as exc:
        print(f"error: cannot access {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_INPUT
    except HotCalibError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
