import json

import numpy as np
import pytest

from hotcalib.cli import build_parser, main, resolve_config
from hotcalib.errors import InputError
from hotcalib.features_io import save_features
from hotcalib.synthetic import make_gaussian_world


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    base, novel = make_gaussian_world(6, 6, 6, 30, 10.0, np.random.default_rng(0), mixing=np.eye(6))
    save_features(base, root / "base.csv")
    save_features(novel, root / "novel.csv")
    return root


def run(files, *argv):
    args = [str(a) for a in argv]
    return main(args)


def read(path):
    return json.loads(path.read_text())


class TestSubcommands:
    def test_stats_and_train_phi(self, files, capsys):
        assert run(files, "stats", "--base", files / "base.csv", "--stats", files / "s.json") == 0
        assert read(files / "s.json")
        assert (files / "s.json.meta.json").exists()
        assert run(files, "train-phi", "--base", files / "base.csv", "--phi", files / "phi.json") == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["reused"] is False and summary["train_accuracy"] == 1.0

    def test_reuse_and_corrupt_cache(self, files, capsys):
        phi = files / "phi_reuse.json"
        argv = ("train-phi", "--base", files / "base.csv", "--phi", phi)
        assert run(files, *argv) == 0
        capsys.readouterr()
        assert run(files, *argv, "--reuse") == 0
        assert json.loads(capsys.readouterr().out.strip())["reused"] is True
        phi.write_text("{not json")
        assert run(files, *argv, "--reuse") == 2

    def test_eval_separable_world(self, files):
        out = files / "eval.json"
        argv = ("eval", "--base", files / "base.csv", "--novel", files / "novel.csv", "--lam", 1.0,
                "--calibration-mode", "convex", "--tasks", 50, "--generated", 100,
                "--output", out, "--per-task-csv", files / "t.csv", "--threads", 4)
        assert run(files, *argv) == 0
        report = read(out)
        assert report["mean_accuracy"] >= 0.99
        assert len(report["per_task"]) == 50
        assert (files / "t.csv").read_text().count("\n") == 51
        first = out.read_bytes()
        assert run(files, *argv) == 0
        assert out.read_bytes() == first

    def test_eval_needs_hyperparameters(self, files):
        base = ("eval", "--base", files / "base.csv", "--novel", files / "novel.csv", "--output", files / "x.json")
        assert run(files, *base, "--calibration-mode", "paper") == 2
        assert run(files, *base, "--lam", 0.5) == 2

    def test_all_tasks_failing_is_numerical(self, files):
        # 6 classes cannot fill a 7-way episode: every task errors
        code = run(files, "eval", "--base", files / "base.csv", "--novel", files / "novel.csv",
                   "--lam", 1.0, "--calibration-mode", "paper", "--tasks", 2, "--n-way", 7,
                   "--output", files / "fail.json")
        assert code == 1

    def test_plan_marginals(self, files):
        out = files / "plan.json"
        assert run(files, "plan", "--base", files / "base.csv", "--novel", files / "novel.csv",
                   "--lam", 1.0, "--k-shot", 2, "--output", out) == 0
        plan = read(out)
        T = np.array(plan["T"])
        assert T.shape == (6, 10)
        np.testing.assert_allclose(T.sum(axis=1), np.full(6, 1 / 6), atol=1e-6)
        np.testing.assert_allclose(T.sum(axis=0), np.full(10, 1 / 10), atol=1e-6)
        assert len(plan["M"]) == 6
        assert plan["mask"] is None

    def test_plan_top_k_mask(self, files):
        out = files / "plan_k.json"
        assert run(files, "plan", "--base", files / "base.csv", "--novel", files / "novel.csv",
                   "--lam", 1.0, "--top-k", 2, "--method", "variant:cosine_mean", "--output", out) == 0
        plan = read(out)
        mask = np.array(plan["mask"])
        assert mask.shape == (6, 5) and np.all(mask.sum(axis=0) == 2)

    def test_toy(self, files):
        out = files / "toy.json"
        assert run(files, "toy", "--toy-instances", 2, "--toy-base", 6, "--toy-dim", 4, "--toy-novel", 3,
                   "--toy-base-samples", 10, "--toy-sweep", 1.0, 0.1, "--output", out) == 0
        payload = read(out)
        assert set(payload["methods"]) == {"hot_euclid", "free_lunch", "uniform", "hot"}
        assert set(payload["epsilon_sweep_hot_euclid"]) == {"1.0", "0.1"}
        for m in payload["methods"].values():
            assert 0.0 <= m["mean_cosine"] <= 1.0 + 1e-12


class TestErrors:
    def test_missing_file(self, files):
        assert run(files, "stats", "--base", files / "nope.csv", "--stats", files / "s2.json") == 2

    def test_unknown_config_key(self, files):
        cfg = files / "bad.json"
        cfg.write_text('{"lamda": 1.0}')
        assert run(files, "stats", "--config", cfg, "--base", files / "base.csv", "--stats", files / "s3.json") == 2


class TestConfigResolution:
    def parse(self, *argv):
        return build_parser().parse_args([str(a) for a in argv])

    def test_flag_overrides_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"lam": 0.5, "alpha": 0.3, "tasks": 10}))
        resolved = resolve_config(self.parse("eval", "--config", cfg, "--lam", 0.7), env={})
        assert (resolved.lam, resolved.alpha, resolved.tasks) == (0.7, 0.3, 10)

    def test_thread_env_fallback(self):
        assert resolve_config(self.parse("stats"), env={"HOTCALIB_THREADS": "3"}).threads == 3
        assert resolve_config(self.parse("stats", "--threads", 2), env={"HOTCALIB_THREADS": "3"}).threads == 2
        assert resolve_config(self.parse("stats"), env={}).threads == 1
        with pytest.raises(InputError):
            resolve_config(self.parse("stats"), env={"HOTCALIB_THREADS": "many"})

    def test_snapshot_excludes_threads(self):
        snap = resolve_config(self.parse("stats", "--threads", 4), env={}).snapshot()
        assert "threads" not in snap and snap["epsilon"] == 0.01
