import hashlib
import json
import math

import pytest

from applefair.cli import main
from applefair.workflow import build_config, load_config, ConfigError


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.delenv("APPLEFAIR_OUTPUT_ROOT", raising=False)
    cfg = {
        "profile": "desk",
        "output_root": str(tmp_path / "out"),
        "data": {"root": str(tmp_path / "data"), "resolution": 32, "split_ratio": 0.7},
        "synth": {"n_samples": 24, "resolution": 32},
        "train": {"epochs": 1, "batch_size": 8, "probe_epochs": 2, "val_fraction": 0.0},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "data")]) == 0
    return tmp_path, str(path)


def run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestConfig:
    def test_profile_defaults(self):
        cfg = build_config(profile="full")
        assert cfg.data.resolution == 256 and cfg.segmentor["channels"] == "full"
        assert cfg.train.alpha == 0.1 and cfg.train.beta == 1.0
        assert cfg.train.lr_generator == 1e-3 and cfg.train.lr_segmentor == 1e-2
        assert build_config(profile="desk").data.resolution == 64

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="bogus"):
            build_config({"train": {"bogus": 1}})
        with pytest.raises(ConfigError, match="nope"):
            build_config({"nope": 1})

    def test_override_order(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"beta": 0.5, "epochs": 3}}))
        cfg = load_config(p, overrides={"train": {"beta": 5.0}})
        assert cfg.train.beta == 5.0 and cfg.train.epochs == 3

    def test_env_output_root(self, monkeypatch):
        monkeypatch.setenv("APPLEFAIR_OUTPUT_ROOT", "/tmp/elsewhere")
        assert build_config().output_root == "/tmp/elsewhere"
        assert build_config(overrides={"output_root": "x"}).output_root == "x"


class TestSynth:
    def test_idempotent(self, tmp_path, capsys):
        args = ["synth", "--profile", "desk", "--n-samples", "10", "--seed", "3"]
        assert run(args + ["--out", str(tmp_path / "a")], capsys)[0] == 0
        assert run(args + ["--out", str(tmp_path / "b")], capsys)[0] == 0
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_default_size(self, tmp_path, capsys):
        code, out, _ = run(["synth", "--profile", "desk", "--out", str(tmp_path / "d")], capsys)
        assert code == 0 and json.loads(out)["n_samples"] == 1000

    def test_invalid_balance(self, tmp_path, capsys):
        code, _, err = run(["synth", "--balance", "1.5", "--out", str(tmp_path / "x")], capsys)
        assert code == 1
        assert err.startswith("applefair: error: config:") and "attribute_balance" in err
        assert err.count("\n") == 1


class TestTrainEvaluate:
    def test_apple_without_baseline(self, workspace, capsys):
        _, cfg = workspace
        code, _, err = run(["train", "apple", "--config", cfg, "--name", "a"], capsys)
        assert code == 1
        assert err.startswith("applefair: error: checkpoint:") and "train baseline" in err

    def test_apple_with_missing_baseline_dir(self, workspace, capsys):
        tmp, cfg = workspace
        code, _, err = run(["train", "apple", "--config", cfg, "--name", "a",
                            "--baseline", str(tmp / "nope")], capsys)
        assert code == 1 and "checkpoint" in err

    def test_full_workflow(self, workspace, capsys):
        tmp, cfg = workspace
        runs = tmp / "out" / "runs"
        code, out, _ = run(["train", "baseline", "--config", cfg, "--name", "base", "--repeats", "3"], capsys)
        assert code == 0
        dirs = [runs / f"base-r{i}" for i in range(3)]
        seeds = [json.loads((d / "manifest.json").read_text())["seed"] for d in dirs]
        assert seeds == [0, 1, 2]

        # refuses to overwrite without --force
        code, _, err = run(["train", "baseline", "--config", cfg, "--name", "base", "--repeats", "3"], capsys)
        assert code == 1 and err.startswith("applefair: error: exists:")

        code, _, _ = run(["train", "apple", "--config", cfg, "--name", "ap", "--baseline", str(dirs[0]),
                          "--beta", "5.0"], capsys)
        assert code == 0
        meta = json.loads((runs / "ap" / "manifest.json").read_text())
        assert meta["config"]["beta"] == 5.0
        assert meta["effective_config"]["train"]["beta"] == 5.0
        assert meta["frozen_hash_start"] == meta["frozen_hash_end"]

        ev1, ev2 = tmp / "ev1", tmp / "ev2"
        assert run(["evaluate", "--config", cfg, str(dirs[0]), "--out", str(ev1)], capsys)[0] == 0
        assert run(["evaluate", "--config", cfg, str(dirs[0]), "--out", str(ev2)], capsys)[0] == 0
        assert (ev1 / "report.json").read_text().replace(str(ev1), "") == \
            (ev2 / "report.json").read_text().replace(str(ev2), "")
        rows = (ev1 / "base-r0" / "per_sample.csv").read_text().strip().splitlines()
        assert rows[0] == "id,attribute,dice"
        assert len(rows) - 1 == len(meta["test_ids"])
        assert {p.name for p in ev1.iterdir()} >= {"report.json", "table.csv", "table.txt", "table.md"}

        code, out, _ = run(["evaluate", "--config", cfg, *map(str, dirs), "--out", str(tmp / "ev3")], capsys)
        assert code == 0 and "U-Net" in out
        report = json.loads((tmp / "ev3" / "report.json").read_text())
        assert report["aggregate"]["sample"]["U-Net"]["n_runs"] == 3

        code, out, _ = run(["report", str(ev1), str(tmp / "ev3"), "--out", str(tmp / "merged")], capsys)
        assert code == 0 and (tmp / "merged" / "table.md").is_file()

        # evaluating against the wrong attribute is refused for attribute-aware runs
        code, _, err = run(["evaluate", "--config", cfg, str(runs / "ap"), "--attribute", "age",
                            "--out", str(tmp / "ev4")], capsys)
        assert code == 1 and "attribute" in err

    def test_zero_init_apple_matches_baseline(self, workspace, capsys):
        tmp, cfg = workspace
        runs = tmp / "out" / "runs"
        assert run(["train", "baseline", "--config", cfg, "--name", "b"], capsys)[0] == 0
        code, _, _ = run(["train", "apple", "--config", cfg, "--name", "z", "--baseline", str(runs / "b")], capsys)
        assert code == 0
        from applefair.perturbation import PerturberBundle

        ck = json.loads((runs / "z" / "manifest.json").read_text())["checkpoints"]["apple"]
        bundle = PerturberBundle(128, (2, 2), 2)
        bundle.save(ck)  # overwrite with an untrained perturber
        assert run(["evaluate", "--config", cfg, str(runs / "b"), "--out", str(tmp / "eb")], capsys)[0] == 0
        assert run(["evaluate", "--config", cfg, str(runs / "z"), "--out", str(tmp / "ez")], capsys)[0] == 0
        rb = json.loads((tmp / "eb" / "report.json").read_text())["runs"][0]
        rz = json.loads((tmp / "ez" / "report.json").read_text())["runs"][0]
        assert rb["utilities"] == rz["utilities"]
        assert rb["fairness"] == rz["fairness"]

    def test_rs_and_sm(self, workspace, capsys):
        tmp, cfg = workspace
        runs = tmp / "out" / "runs"
        assert run(["train", "rs", "--config", cfg, "--name", "rs"], capsys)[0] == 0
        assert run(["train", "sm", "--config", cfg, "--name", "sm"], capsys)[0] == 0
        meta = json.loads((runs / "sm" / "manifest.json").read_text())
        assert meta["requires_attribute_at_inference"] is True
        assert sorted(meta["checkpoints"]) == ["subgroup_0", "subgroup_1"]
        code, out, _ = run(["evaluate", "--config", cfg, str(runs / "rs"), str(runs / "sm"),
                            "--out", str(tmp / "ev")], capsys)
        assert code == 0 and "U-Net + RS" in out and "U-Net + SM" in out


class TestSweep:
    def test_default_and_singleton(self, workspace, capsys):
        tmp, cfg = workspace
        runs = tmp / "out" / "runs"
        assert run(["train", "baseline", "--config", cfg, "--name", "b"], capsys)[0] == 0
        code, out, _ = run(["sweep-beta", "--config", cfg, "--baseline", str(runs / "b"),
                            "--betas", "5.0,0.1,1.0"], capsys)
        assert code == 0
        summary = json.loads((tmp / "out" / "sweeps" / "sweep" / "sweep_summary.json").read_text())
        assert summary["betas"] == [0.1, 1.0, 5.0]
        assert len(list((tmp / "out" / "sweeps" / "sweep" / "runs").iterdir())) == 3
        assert "Probe%" in out

        code, out, _ = run(["sweep-beta", "--config", cfg, "--baseline", str(runs / "b"), "--betas", "1.0",
                            "--name", "one", "--no-probe"], capsys)
        assert code == 0 and "Probe" not in out
        summary = json.loads((tmp / "out" / "sweeps" / "one" / "sweep_summary.json").read_text())
        assert len(summary["rows"]) == 1

    def test_parallel_matches_sequential(self, workspace, capsys):
        tmp, cfg = workspace
        runs = tmp / "out" / "runs"
        assert run(["train", "baseline", "--config", cfg, "--name", "b"], capsys)[0] == 0
        base = ["sweep-beta", "--config", cfg, "--baseline", str(runs / "b"), "--betas", "0.1,5", "--no-probe"]
        assert run(base + ["--name", "seq"], capsys)[0] == 0
        assert run(base + ["--name", "par", "--parallel", "2"], capsys)[0] == 0
        sweeps = tmp / "out" / "sweeps"
        assert (sweeps / "seq" / "sweep_summary.json").read_text() == (sweeps / "par" / "sweep_summary.json").read_text()


class TestDeterminism:
    def test_repeated_runs_identical(self, workspace, capsys):
        tmp, cfg = workspace
        histories = {}
        for name in ("a", "b"):
            run(["train", "baseline", "--config", cfg, "--name", f"base_{name}"], capsys)
            run(["train", "apple", "--config", cfg, "--name", f"apple_{name}",
                 "--baseline", str(tmp / "out" / "runs" / "base_a")], capsys)
            run(["train", "sm", "--config", cfg, "--name", f"sm_{name}"], capsys)
            runs = tmp / "out" / "runs"
            histories[name] = [(runs / f"base_{name}" / "history.csv").read_bytes(),
                               (runs / f"apple_{name}" / "history.csv").read_bytes(),
                               json.loads((runs / f"sm_{name}" / "manifest.json").read_text())["history"]]
        assert histories["a"] == histories["b"]
