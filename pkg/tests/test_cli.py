import json
import os
import subprocess
import sys
import time
from importlib import resources

import pytest

from abdnet.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main


def preset_tree_path(name):
    return str(resources.files("abdnet.presets").joinpath(f"trees/{name}.json"))


def run(argv):
    return main(argv)


class TestDyncheck:
    def test_shipped_double_pendulum_passes(self, capsys):
        code = run(["dyncheck", "--tree", preset_tree_path("double_pendulum"),
                    "--n-random", "50"])
        assert code == EXIT_OK
        assert "OK" in capsys.readouterr().out

    def test_negative_mass_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        doc = json.loads(open(preset_tree_path("pendulum_single")).read())
        doc["links"][1]["mass"] = -1.0
        bad.write_text(json.dumps(doc))
        assert run(["dyncheck", "--tree", str(bad)]) == EXIT_DATA

    def test_zero_n_random_is_usage_error(self):
        code = run(["dyncheck", "--tree", preset_tree_path("pendulum_single"),
                    "--n-random", "0"])
        assert code == EXIT_USAGE

    def test_missing_file_exits_2(self):
        assert run(["dyncheck", "--tree", "/nonexistent.json"]) == EXIT_DATA

    def test_writes_report_under_out(self, tmp_path):
        out = str(tmp_path / "report")
        code = run(["dyncheck", "--tree", preset_tree_path("pendulum_single"),
                    "--n-random", "20", "--out", out])
        assert code == EXIT_OK
        assert os.path.exists(os.path.join(out, "manifest.json"))
        assert os.path.exists(os.path.join(out, "dyncheck.csv"))


class TestTrainPolicy:
    def test_unknown_actor_exits_64(self, capsys):
        code = run(["train-policy", "--env", "double_pendulum_balance",
                    "--actor", "transformer", "--out", "/tmp/x"])
        assert code == EXIT_USAGE
        err = capsys.readouterr().err
        assert "abdnet" in err and "mlp" in err

    def test_smoke_run_under_60s(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ABD_DETERMINISTIC", "1")
        out = str(tmp_path / "run")
        t0 = time.time()
        code = run(["train-policy", "--env", "double_pendulum_balance",
                    "--actor", "abdnet", "--out", out,
                    "--steps", "1024", "--n-envs", "4", "--d", "8", "--seed", "1"])
        assert code == EXIT_OK
        assert time.time() - t0 < 60.0
        assert os.path.exists(os.path.join(out, "manifest.json"))
        assert os.path.exists(os.path.join(out, "metrics.csv"))
        cks = [f for f in os.listdir(out) if f.endswith(".npz")]
        assert len(cks) >= 1

    def test_rerun_from_manifest_bit_identical(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ABD_DETERMINISTIC", "1")
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        args = ["train-policy", "--env", "double_pendulum_balance", "--actor", "mlp",
                "--out", a, "--steps", "1024", "--n-envs", "4", "--d", "8", "--seed", "3"]
        assert run(args) == EXIT_OK
        manifest = os.path.join(a, "manifest.json")
        code = run(["train-policy", "--env", "double_pendulum_balance", "--actor", "mlp",
                    "--out", b, "--from-manifest", manifest])
        assert code == EXIT_OK
        bytes_a = open(os.path.join(a, "metrics.csv"), "rb").read()
        bytes_b = open(os.path.join(b, "metrics.csv"), "rb").read()
        assert bytes_a == bytes_b

    def test_unknown_config_field_exits_64(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"not_a_field": 1}))
        code = run(["train-policy", "--env", "double_pendulum_balance",
                    "--actor", "mlp", "--out", str(tmp_path / "o"),
                    "--config", str(cfg)])
        assert code == EXIT_USAGE


class TestFlops:
    def test_chain_matches_instrumented_counter(self, capsys):
        code = run(["flops", "--tree", preset_tree_path("double_pendulum"),
                    "--actor", "abdnet", "--d", "8", "--check"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "MATCH" in out
        assert "message_pass:" in out

    def test_printed_total_equals_analytic(self, capsys):
        from abdnet.actors import flops_count
        from abdnet.morphology import load_tree

        tree = load_tree(preset_tree_path("double_pendulum"))
        code = run(["flops", "--tree", preset_tree_path("double_pendulum"),
                    "--actor", "mlp", "--d", "16", "--obs-dim", "4"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        total = int([l for l in out.splitlines() if l.startswith("total:")][0].split()[1])
        assert total == flops_count("mlp", tree, 16, 4)["total"]


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    from abdnet.actors import make_actor, save_checkpoint
    from abdnet.envs import load_env_spec

    spec = load_env_spec("double_pendulum_balance")
    actor = make_actor("abdnet", spec.tree, spec.obs_dim, 8, seed=0)
    path = str(tmp_path_factory.mktemp("ck") / "actor.npz")
    save_checkpoint(path, actor, spec.tree)
    return path


class TestEvalShift:
    def test_factor_one_prints_100(self, checkpoint, capsys):
        code = run(["eval-shift", "--ckpt", checkpoint,
                    "--env", "double_pendulum_balance",
                    "--factors", "1.0", "--episodes", "2"])
        assert code == EXIT_OK
        assert "retention 100.0%" in capsys.readouterr().out

    def test_writes_retention_csv(self, checkpoint, tmp_path):
        out = str(tmp_path / "shift")
        code = run(["eval-shift", "--ckpt", checkpoint,
                    "--env", "double_pendulum_balance",
                    "--factors", "1.5,2.0", "--episodes", "2", "--out", out])
        assert code == EXIT_OK
        rows = open(os.path.join(out, "retention.csv")).read().splitlines()
        assert rows[0].startswith("factor,")
        assert len(rows) == 4  # header + nominal + two factors

    def test_zero_episodes_usage_error(self, checkpoint):
        code = run(["eval-shift", "--ckpt", checkpoint,
                    "--env", "double_pendulum_balance",
                    "--factors", "1.5", "--episodes", "0"])
        assert code == EXIT_USAGE


def test_train_dynamics_smoke(tmp_path, monkeypatch):
    monkeypatch.setenv("ABD_DETERMINISTIC", "1")
    out = str(tmp_path / "dyn")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"d": 8, "regress_epochs": 3, "minibatch": 128}))
    code = run(["train-dynamics", "--env", "chain4_regress", "--model", "mlp",
                "--out", out, "--dataset-steps", "800", "--config", str(cfg)])
    assert code == EXIT_OK
    assert os.path.exists(os.path.join(out, "result.json"))
    assert os.path.exists(os.path.join(out, "regress_metrics.csv"))
    assert os.path.exists(os.path.join(out, "model.npz"))


def test_ablate_smoke(tmp_path, monkeypatch):
    monkeypatch.setenv("ABD_DETERMINISTIC", "1")
    out = str(tmp_path / "abl")
    code = run(["ablate", "--env", "double_pendulum_balance", "--out", out,
                "--seeds", "0,1", "--variants", "abdnet,mlp",
                "--steps", "512", "--n-envs", "2", "--d", "8"])
    assert code == EXIT_OK
    rows = open(os.path.join(out, "ablation.csv")).read().splitlines()
    assert rows[0] == "variant,seed,metric,value"
    # one final_return and one orth_loss_final row per (variant, seed)
    assert len(rows) == 1 + 2 * 2 * 2


def test_ablate_unknown_variant(tmp_path):
    code = run(["ablate", "--env", "double_pendulum_balance",
                "--out", str(tmp_path / "x"), "--variants", "transformer"])
    assert code == EXIT_USAGE


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "abdnet.cli", "--version"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert proc.stdout.strip()
