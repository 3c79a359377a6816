"""End-to-end CLI tests: subcommands, config strictness, exit codes,
manifest-driven reproduction."""

import json
import os

import numpy as np
import pytest

from flatreg import cli
from flatreg.cli import ConfigError, main, validate_config

TINY = {
    "method": "standard",
    "epochs": 2,
    "arch": [784, 16, 10],
    "inner": {"iters": 2},
    "eval_attack": {"iters": 3},
    "data": {"synthetic": True, "seed": 3, "train_n": 120, "test_n": 40},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture()
def trained_run(tmp_path, tiny_config):
    out = str(tmp_path / "run-train")
    assert main(["train", "--config", tiny_config, "--out", out]) == 0
    return out


class TestConfigValidation:
    def test_empty_object_resolves_to_defaults(self):
        resolved = validate_config({})
        assert resolved["method"] == "standard"
        assert resolved["lam"] == 0.02
        assert resolved["inner"]["iters"] == 10
        assert resolved["eval_attack"]["random_start"] is True
        assert resolved["data"]["train_n"] == 2000

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="'gamma'"):
            validate_config({"gamma": 1})
        with pytest.raises(ConfigError, match="'inner.gamma'"):
            validate_config({"inner": {"gamma": 1}})

    def test_type_errors_named(self):
        with pytest.raises(ConfigError, match="'batch'"):
            validate_config({"batch": "many"})
        with pytest.raises(ConfigError, match="'batch'"):
            validate_config({"batch": True})
        with pytest.raises(ConfigError, match="'arch'"):
            validate_config({"arch": [784, "x", 10]})
        with pytest.raises(ConfigError, match="'inner.random_start'"):
            validate_config({"inner": {"random_start": 1}})

    def test_int_accepted_where_float_expected(self):
        assert validate_config({"lam": 1})["lam"] == 1.0

    def test_constraint_error_names_field(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"lam": -1}')
        code = main(["train", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_presets_ship_and_load(self):
        for name in ("desk", "paper-mnist"):
            resolved = cli.config_load(cli.preset_path(name))
            assert resolved["lam"] == 0.02
        desk = cli.config_load(cli.preset_path("desk"))
        assert desk["eval_attack"]["iters"] == 40
        assert desk["eval_attack"]["step"] == 0.01
        assert desk["data"] == {
            "synthetic": True, "dir": "", "seed": 0, "train_n": 2000, "test_n": 1000,
        }
        paper = cli.config_load(cli.preset_path("paper-mnist"))
        assert (paper["lr"], paper["batch"], paper["epochs"]) == (0.01, 128, 100)
        assert paper["eval_attack"]["epsilon"] == 0.3
        with pytest.raises(ConfigError, match="available"):
            cli.preset_path("nope")

    def test_help_documents_every_config_key(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.build_parser().parse_args(["--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for path, default, _ in cli._walk_schema():
            assert path in text
            assert json.dumps(default) in text


class TestExitCodes:
    def test_no_arguments_usage_exit_1(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_exit_1(self, capsys):
        assert main(["train", "--bogus"]) == 1

    def test_missing_config_file_exit_1(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "none.json"),
                     "--out", str(tmp_path / "o")])
        assert code == 1
        assert "none.json" in capsys.readouterr().err

    def test_malformed_json_exit_1(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        code = main(["train", "--config", str(path), "--out", str(tmp_path / "o")])
        assert code == 1

    def test_conflicting_config_sources_exit_1(self, tiny_config, tmp_path):
        code = main(["train", "--config", tiny_config, "--preset", "desk",
                     "--out", str(tmp_path / "o")])
        assert code == 1


class TestTrainCommand:
    def test_artifacts_and_manifest(self, trained_run):
        names = set(os.listdir(trained_run))
        assert names == {"checkpoint.json", "metrics.csv", "train-report.json",
                         "manifest.json"}
        manifest = json.load(open(os.path.join(trained_run, "manifest.json")))
        assert manifest["subcommand"] == "train"
        assert set(manifest["outputs"]) == names - {"manifest.json"}
        assert manifest["seeds"]["root"] == 1
        assert manifest["invocation"]["config"]["epochs"] == 2

    def test_method_and_seed_overrides(self, tmp_path, tiny_config):
        out = str(tmp_path / "o")
        assert main(["train", "--config", tiny_config, "--method", "gradreg",
                     "--seed", "9", "--out", out]) == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert manifest["invocation"]["config"]["method"] == "gradreg"
        assert manifest["seeds"]["root"] == 9

    def test_metrics_csv_parses(self, trained_run):
        lines = open(os.path.join(trained_run, "metrics.csv")).read().strip().split("\n")
        assert lines[0].startswith("epoch")
        assert len(lines) == 1 + TINY["epochs"]


class TestEvalAndAttack:
    def test_eval_report_table(self, tmp_path, tiny_config, trained_run):
        out = str(tmp_path / "eval")
        ckpt = os.path.join(trained_run, "checkpoint.json")
        assert main(["eval", "--config", tiny_config,
                     "--model", f"std={ckpt}", "--out", out]) == 0
        report = json.load(open(os.path.join(out, "report.json")))
        attacks = {r["attack"] for r in report["rows"]}
        assert attacks == {"clean", "fgsm", "pgd3", "mifgsm"}
        # the attack rows run with the config's random start and seed defaults
        assert report["configs"]["pgd3"]["random_start"] is True
        assert report["configs"]["pgd3"]["seed"] == 11
        text = open(os.path.join(out, "report.txt")).read()
        assert text.splitlines()[0].split()[0] == "model"
        assert "std" in text

    def test_eval_model_spec_validation(self, tiny_config, tmp_path):
        assert main(["eval", "--config", tiny_config, "--model", "nonsense",
                     "--out", str(tmp_path / "o")]) == 1

    def test_attack_report(self, tmp_path, tiny_config, trained_run):
        out = str(tmp_path / "atk")
        ckpt = os.path.join(trained_run, "checkpoint.json")
        assert main(["attack", "--config", tiny_config, "--checkpoint", ckpt,
                     "--attack", "fgsm", "--out", out]) == 0
        report = json.load(open(os.path.join(out, "report.json")))
        assert report["attack"] == "fgsm"
        assert report["n"] == TINY["data"]["test_n"]
        assert 0.0 <= report["accuracy"] <= 1.0


class TestSurfaceCommand:
    def test_surface_artifacts(self, tmp_path, tiny_config, trained_run):
        out = str(tmp_path / "surf")
        ckpt = os.path.join(trained_run, "checkpoint.json")
        assert main(["surface", "--config", tiny_config, "--checkpoint", ckpt,
                     "--index", "3", "--resolution", "21", "--out", out]) == 0
        sidecar = json.load(open(os.path.join(out, "surface.json")))
        assert sidecar["resolution"] == 21 and sidecar["center_index"] == 3
        csv_lines = open(os.path.join(out, "surface.csv")).read().strip().split("\n")
        assert len(csv_lines) == 22

    def test_bad_index_exit_1(self, tmp_path, tiny_config, trained_run):
        ckpt = os.path.join(trained_run, "checkpoint.json")
        assert main(["surface", "--config", tiny_config, "--checkpoint", ckpt,
                     "--index", "9999", "--out", str(tmp_path / "o")]) == 1


class TestVerifyCommand:
    def test_lemma1_report(self, tmp_path, capsys):
        out = str(tmp_path / "v")
        assert main(["verify", "--check", "lemma1", "--seed", "7", "--out", out]) == 0
        report = json.load(open(os.path.join(out, "report.json")))
        assert report["lemma1"]["passed"] is True
        assert report["lemma1"]["max_residual"] < 1e-12
        assert "lemma1: ok" in capsys.readouterr().out

    def test_lemma2_report(self, tmp_path):
        out = str(tmp_path / "v2")
        assert main(["verify", "--check", "lemma2", "--seed", "3", "--out", out]) == 0
        report = json.load(open(os.path.join(out, "report.json")))
        assert report["lemma2"]["violations"] == 0


class TestMakeDataCommand:
    def test_writes_standard_files(self, tmp_path):
        out = str(tmp_path / "data")
        assert main(["make-data", "--out", out, "--seed", "5",
                     "--train-n", "50", "--test-n", "20"]) == 0
        names = set(os.listdir(out))
        assert {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte",
                "manifest.json"} == names

    def test_bad_sizes_exit_1(self, tmp_path):
        assert main(["make-data", "--out", str(tmp_path / "d"),
                     "--train-n", "0"]) == 1

    def test_loadable_by_training(self, tmp_path, trained_run):
        data_dir = str(tmp_path / "data")
        assert main(["make-data", "--out", data_dir, "--seed", "3",
                     "--train-n", "120", "--test-n", "40"]) == 0
        cfg = dict(TINY)
        cfg["data"] = {"synthetic": False, "dir": data_dir, "seed": 3,
                       "train_n": 120, "test_n": 40}
        cfg_path = tmp_path / "disk.json"
        cfg_path.write_text(json.dumps(cfg))
        out = str(tmp_path / "run-disk")
        assert main(["train", "--config", str(cfg_path), "--out", out]) == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        assert len(manifest["inputs"]) == 5  # 4 IDX files + the config file
        # synthetic=true in-memory data equals the same corpus read from disk
        ck_mem = json.load(open(os.path.join(trained_run, "checkpoint.json")))
        ck_disk = json.load(open(os.path.join(out, "checkpoint.json")))
        assert ck_mem["layers"] == ck_disk["layers"]


class TestRerun:
    def test_train_rerun_reproduces(self, tmp_path, trained_run, capsys):
        manifest_path = os.path.join(trained_run, "manifest.json")
        before = {
            name: open(os.path.join(trained_run, name), "rb").read()
            for name in ("checkpoint.json", "metrics.csv", "train-report.json")
        }
        assert main(["rerun", manifest_path]) == 0
        out = capsys.readouterr().out
        assert out.count("reproduced") == 3 and "MISMATCH" not in out
        for name, blob in before.items():
            assert open(os.path.join(trained_run, name), "rb").read() == blob

    def test_rerun_detects_drift(self, tmp_path, trained_run, capsys):
        manifest_path = os.path.join(trained_run, "manifest.json")
        blob = json.load(open(manifest_path))
        blob["outputs"]["metrics.csv"] = "0" * 64
        json.dump(blob, open(manifest_path, "w"))
        assert main(["rerun", manifest_path]) == 2
        assert "MISMATCH" in capsys.readouterr().out

    def test_rerun_missing_manifest_exit_1(self, tmp_path):
        assert main(["rerun", str(tmp_path / "none.json")]) == 1


class TestThreadsFlag:
    def test_sets_environment(self, tmp_path, monkeypatch):
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)
        out = str(tmp_path / "d")
        assert main(["--threads", "2", "make-data", "--out", out,
                     "--train-n", "30", "--test-n", "10"]) == 0
        for var in cli._THREAD_VARS:
            assert os.environ[var] == "2"

    def test_rejects_nonpositive(self, capsys):
        assert main(["--threads", "0", "verify", "--check", "lemma1"]) == 1
