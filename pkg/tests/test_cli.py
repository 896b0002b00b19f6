"""CLI contract: subcommands, exit codes, presets, byte-identical reruns."""

import json
import os

import numpy as np
import pytest

from ralab import analysis, cli
from ralab.errors import SchemaError
from ralab.util import read_csv

TINY = {
    "seed": 5,
    "acquisition": "random",
    "mode": "robust",
    "budget": 120,
    "initial": 40,
    "per_stage": 40,
    "dataset": {"kind": "blobs", "classes": 4, "per_class": 100, "dim": 16,
                "spread": 0.08, "test_fraction": 0.3},
    "model": {"kind": "mlp", "hidden": [32], "dropout": 0.1},
    "train": {"epochs_per_stage": 4, "initial_epochs": 4},
    "train_attack": {"family": "pgd", "epsilon": 0.1, "alpha": 0.02, "iters": 4},
    "eval_pgd": {"family": "pgd", "epsilon": 0.1, "alpha": 0.02, "iters": 8},
    "eval_square": {"family": "square", "epsilon": 0.1, "iters": 20},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(*argv):
    return cli.main(list(argv))


class TestConfig:
    def test_missing_seed_is_schema_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"acquisition": "random"}))
        with pytest.raises(SchemaError, match="seed"):
            cli.load_config(str(path))

    def test_unknown_field_is_named(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"seed": 1, "optimizerr": "sgd"}))
        with pytest.raises(SchemaError, match="optimizerr"):
            cli.load_config(str(path))

    def test_parse_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert run("al", "--config", str(path), "--out", str(tmp_path / "o")) == 2

    def test_mnist_preset_expands_table_values(self):
        cfg = cli.config_from_dict({"preset": "mnist", "seed": 1})
        assert (cfg.budget, cfg.initial, cfg.per_stage) == (5000, 200, 200)
        assert cfg.stage_count() == 24
        assert cfg.model["kind"] == "cnn"
        from ralab.attacks import resolve_attack

        eva = resolve_attack(cfg.eval_pgd)
        assert (eva.epsilon, eva.alpha, eva.iters) == (0.3, 0.01, 50)
        tra = resolve_attack(cfg.train_attack)
        assert (tra.epsilon, tra.alpha, tra.iters) == (0.3, 0.01, 40)

    def test_fashion_preset(self):
        cfg = cli.config_from_dict({"preset": "fashion-mnist", "seed": 1})
        assert cfg.stage_count() == 29

    def test_desk_presets(self):
        cfg = cli.config_from_dict({"preset": "digits-desk", "seed": 1})
        assert (cfg.budget, cfg.initial, cfg.per_stage) == (1000, 100, 100)
        assert cfg.stage_count() == 9
        mnist_desk = cli.config_from_dict({"preset": "mnist-desk", "seed": 1})
        assert mnist_desk.dataset.get("subset") == 6000

    def test_explicit_keys_override_preset(self):
        cfg = cli.config_from_dict({"preset": "digits-desk", "seed": 1, "budget": 300})
        assert cfg.budget == 300


class TestDispatch:
    def test_al_writes_stages_and_manifest(self, tiny_config, tmp_path):
        out = tmp_path / "run"
        assert run("al", "--config", tiny_config, "--out", str(out)) == 0
        header, rows = read_csv(out / "stages.csv")
        assert header[:2] == ["stage", "labeled"]
        assert len(rows) == 3
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["tool"] == "ralab"
        listed = {e["path"] for e in manifest["outputs"]}
        assert "stages.csv" in listed

    def test_unknown_acquisition_exits_2_and_lists_names(self, tiny_config, tmp_path, capsys):
        code = run("al", "--config", tiny_config, "--acquisition", "zzz",
                   "--out", str(tmp_path / "x"))
        assert code == 2
        err = capsys.readouterr().err
        for name in ("maxentropy", "dre", "coreset", "random"):
            assert name in err

    def test_unknown_command_exits_2(self):
        assert run("frobnicate") == 2

    def test_stats_matches_direct_wilcoxon(self, tiny_config, tmp_path, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        assert run("al", "--config", tiny_config, "--out", str(a)) == 0
        assert run("al", "--config", tiny_config, "--acquisition", "maxentropy",
                   "--out", str(b)) == 0
        assert run("stats", "--a", str(a / "stages.csv"), "--b", str(b / "stages.csv"),
                   "--column", "rob_pgd", "--out", str(tmp_path)) == 0
        printed = capsys.readouterr().out
        ha, ra = read_csv(a / "stages.csv")
        hb, rb = read_csv(b / "stages.csv")
        col = ha.index("rob_pgd")
        w, p, n = analysis.wilcoxon_signed_rank(
            np.array([float(r[col]) for r in ra]), np.array([float(r[col]) for r in rb])
        )
        assert f"W={w:.1f}" in printed and f"n={n}" in printed
        header, rows = read_csv(tmp_path / "stats.csv")
        assert rows[-1][3] == f"{w:.1f}"

    def test_repeats_run_consecutive_seeds(self, tiny_config, tmp_path):
        out = tmp_path / "multi"
        fast = json.loads(open(tiny_config).read())
        fast["budget"] = 80
        cfgp = tmp_path / "fast.json"
        cfgp.write_text(json.dumps(fast))
        assert run("al", "--config", str(cfgp), "--repeats", "2", "--out", str(out)) == 0
        assert (out / "seed_5" / "stages.csv").exists()
        assert (out / "seed_6" / "stages.csv").exists()

    def test_report_merges_runs(self, tiny_config, tmp_path):
        a = tmp_path / "a"
        assert run("al", "--config", tiny_config, "--out", str(a)) == 0
        assert run("report", "--runs", str(a), "--out", str(tmp_path / "rep")) == 0
        header, rows = read_csv(tmp_path / "rep" / "summary.csv")
        assert rows[0][0] == "random"

    def test_attack_eval_on_final_checkpoint(self, tiny_config, tmp_path):
        a = tmp_path / "a"
        assert run("al", "--config", tiny_config, "--out", str(a)) == 0
        assert run("attack-eval", "--checkpoint", str(a / "model"),
                   "--config", tiny_config, "--out", str(tmp_path / "ae")) == 0
        header, rows = read_csv(tmp_path / "ae" / "attack_eval.csv")
        stage_header, stage_rows = read_csv(a / "stages.csv")
        # the checkpoint is the final model: robustness must match the last record
        assert rows[0][3] == stage_rows[-1][stage_header.index("rob_pgd")]


class TestReproducibility:
    def test_al_and_bias_and_retrain_are_byte_identical(self, tiny_config, tmp_path):
        files = {}
        for tag in ("one", "two"):
            base = tmp_path / tag
            r1 = base / "r1"
            r2 = base / "r2"
            assert run("al", "--config", tiny_config, "--out", str(r1)) == 0
            assert run("al", "--config", tiny_config, "--acquisition", "maxentropy",
                       "--out", str(r2)) == 0
            assert run("bias", "--runs", str(r1), str(r2), "--out", str(base / "bias")) == 0
            assert run("retrain", "--config", tiny_config, "--acquisitions", "dre",
                       "--fractions", "0.0,0.04", "--pretrain-epochs", "4",
                       "--retrain-epochs", "2", "--out", str(base / "rt")) == 0
            files[tag] = {
                "stages": (r1 / "stages.csv").read_bytes(),
                "bias": (base / "bias" / "bias.csv").read_bytes(),
                "correlation": (base / "bias" / "correlation.csv").read_bytes(),
                "retrain": (base / "rt" / "retrain.csv").read_bytes(),
            }
        assert files["one"] == files["two"]
