"""End-to-end command-line behavior: configs, artifacts, exit codes."""

import copy
import csv
import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from grucnn import analysis, checkpoint, cli, train

TINY_MODEL = {
    "name": "tinynet",
    "input_channels": 3,
    "input_size": 8,
    "layers": [
        {"kind": "conv", "width": 6},
        {"kind": "max_pool"},
        {"kind": "batch_norm"},
        {"kind": "dropout", "rate": 0.25},
        {"kind": "flatten"},
        {"kind": "softmax_head", "width": 10, "in_features": 96},
    ],
}


def base_config(out):
    return {
        "dataset": {"kind": "toyset", "n_per_class": 3, "test_per_class": 2,
                    "image_size": 8},
        "model": copy.deepcopy(TINY_MODEL),
        "train": {"learning_rate": 1e-3, "lr_decay": 1e-6, "batch_size": 10,
                  "epochs": 1, "frames": 3, "snr_set": [64.0, 1.0],
                  "seeds": 2, "base_seed": 0},
        "test": {"frames": 4, "repetitions": 2, "snr_set": [64.0, 1.0],
                 "items": 10},
        "out": out,
        "seed": 7,
    }


def write_config(tmp_path, cfg=None, name="config.json", **edits):
    cfg = cfg if cfg is not None else base_config(str(tmp_path / "run"))
    for key, value in edits.items():
        cfg[key] = value
    path = str(tmp_path / name)
    with open(path, "w") as f:
        json.dump(cfg, f)
    return path, cfg


class TestUsage:
    def test_no_command(self):
        assert cli.main([]) == 1

    def test_unknown_command(self):
        assert cli.main(["frobnicate", "--config", "x.json"]) == 1

    def test_missing_config_flag(self):
        assert cli.main(["train"]) == 1

    def test_config_file_absent(self, capsys):
        assert cli.main(["train", "--config", "/no/such/file.json"]) == 1
        assert "not found" in capsys.readouterr().err

    def test_config_not_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert cli.main(["train", "--config", str(bad)]) == 1

    def test_unknown_model_preset(self, tmp_path, capsys):
        path, _ = write_config(tmp_path, model="resnet50")
        assert cli.main(["train", "--config", path]) == 1
        assert "unknown model preset" in capsys.readouterr().err

    def test_unknown_config_key(self, tmp_path):
        path, _ = write_config(tmp_path, turbo=True)
        assert cli.main(["train", "--config", path]) == 1

    def test_bad_jobs(self, tmp_path):
        path, _ = write_config(tmp_path)
        assert cli.main(["train", "--config", path, "--jobs", "0"]) == 1

    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--help"])
        assert exc.value.code == 0


class TestGenerate:
    def test_writes_archives_and_stats(self, tmp_path, capsys):
        path, cfg = write_config(tmp_path)
        assert cli.main(["generate", "--config", path]) == 0
        out = capsys.readouterr().out
        assert out.count("sha256=") == 2
        assert "before normalization" in out and "after normalization" in out
        run = cfg["out"]
        assert os.path.exists(os.path.join(run, "data", "train.toys"))
        assert os.path.exists(os.path.join(run, "data", "test.toys"))
        with open(os.path.join(run, "config.json")) as f:
            resolved = json.load(f)
        assert resolved["seed"] == 7 and resolved["precision"] == 32

    def test_regeneration_is_deterministic(self, tmp_path, capsys):
        path, cfg = write_config(tmp_path)
        assert cli.main(["generate", "--config", path]) == 0
        first = capsys.readouterr().out
        assert cli.main(["generate", "--config", path]) == 0
        assert capsys.readouterr().out == first

    def test_seed_override_changes_data_and_config(self, tmp_path, capsys):
        path, cfg = write_config(tmp_path)
        assert cli.main(["generate", "--config", path]) == 0
        first = capsys.readouterr().out
        assert cli.main(["generate", "--config", path, "--seed", "9"]) == 0
        second = capsys.readouterr().out
        assert first != second
        with open(os.path.join(cfg["out"], "config.json")) as f:
            assert json.load(f)["seed"] == 9

    def test_truncated_cifar_file_exits_2(self, tmp_path, capsys):
        blob = tmp_path / "data_batch_1.bin"
        blob.write_bytes(b"\x01" + b"\x00" * 3072 + b"\x02" * 10)
        cfg = base_config(str(tmp_path / "run"))
        cfg["dataset"] = {"kind": "cifar10", "files": [str(blob)],
                          "test_files": [str(blob)]}
        path, _ = write_config(tmp_path, cfg=cfg)
        assert cli.main(["generate", "--config", path]) == 2
        assert "byte offset" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_and_log_per_seed(self, tmp_path, capsys):
        path, cfg = write_config(tmp_path)
        assert cli.main(["train", "--config", path]) == 0
        run = cfg["out"]
        for k in range(2):
            ck = os.path.join(run, "checkpoints", f"tinynet__s{k}.ckpt")
            lg = os.path.join(run, "logs", f"train_tinynet__s{k}.csv")
            assert os.path.exists(ck), ck
            rows = train.read_log(lg)
            assert len(rows) == 3 and rows[-1]["epoch"] == 0
        out = capsys.readouterr().out
        assert out.count("checkpoint ") == 2

    def test_identical_configs_give_identical_checkpoints(self, tmp_path):
        blobs = []
        for sub in ("a", "b"):
            cfg = base_config(str(tmp_path / sub))
            cfg["train"]["seeds"] = 1
            path, _ = write_config(tmp_path, cfg=cfg, name=f"{sub}.json")
            assert cli.main(["train", "--config", path, "--precision", "64"]) == 0
            with open(os.path.join(cfg["out"], "checkpoints", "tinynet__s0.ckpt"), "rb") as f:
                blobs.append(f.read())
        assert blobs[0] == blobs[1]

    def test_resume_matches_straight_run(self, tmp_path):
        # interrupted: one epoch, then resume to two
        cfg = base_config(str(tmp_path / "resumed"))
        cfg["train"]["seeds"] = 1
        path1, _ = write_config(tmp_path, cfg=cfg, name="one.json")
        assert cli.main(["train", "--config", path1, "--precision", "64"]) == 0
        cfg2 = copy.deepcopy(cfg)
        cfg2["train"]["epochs"] = 2
        path2, _ = write_config(tmp_path, cfg=cfg2, name="two.json")
        assert cli.main(["train", "--config", path2, "--precision", "64",
                         "--resume"]) == 0

        # uninterrupted: two epochs from scratch
        cfg3 = copy.deepcopy(cfg2)
        cfg3["out"] = str(tmp_path / "straight")
        path3, _ = write_config(tmp_path, cfg=cfg3, name="three.json")
        assert cli.main(["train", "--config", path3, "--precision", "64"]) == 0

        a = checkpoint.load_checkpoint(
            os.path.join(cfg["out"], "checkpoints", "tinynet__s0.ckpt"))
        b = checkpoint.load_checkpoint(
            os.path.join(cfg3["out"], "checkpoints", "tinynet__s0.ckpt"))
        assert a.epoch == b.epoch == 2
        for (name, ta), (_, tb) in zip(a.model.parameters(), b.model.parameters()):
            np.testing.assert_array_equal(ta.data, tb.data, err_msg=name)

    def test_divergence_exits_3(self, tmp_path, capsys):
        cfg = base_config(str(tmp_path / "run"))
        # big enough that activations overflow float32 on the next forward
        cfg["train"].update(learning_rate=1e20, epochs=2, seeds=1)
        # no batch norm: nothing to rein the blown-up activations back in
        cfg["model"]["layers"] = [
            {"kind": "conv", "width": 6},
            {"kind": "max_pool"},
            {"kind": "flatten"},
            {"kind": "softmax_head", "width": 10, "in_features": 96},
        ]
        path, _ = write_config(tmp_path, cfg=cfg)
        assert cli.main(["train", "--config", path]) == 3
        assert "diverged" in capsys.readouterr().err

    def test_parallel_jobs_match_serial(self, tmp_path):
        blobs = []
        for sub, jobs in (("serial", "1"), ("parallel", "2")):
            cfg = base_config(str(tmp_path / sub))
            path, _ = write_config(tmp_path, cfg=cfg, name=f"{sub}.json")
            assert cli.main(["train", "--config", path, "--precision", "64",
                             "--jobs", jobs]) == 0
            pair = []
            for k in range(2):
                with open(os.path.join(cfg["out"], "checkpoints",
                                       f"tinynet__s{k}.ckpt"), "rb") as f:
                    pair.append(f.read())
            blobs.append(pair)
        assert blobs[0] == blobs[1]


class TestEval:
    def _trained(self, tmp_path, precision="32", seeds=1):
        cfg = base_config(str(tmp_path / "run"))
        cfg["train"]["seeds"] = seeds
        path, cfg = write_config(tmp_path, cfg=cfg)
        assert cli.main(["train", "--config", path, "--precision", precision]) == 0
        return path, cfg

    def test_tables_have_protocol_shape(self, tmp_path):
        path, cfg = self._trained(tmp_path)
        assert cli.main(["eval", "--config", path]) == 0
        for snr in ("64.0", "1.0"):
            tp = os.path.join(cfg["out"], "tables", f"tinynet__s0__snr{snr}.csv")
            table = analysis.PredictionTable.load_csv(tp, model="tinynet")
            assert table.probs.shape == (10, 2, 4, 10)
            assert_allclose(table.probs.sum(-1), 1.0, atol=1e-5)
            assert set(table.snrs) == {float(snr)}

    def test_eval_is_deterministic(self, tmp_path):
        path, cfg = self._trained(tmp_path)
        tp = os.path.join(cfg["out"], "tables", "tinynet__s0__snr1.0.csv")
        assert cli.main(["eval", "--config", path]) == 0
        with open(tp, "rb") as f:
            first = f.read()
        assert cli.main(["eval", "--config", path]) == 0
        with open(tp, "rb") as f:
            assert f.read() == first

    def test_checkpoint_architecture_mismatch_exits_2(self, tmp_path, capsys):
        path, cfg = self._trained(tmp_path)
        cfg2 = copy.deepcopy(cfg)
        cfg2["model"]["layers"][0]["width"] = 4
        cfg2["model"]["layers"][-1]["in_features"] = 64
        path2, _ = write_config(tmp_path, cfg=cfg2, name="other.json")
        assert cli.main(["eval", "--config", path2]) == 2
        assert "architecture" in capsys.readouterr().err

    def test_missing_checkpoint_exits_2(self, tmp_path):
        path, cfg = write_config(tmp_path)
        assert cli.main(["eval", "--config", path]) == 2

    def test_precision_64_survives_into_checkpoint(self, tmp_path):
        path, cfg = self._trained(tmp_path, precision="64")
        bundle = checkpoint.load_checkpoint(
            os.path.join(cfg["out"], "checkpoints", "tinynet__s0.ckpt"))
        assert bundle.model.dtype == np.float64


class TestReport:
    def test_full_pipeline_report(self, tmp_path, capsys):
        cfg = base_config(str(tmp_path / "run"))
        cfg["train"]["seeds"] = 1
        path, cfg = write_config(tmp_path, cfg=cfg)
        assert cli.main(["train", "--config", path]) == 0
        assert cli.main(["eval", "--config", path]) == 0
        assert cli.main(["report", "--config", path]) == 0
        capsys.readouterr()

        report_dir = os.path.join(cfg["out"], "report")
        with open(os.path.join(report_dir, "report.json")) as f:
            report = json.load(f)
        jsonschema = pytest.importorskip("jsonschema")
        jsonschema.validate(report, analysis.REPORT_SCHEMA)
        assert "tinynet" in report["accuracy_curves"]
        assert set(report["accuracy_curves"]["tinynet"]) == {"64.0", "1.0"}

        for sidecar in ("accuracy_curves", "last_frame_accuracy",
                        "difference_curves", "exp_fits", "rejection_rates",
                        "reliability", "calibration", "cdf"):
            with open(os.path.join(report_dir, f"{sidecar}.csv"), newline="") as f:
                rows = list(csv.DictReader(f))
            if sidecar != "difference_curves":   # single model: no pairs
                assert rows, f"{sidecar}.csv is empty"

    def test_report_without_tables_exits_2(self, tmp_path):
        path, _ = write_config(tmp_path)
        assert cli.main(["report", "--config", path]) == 2

    def test_report_difference_against_recomputed_curves(self, tmp_path):
        """Two models sharing one out dir: the report's difference curve
        must equal the curves it publishes, recomputed independently."""
        out = str(tmp_path / "run")
        for model in ("grucnn", "ccnn"):
            cfg = base_config(out)
            cfg["model"] = copy.deepcopy(TINY_MODEL)
            cfg["model"]["name"] = model
            cfg["train"]["seeds"] = 1
            path, _ = write_config(tmp_path, cfg=cfg, name=f"{model}.json")
            assert cli.main(["train", "--config", path]) == 0
            assert cli.main(["eval", "--config", path]) == 0
        assert cli.main(["report", "--config", path]) == 0
        with open(os.path.join(out, "report", "report.json")) as f:
            report = json.load(f)
        pair = "grucnn-minus-ccnn+bayes"
        assert pair in report["difference_curves"]
        for snr, diff in report["difference_curves"][pair].items():
            raw = report["accuracy_curves"]["grucnn"][snr]["raw"]
            bay = report["accuracy_curves"]["ccnn"][snr]["bayes"]
            assert_allclose(diff, np.subtract(raw, bay), atol=1e-9)
