import csv
import json

import numpy as np
import pytest
import yaml
from PIL import Image

from maskrecon.cli import main

from conftest import tiny_run_mapping


def fast_cli_config(tmp_path, toy_root):
    """Config file for a deliberately small CLI run (2 epochs, width 64)."""
    mapping = tiny_run_mapping(
        toy_root,
        **{
            "data.resize_to": 64, "data.crop_to": 64,
            "encoder.width": 64, "encoder.depth": 1, "encoder.heads": 2,
            "teacher.toy_channels": [8, 12, 16],
            "train.epochs": 2, "train.batch_size": 4,
        },
    )
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(mapping))
    return path


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory, toy_small_root):
    """One trained CLI run shared by the evaluate/predict/bench tests."""
    base = tmp_path_factory.mktemp("cli")
    cfg = fast_cli_config(base, toy_small_root)
    rc = main(["train", "--config", str(cfg), "--out", str(base / "train")])
    assert rc == 0
    return base, cfg


class TestTrainCommand:
    def test_artifacts_and_metadata(self, cli_workspace):
        base, _ = cli_workspace
        out = base / "train"
        assert (out / "checkpoint.pt").exists()
        assert (out / "checkpoint.json").exists()
        assert (out / "losses.csv").exists()
        assert (out / "resolved_config.yaml").exists()
        meta = json.loads((out / "run_meta.json").read_text())
        assert {"seed", "code_version"} <= set(meta)


class TestEvaluateCommand:
    def test_report_schema(self, cli_workspace):
        base, cfg = cli_workspace
        rc = main([
            "evaluate", "--config", str(cfg),
            "--checkpoint", str(base / "train" / "checkpoint.pt"),
            "--out", str(base / "eval"),
        ])
        assert rc == 0
        report = json.loads((base / "eval" / "report.json").read_text())
        assert 0.0 <= report["sample_auroc"] <= 1.0
        for metrics in report["per_domain"].values():
            if metrics["sample_auroc"] is not None:
                assert 0.0 <= metrics["sample_auroc"] <= 1.0
        with open(base / "eval" / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows[-1]["domain"] == "mean"

    def test_evaluate_is_reproducible(self, cli_workspace):
        base, cfg = cli_workspace
        args = ["evaluate", "--config", str(cfg),
                "--checkpoint", str(base / "train" / "checkpoint.pt")]
        assert main(args + ["--out", str(base / "eval_a")]) == 0
        assert main(args + ["--out", str(base / "eval_b")]) == 0
        assert (base / "eval_a" / "report.json").read_bytes() == \
            (base / "eval_b" / "report.json").read_bytes()


class TestPredictCommand:
    def test_heatmap_png_and_sidecar(self, cli_workspace, toy_small_root):
        base, cfg = cli_workspace
        image = next((toy_small_root / "test").rglob("*.png"))
        rc = main([
            "predict", "--config", str(cfg),
            "--checkpoint", str(base / "train" / "checkpoint.pt"),
            "--out", str(base / "pred"), "--images", str(image),
        ])
        assert rc == 0
        png = base / "pred" / f"{image.stem}_heatmap.png"
        sidecar = json.loads(png.with_suffix(".json").read_text())
        assert {"score", "min", "max"} <= set(sidecar)
        arr = np.asarray(Image.open(png))
        assert arr.dtype == np.uint8
        assert arr.shape == (64, 64, 3)


class TestToygenCommand:
    def test_writes_loadable_corpus(self, tmp_path):
        rc = main([
            "toygen", "--out", str(tmp_path / "corpus"),
            "toy.n_train=2", "toy.n_test_normal=2", "toy.n_test_anomalous=2",
            "toy.image_size=64", "toy.seed=5",
        ])
        assert rc == 0
        assert (tmp_path / "corpus" / "train" / "good" / "0000.png").exists()


class TestSweepCommand:
    def test_axis_grid_produces_merged_table(self, tmp_path, toy_small_root):
        cfg = fast_cli_config(tmp_path, toy_small_root)
        rc = main([
            "sweep", "--config", str(cfg),
            "--axis", "masking.ratio=0,0.4,0.9",
            "--out", str(tmp_path / "sweep"),
        ])
        assert rc == 0
        with open(tmp_path / "sweep" / "merged_results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert [r["masking.ratio"] for r in rows] == ["0", "0.4", "0.9"]
        run_dirs = [p for p in (tmp_path / "sweep").iterdir() if p.is_dir()]
        assert len(run_dirs) == 3


class TestBenchCommand:
    def test_reports_positive_throughput(self, cli_workspace, capsys):
        base, cfg = cli_workspace
        rc = main([
            "bench", "--config", str(cfg),
            "--checkpoint", str(base / "train" / "checkpoint.pt"),
            "--n-images", "4",
        ])
        assert rc == 0
        out = json.loads(capsys.readouterr().out)
        assert out["images_per_second"] > 0
        assert "hardware" in out


class TestExitCodes:
    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_config_validation_failure_exits_3(self, tmp_path, capsys):
        rc = main(["toygen", "--out", str(tmp_path / "x"), "masking.ratio=2.0"])
        assert rc == 3
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "ConfigError"
        assert "masking.ratio" in err["message"]

    def test_runtime_failure_exits_1(self, tmp_path, capsys):
        rc = main([
            "train", "--out", str(tmp_path / "x"),
            "data.root=/nonexistent", "data.layout=aebad",
            "teacher.family=toy_cnn", "teacher.weights=random",
            "encoder.variant=vit_tiny_scratch", "encoder.width=64",
            "encoder.depth=1", "encoder.heads=2",
            "data.resize_to=64", "data.crop_to=64",
        ])
        assert rc == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "FileNotFoundError"
