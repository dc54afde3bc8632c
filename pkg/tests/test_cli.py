import json
from pathlib import Path

import numpy as np
import pytest

from cropgraph import cli
from cropgraph.candidates import AnchorGrid
from cropgraph.model import CropScorer, ModelConfig
from cropgraph.synth import SynthSpec, synth_dataset


def run_cli(*args):
    return cli.main(list(args))


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    payload = {
        "model": {"d": 16, "layers": 1, "heads": 2, "n_proposals": 4,
                  "align_size": 3, "backbone_channels": 8, "disemb_dim": 8},
        "train": {"learning_rate": 1e-3, "epochs": 2,
                  "candidate_sample_k": 6, "seed": 5},
        "synth": {"image_w": 64, "image_h": 64,
                  "grid": {"bins": 6, "target_count": 16}},
    }
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory, small_config):
    out = tmp_path_factory.mktemp("data")
    code = run_cli("synth", "--out", str(out), "--n-images", "6",
                   "--seed", "3", "--config", small_config)
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, synth_dir, small_config):
    out = tmp_path_factory.mktemp("run")
    code = run_cli("train", "--manifest", str(synth_dir / "manifest.jsonl"),
                   "--out", str(out), "--config", small_config,
                   "--val-fraction", "0.34")
    assert code == 0
    return out


class TestSynthCommand:
    def test_outputs_exist(self, synth_dir):
        assert (synth_dir / "manifest.jsonl").exists()
        assert (synth_dir / "oracle.json").exists()
        assert (synth_dir / "config.json").exists()
        assert (synth_dir / "timings.json").exists()
        lines = (synth_dir / "manifest.jsonl").read_text().strip().splitlines()
        assert len(lines) == 6

    def test_deterministic_manifests(self, tmp_path, small_config):
        for sub in ("a", "b"):
            assert run_cli("synth", "--out", str(tmp_path / sub),
                           "--n-images", "4", "--seed", "9",
                           "--config", small_config) == 0
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
        assert a == b

    def test_records_validate(self, synth_dir):
        from cropgraph.training import read_manifest
        records = read_manifest(synth_dir / "manifest.jsonl")
        for rec in records:
            rec.validate()


class TestTrainCommand:
    def test_outputs(self, trained_dir):
        assert (trained_dir / "checkpoint.s2ck").exists()
        assert (trained_dir / "metrics.csv").exists()
        config = json.loads((trained_dir / "config.json").read_text())
        assert "checkpoint_sha256" in config
        import hashlib
        digest = hashlib.sha256(
            (trained_dir / "checkpoint.s2ck").read_bytes()).hexdigest()
        assert config["checkpoint_sha256"] == digest

    def test_metrics_schema(self, trained_dir):
        lines = (trained_dir / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_srcc,val_acc5,val_acc10"
        assert len(lines) == 3

    def test_missing_manifest_is_data_error(self, tmp_path):
        code = run_cli("train", "--manifest", str(tmp_path / "nope.jsonl"),
                       "--out", str(tmp_path / "out"))
        assert code == cli.EXIT_DATA


class TestCropCommand:
    def test_free_mode_top_k(self, synth_dir, trained_dir, capsys):
        img = next((synth_dir / "images").glob("*.png"))
        code = run_cli("crop", "--checkpoint",
                       str(trained_dir / "checkpoint.s2ck"),
                       "--image", str(img), "--top", "3")
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert len(payload["results"]) == 3
        ranks = [r["rank"] for r in payload["results"]]
        assert ranks == [1, 2, 3]
        scores = [r["score"] for r in payload["results"]]
        assert scores == sorted(scores, reverse=True)

    def test_ratio_mode_constrains_aspect(self, synth_dir, trained_dir, capsys):
        img = next((synth_dir / "images").glob("*.png"))
        code = run_cli("crop", "--checkpoint",
                       str(trained_dir / "checkpoint.s2ck"),
                       "--image", str(img), "--ratio", "16:9", "--top", "5")
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        r = 16.0 / 9.0
        for res in payload["results"]:
            x1, y1, x2, y2 = res["box"]
            assert abs((x2 - x1) / (y2 - y1) - r) / r < 1e-3

    def test_circle_mode_emits_circles(self, synth_dir, trained_dir, capsys):
        img = next((synth_dir / "images").glob("*.png"))
        code = run_cli("crop", "--checkpoint",
                       str(trained_dir / "checkpoint.s2ck"),
                       "--image", str(img), "--circle", "--top", "2")
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        for res in payload["results"]:
            cx, cy, radius = res["circle"]
            x1, y1, x2, y2 = res["box"]
            assert (x2 - x1) == pytest.approx(2 * radius)

    def test_top_one(self, synth_dir, trained_dir, capsys):
        img = next((synth_dir / "images").glob("*.png"))
        code = run_cli("crop", "--checkpoint",
                       str(trained_dir / "checkpoint.s2ck"),
                       "--image", str(img), "--top", "1")
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert len(payload["results"]) == 1
        assert payload["results"][0]["rank"] == 1

    def test_no_heuristic_without_proposals_fails(self, synth_dir,
                                                  trained_dir, capsys):
        img = next((synth_dir / "images").glob("*.png"))
        code = run_cli("crop", "--checkpoint",
                       str(trained_dir / "checkpoint.s2ck"),
                       "--image", str(img), "--no-heuristic")
        assert code == cli.EXIT_DATA


class TestEvalCommand:
    def test_report_files_and_schema(self, synth_dir, trained_dir, tmp_path):
        out = tmp_path / "eval"
        code = run_cli("eval", "--checkpoint",
                       str(trained_dir / "checkpoint.s2ck"),
                       "--manifest", str(synth_dir / "manifest.jsonl"),
                       "--out", str(out))
        assert code == 0
        summary = json.loads((out / "report.json").read_text())
        assert {"srcc_mean", "acc5", "acc10"} <= set(summary)
        assert (out / "scatter.csv").exists()
        timings = json.loads((out / "timings.json").read_text())
        assert timings["images_per_second"] > 0


class TestGradcheckCommand:
    def test_clean_run_passes(self, capsys):
        assert run_cli("gradcheck", "--tol", "1e-4") == 0
        out = capsys.readouterr().out
        assert "0 failed" in out

    def test_corrupt_injection_fails_named_check(self, capsys):
        assert run_cli("gradcheck", "--corrupt", "matmul") == cli.EXIT_NUMERIC
        out = capsys.readouterr().out
        assert "matmul" in out and "FAIL" in out

    def test_unknown_corrupt_name_is_usage_error(self):
        assert run_cli("gradcheck", "--corrupt", "florble") == cli.EXIT_USAGE


class TestBenchCommand:
    def test_reports_rate(self, synth_dir, trained_dir, capsys):
        code = run_cli("bench", "--manifest",
                       str(synth_dir / "manifest.jsonl"),
                       "--checkpoint", str(trained_dir / "checkpoint.s2ck"),
                       "--images", "3")
        assert code == 0
        assert "images/second" in capsys.readouterr().out


class TestUsageErrors:
    def test_no_command(self):
        assert run_cli() == cli.EXIT_USAGE

    def test_unknown_command(self):
        assert run_cli("frobnicate") == cli.EXIT_USAGE

    def test_bad_ratio_spec(self, synth_dir, trained_dir):
        img = next((synth_dir / "images").glob("*.png"))
        code = run_cli("crop", "--checkpoint",
                       str(trained_dir / "checkpoint.s2ck"),
                       "--image", str(img), "--ratio", "sixteen-nine")
        assert code == cli.EXIT_USAGE


class TestCheckpointRoundTrip:
    def test_bit_exact(self, tmp_path):
        cfg = ModelConfig(d=16, layers=1, heads=2, n_proposals=3,
                          align_size=3, backbone_channels=8)
        model = CropScorer(cfg, seed=8)
        p1 = tmp_path / "a.s2ck"
        p2 = tmp_path / "b.s2ck"
        model.save(p1)
        CropScorer.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()
        with open(p1, "rb") as fh:
            assert fh.read(4) == b"S2CK"

    def test_load_restores_config(self, tmp_path):
        cfg = ModelConfig(d=16, layers=1, heads=2, n_proposals=3,
                          align_size=3, backbone_channels=8,
                          spatial_variant="disdrop", eps=0.3)
        model = CropScorer(cfg, seed=9)
        model.save(tmp_path / "m.s2ck")
        back = CropScorer.load(tmp_path / "m.s2ck")
        assert back.config == cfg
