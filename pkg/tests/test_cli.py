"""CLI wiring: every subcommand end to end on a tiny dataset."""

import json

import pytest

from segprompt.cli import run_command
from segprompt.synth import load_manifest

TINY_CONFIG = {
    "train": {"epochs": 1, "base_lr": 1e-3, "batch_size": 2, "max_steps": 2,
              "strategy": "SS", "single_view": True, "precision": "float64"},
    "model": {"encoder": {"image_size": 32, "patch_size": 16, "depth": 2, "dim": 12,
                          "heads": 2, "tap_layers": [1, 2]},
              "extractor": {"dim": 12, "tap_layers": [1, 2], "spatial_side": 8,
                            "mlp_depth": 2},
              "lm_dim": 12, "lm_depth": 1, "lm_heads": 2, "max_seq_len": 160,
              "seed": 0},
}

SYNTH_SPEC = {"seed": 5, "n_studies": 10, "image_size": 32,
              "heart_area_threshold": 50, "lateral_prob": 0.2, "prior_prob": 0.3}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "spec.json"
    spec_path.write_text(json.dumps(SYNTH_SPEC))
    data = root / "data"
    assert run_command(["gen-data", "--spec", str(spec_path), "--out", str(data)]) == 0
    return data


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    cfg = root / "train.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    out = root / "run"
    code = run_command(["train", "--data", str(dataset), "--config", str(cfg),
                        "--out", str(out)])
    assert code == 0
    return out


class TestUsage:
    def test_unknown_subcommand_exits_2(self):
        assert run_command(["frobnicate"]) == 2

    def test_unknown_flag_exits_2(self):
        assert run_command(["gen-data", "--bogus", "x"]) == 2

    def test_bad_som_style_exits_2(self, dataset, tmp_path):
        assert run_command(["render-som", "--data", str(dataset), "--out",
                            str(tmp_path / "o"), "--som-style", "none"]) == 2

    def test_missing_data_is_runtime_error(self, tmp_path):
        assert run_command(["build-prompt", "--data", str(tmp_path / "nope"),
                            "--study", "study_00000"]) == 1


class TestGenData:
    def test_manifest_written(self, dataset):
        manifest, records = load_manifest(dataset)
        assert len(records) == 10
        assert manifest["spec"]["seed"] == 5


class TestBuildPrompt:
    def test_dump_structure(self, dataset, tmp_path):
        out = tmp_path / "prompt.json"
        code = run_command(["build-prompt", "--data", str(dataset),
                            "--study", "study_00000", "--strategy", "SS",
                            "--out", str(out)])
        assert code == 0
        segments = json.loads(out.read_text())
        assert segments[0]["role"] == "system"
        assert any(s["type"] == "image" for s in segments)

    def test_unknown_study(self, dataset):
        assert run_command(["build-prompt", "--data", str(dataset),
                            "--study", "study_99999"]) == 1


class TestExtractTokens:
    def test_dump_pairs(self, dataset, tmp_path):
        out = tmp_path / "tokens.json"
        code = run_command(["extract-tokens", "--data", str(dataset),
                            "--study", "study_00000", "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert "current_frontal" in payload
        first = payload["current_frontal"][0]
        assert set(first) == {"structure", "mask_token", "spatial_token"}
        assert len(first["mask_token"]) == 64  # default extractor width


class TestRenderSom:
    def test_overlay_dataset(self, dataset, tmp_path):
        out = tmp_path / "som"
        code = run_command(["render-som", "--data", str(dataset), "--out", str(out),
                            "--som-style", "contours+marks"])
        assert code == 0
        manifest, records = load_manifest(out)
        assert manifest["som_style"]["contours"] is True
        entry = records[0].views["current_frontal"]
        assert "legend" in entry
        assert (out / entry["image"]).exists()
        assert (out / entry["image"].replace(".pgm", ".legend.json")).exists()
        legend = entry["legend"]
        assert len(legend) == len(entry["masks"])

    def test_empty_mask_study_identical(self, tmp_path):
        spec = dict(SYNTH_SPEC, n_studies=2, lateral_prob=0.0, prior_prob=0.0,
                    structure_probs={"heart": 0.0})
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        data = tmp_path / "data"
        som = tmp_path / "som"
        assert run_command(["gen-data", "--spec", str(spec_path),
                            "--out", str(data)]) == 0
        assert run_command(["render-som", "--data", str(data), "--out", str(som)]) == 0
        _, records = load_manifest(som)
        rel = records[0].views["current_frontal"]["image"]
        assert (data / rel).read_bytes() == (som / rel).read_bytes()

    def test_deterministic(self, dataset, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_command(["render-som", "--data", str(dataset),
                                "--out", str(out)]) == 0
        rel = load_manifest(a)[1][0].views["current_frontal"]["image"]
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


class TestTrainGenerateEval:
    def test_artifacts(self, checkpoint):
        assert (checkpoint / "model.ckpt").exists()
        assert (checkpoint / "train_config.json").exists()
        assert (checkpoint / "loss_curve.csv").exists()

    def test_generate_prints_text(self, dataset, checkpoint, capsys):
        code = run_command(["generate", "--data", str(dataset), "--ckpt",
                            str(checkpoint), "--study", "study_00000",
                            "--max-new", "6"])
        assert code == 0
        out = capsys.readouterr().out
        assert isinstance(out, str)

    def test_eval_report(self, dataset, checkpoint, tmp_path):
        report_path = tmp_path / "report.json"
        code = run_command(["eval", "--data", str(dataset), "--ckpt", str(checkpoint),
                            "--report", str(report_path), "--split", "test",
                            "--max-new", "8"])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["n"] == 1
        for key in ("bleu4", "rouge_l", "macro_f1_mr", "micro_f1_mr"):
            entry = report["metrics"][key]
            assert set(entry) == {"median", "ci_low", "ci_high"}
        assert report["conventions"]["bleu"]["smoothing"] == "none"
