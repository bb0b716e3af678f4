"""CLI subcommand behavior: outputs, determinism, exit codes, figures."""

import json

import numpy as np
import pytest

from cxrseg import data
from cxrseg.cli import main
from cxrseg.models import ModelConfig, build_model


def run_cli(capsys, *argv) -> tuple[int, str]:
    code = main(list(argv))
    return code, capsys.readouterr().out


class TestCi:
    def test_published_lung_iou_radius(self, capsys):
        code, out = run_cli(capsys, "ci", "--metric", "0.9611", "--n", "6788")
        assert code == 0
        assert out.strip() == "0.0046"

    def test_certainty(self, capsys):
        code, out = run_cli(capsys, "ci", "--metric", "1.0", "--n", "1166")
        assert out.strip() == "0.0000"

    def test_out_of_range_metric_fails(self, capsys):
        code, _ = run_cli(capsys, "ci", "--metric", "1.5", "--n", "10")
        assert code == 1


class TestSynth:
    def test_deterministic_reruns(self, tmp_path, capsys):
        code, _ = run_cli(capsys, "synth", "--n", "2", "--size", "32",
                          "--seed", "7", "--out", str(tmp_path / "a"))
        assert code == 0
        run_cli(capsys, "synth", "--n", "2", "--size", "32",
                "--seed", "7", "--out", str(tmp_path / "b"))
        files_a = sorted((tmp_path / "a").iterdir())
        files_b = sorted((tmp_path / "b").iterdir())
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            if fa.suffix == ".pgm":
                assert fa.read_bytes() == fb.read_bytes()


class TestUsageErrors:
    def test_unknown_subcommand_exit_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_exit_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["ci", "--metric", "0.5", "--n", "10", "--bogus"])
        assert exc.value.code == 2

    def test_missing_file_exit_1(self, capsys, tmp_path):
        code, _ = run_cli(capsys, "infer", "--weights", str(tmp_path / "no.segw"),
                          "--manifest", str(tmp_path / "no.tsv"), "--out", str(tmp_path))
        assert code == 1


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    manifest = data.synth_generate(3, 32, seed=5, out_dir=root)
    return manifest


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("trained")
    code = main([
        "train", "--manifest", str(dataset), "--kind", "lung",
        "--depth", "2", "--base-channels", "4", "--max-epochs", "2",
        "--out", str(out), "--seed", "3",
    ])
    assert code == 0
    return out


class TestTrain:
    def test_outputs_exist(self, trained):
        assert (trained / "weights.segw").exists()
        assert (trained / "history.tsv").exists()
        assert (trained / "curves.png").exists()

    def test_history_tsv_shape(self, trained):
        lines = (trained / "history.tsv").read_text().strip().splitlines()
        assert lines[0].startswith("epoch\t")
        assert len(lines) == 3  # header + 2 epochs

    def test_config_file_supplies_defaults(self, tmp_path, dataset, capsys):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[model]\narch = fpn\ndepth = 2\nbase_channels = 4\n\n[train]\nmax_epochs = 1\n")
        out = tmp_path / "run"
        code, _ = run_cli(capsys, "train", "--manifest", str(dataset),
                          "--config", str(cfg), "--out", str(out))
        assert code == 0
        model = data.load_weights(out / "weights.segw")
        assert model.config.arch == "fpn"


class TestInferEvalQuantify:
    def test_infer_writes_probs_and_masks(self, tmp_path, dataset, trained, capsys):
        out = tmp_path / "pred"
        code, _ = run_cli(capsys, "infer", "--weights", str(trained / "weights.segw"),
                          "--manifest", str(dataset), "--out", str(out))
        assert code == 0
        records = data.load_manifest(dataset)
        for r in records:
            assert (out / f"{r.id}.npy").exists()
            assert (out / f"{r.id}.pgm").exists()

    def test_postprocess_roundtrip(self, tmp_path, capsys):
        probs = np.zeros((2, 16, 16))
        probs[1, 4:12, 4:12] = 0.9
        probs[1, 6, 6] = 0.1  # hole
        probs[0] = 1 - probs[1]
        np.save(tmp_path / "p.npy", probs)
        code, _ = run_cli(capsys, "postprocess", "--probs", str(tmp_path / "p.npy"),
                          "--kind", "lung", "--out", str(tmp_path / "m.pgm"))
        assert code == 0
        mask = data.read_mask(tmp_path / "m.pgm")
        assert mask[6, 6] == 1  # hole filled

    def test_eval_writes_table_and_figure(self, tmp_path, dataset, trained, capsys):
        pred = tmp_path / "pred"
        main(["infer", "--weights", str(trained / "weights.segw"),
              "--manifest", str(dataset), "--out", str(pred)])
        capsys.readouterr()
        out = tmp_path / "report"
        code, printed = run_cli(capsys, "eval", "--manifest", str(dataset),
                                "--pred-dir", str(pred), "--task", "lung_seg",
                                "--out", str(out))
        assert code == 0
        assert "Dsc" in printed or "DSC" in printed.upper()
        assert (out / "metrics.tsv").exists()
        assert (out / "metrics.png").exists()

    def test_quantify_emits_report_and_overlay(self, tmp_path, dataset, trained, capsys):
        records = data.load_manifest(dataset)
        covid = next(r for r in records if r.cls == "covid")
        out = tmp_path / "quant"
        code, printed = run_cli(
            capsys, "quantify", "--image", str(covid.image),
            "--lung-weights", str(trained / "weights.segw"),
            "--inf-weights", str(trained / "weights.segw"),
            "--mode", "parallel", "--out", str(out),
        )
        assert code == 0
        report = json.loads(printed)
        assert report["detection"] in ("positive", "negative")
        assert report["mode"] == "parallel"
        saved = json.loads((out / "report.json").read_text())
        assert saved == report
        assert (out / "overlay.png").exists()


class TestSummary:
    def test_summary_table(self, tmp_path, capsys):
        out = tmp_path / "sum"
        code, printed = run_cli(capsys, "summary", "--depth", "2",
                                "--base-channels", "4", "--size", "16",
                                "--out", str(out))
        assert code == 0
        for arch in ("unet", "unetpp", "fpn"):
            assert arch in printed
        lines = (out / "summary.tsv").read_text().strip().splitlines()
        assert lines[0] == "model\ttrainable_parameters\tinference_ms"
        assert len(lines) == 4
        assert (out / "summary.png").exists()

    def test_counts_match_models(self, tmp_path, capsys):
        out = tmp_path / "sum"
        _, printed = run_cli(capsys, "summary", "--depth", "2", "--base-channels", "4",
                             "--size", "16", "--out", str(out), "--seed", "0")
        expected = build_model(ModelConfig("unet", 2, 4), seed=0).param_count()
        row = next(l for l in printed.splitlines() if l.startswith("unet\t"))
        assert int(row.split("\t")[1]) == expected


class TestWorkflowCommand:
    def test_init_status_replay(self, tmp_path, dataset, capsys):
        workdir = tmp_path / "wf"
        code, _ = run_cli(capsys, "workflow", "--action", "init",
                          "--workdir", str(workdir), "--manifest", str(dataset),
                          "--pool-fraction", "0.5", "--seed", "2")
        assert code == 0
        code, printed = run_cli(capsys, "workflow", "--action", "status",
                                "--workdir", str(workdir))
        assert code == 0
        progress = json.loads(printed)
        assert progress["stage"] == "I"
        assert progress["pool_size"] >= 1
        code, printed = run_cli(capsys, "workflow", "--action", "replay-check",
                                "--workdir", str(workdir))
        assert code == 0
        assert "consistent" in printed
