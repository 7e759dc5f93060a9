"""End-to-end command line tests: generate, train, eval, report, exit codes."""

import json

import numpy as np
import pytest

from weakem.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, SPLIT_FILES,
                        main)
from weakem.detector import DetectorParams, N_FEATURES
from weakem.em import EmConfig, ModelParams, NumericError, read_metrics_csv, save_checkpoint
from weakem.synthvol import load_dataset
from weakem.weaklik import HalfGaussianParams, init_lobe_params

SMOKE = {
    "generator": {"count_min": 1, "count_max": 2},
    "em": {"init_epochs": 1, "epochs": 2, "weak_fraction": 0.5},
    "seeds": [0],
    "n_full": 3,
    "n_weak": 2,
    "n_valid": 2,
}

EASY = {
    "generator": {"count_min": 1, "count_max": 1, "noise": 0.01, "clutter": 0.02,
                  "contrast_min": 0.35, "contrast_max": 0.45,
                  "diameter_min": 6.0, "diameter_max": 8.0},
    "em": {"stride": 2},
    "seeds": [0],
    "n_full": 1,
    "n_weak": 1,
    "n_valid": 8,
}


def write_config(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    """One generated-and-trained smoke experiment shared across tests."""
    root = tmp_path_factory.mktemp("smoke")
    cfg = write_config(root / "exp.json", SMOKE)
    out = str(root / "results")
    assert main(["generate", "--config", cfg, "--out", out]) == EXIT_OK
    assert main(["train", "--config", cfg, "--mode", "baseline", "--out", out]) == EXIT_OK
    return cfg, out


class TestGenerate:
    def test_splits_load_and_counts_are_printed(self, smoke_run, capsys):
        cfg, out = smoke_run
        assert main(["generate", "--config", cfg, "--out", out]) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        for name, n in (("train_full", 3), ("train_weak", 2), ("valid", 2)):
            line = next(ln for ln in lines if ln.startswith(name))
            assert f"{n} scans" in line and "nodules" in line
        from pathlib import Path
        full = load_dataset(Path(out) / SPLIT_FILES["train_full"])
        weak = load_dataset(Path(out) / SPLIT_FILES["train_weak"])
        valid = load_dataset(Path(out) / SPLIT_FILES["valid"])
        assert (len(full), len(weak), len(valid)) == (3, 2, 2)
        # slice-noise fitting needs observed pairs, so both training splits
        # carry weak labels; validation is truth only
        assert all(s.weak for s in full) and all(s.weak for s in weak)
        assert all(not s.weak for s in valid)

    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "exp.json", SMOKE)
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["generate", "--config", cfg, "--out", a]) == EXIT_OK
        assert main(["generate", "--config", cfg, "--out", b]) == EXIT_OK
        from pathlib import Path
        for name in (*SPLIT_FILES.values(), "experiment.json"):
            assert (Path(a) / name).read_bytes() == (Path(b) / name).read_bytes()

    def test_empty_split_is_a_config_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "exp.json", {**SMOKE, "n_weak": 0})
        code = main(["generate", "--config", cfg, "--out", str(tmp_path / "r")])
        assert code == EXIT_CONFIG
        assert "empty split" in capsys.readouterr().err

    def test_resolved_config_is_written(self, smoke_run):
        from pathlib import Path
        _, out = smoke_run
        stored = json.loads((Path(out) / "experiment.json").read_text())
        assert stored["n_full"] == 3
        assert stored["em"]["epochs"] == 2


class TestTrain:
    def test_baseline_writes_checkpoint_and_metrics(self, smoke_run, capsys):
        from pathlib import Path
        _, out = smoke_run
        ckpt = Path(out) / "checkpoint_baseline_seed0.json"
        metrics = Path(out) / "metrics_baseline_seed0.csv"
        assert ckpt.exists() and metrics.exists()
        history = read_metrics_csv(metrics)
        assert len(history) == SMOKE["em"]["epochs"]
        assert [m.epoch for m in history] == [1, 2]
        payload = json.loads(ckpt.read_text())
        assert payload["config"]["inference"] == "map"

    def test_sampling_mode_sets_inference_and_uses_weak_labels(self, smoke_run, capsys):
        from pathlib import Path
        cfg, out = smoke_run
        code = main(["train", "--config", cfg, "--mode", "deepem-sampling",
                     "--out", out, "--seed", "5"])
        assert code == EXIT_OK
        assert "deepem-sampling seed 5" in capsys.readouterr().out
        ckpt = Path(out) / "checkpoint_deepem-sampling_seed5.json"
        assert json.loads(ckpt.read_text())["config"]["inference"] == "sampling"
        history = read_metrics_csv(Path(out) / "metrics_deepem-sampling_seed5.csv")
        assert any(m.weak_labels_used + m.weak_labels_skipped > 0 for m in history)

    def test_missing_dataset_is_a_data_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "exp.json", SMOKE)
        code = main(["train", "--config", cfg, "--out", str(tmp_path / "nowhere")])
        assert code == EXIT_DATA
        assert "data error" in capsys.readouterr().err

    def test_numeric_failure_exit_code(self, smoke_run, monkeypatch, capsys):
        cfg, out = smoke_run

        def boom(*args, **kwargs):
            raise NumericError("synthetic blowup")

        monkeypatch.setattr("weakem.cli.train_em", boom)
        code = main(["train", "--config", cfg, "--out", out])
        assert code == EXIT_NUMERIC
        assert "numeric failure" in capsys.readouterr().err


class TestEval:
    def test_report_and_curve_csv(self, smoke_run, capsys, tmp_path):
        from pathlib import Path
        _, out = smoke_run
        ckpt = str(Path(out) / "checkpoint_baseline_seed0.json")
        data = str(Path(out) / SPLIT_FILES["train_full"])
        assert main(["eval", ckpt, data, "--out", str(tmp_path)]) == EXIT_OK
        text = capsys.readouterr().out
        assert text.count("sensitivity at") == 7
        assert "average over 7 operating points" in text
        curve = tmp_path / "checkpoint_baseline_seed0_froc.csv"
        lines = curve.read_text().strip().splitlines()
        assert lines[0] == "threshold,fp_per_scan,sensitivity"
        assert lines[-1].startswith("summary,")

    def test_trained_baseline_beats_zero_on_its_training_split(self, smoke_run, capsys):
        from pathlib import Path
        _, out = smoke_run
        ckpt = str(Path(out) / "checkpoint_baseline_seed0.json")
        data = str(Path(out) / SPLIT_FILES["train_full"])
        assert main(["eval", ckpt, data]) == EXIT_OK
        avg = float(capsys.readouterr().out.split("operating points:")[1]
                    .strip().splitlines()[0])
        assert avg > 0.0

    def test_evaluation_is_deterministic(self, smoke_run, capsys):
        from pathlib import Path
        _, out = smoke_run
        ckpt = str(Path(out) / "checkpoint_baseline_seed0.json")
        data = str(Path(out) / SPLIT_FILES["valid"])
        assert main(["eval", ckpt, data]) == EXIT_OK
        first = capsys.readouterr().out
        assert main(["eval", ckpt, data]) == EXIT_OK
        assert capsys.readouterr().out == first

    def test_oracle_weights_clear_ninety_percent_on_easy_data(self, tmp_path, capsys):
        from pathlib import Path
        cfg = write_config(tmp_path / "exp.json", EASY)
        out = str(tmp_path / "results")
        assert main(["generate", "--config", cfg, "--out", out]) == EXIT_OK
        capsys.readouterr()
        weights = np.zeros(N_FEATURES + 2)
        weights[3] = 30.0  # ring contrast separates rendered blobs from background
        weights[N_FEATURES:] = -3.0
        params = ModelParams(DetectorParams(weights, (5.0, 8.0)), init_lobe_params(),
                             HalfGaussianParams(1.5))
        ckpt = Path(out) / "oracle.json"
        save_checkpoint(ckpt, params, EmConfig(stride=2), epoch=0)
        data = str(Path(out) / SPLIT_FILES["valid"])
        assert main(["eval", str(ckpt), data]) == EXIT_OK
        avg = float(capsys.readouterr().out.split("operating points:")[1]
                    .strip().splitlines()[0])
        assert avg > 90.0

    def test_bad_checkpoint_is_a_data_error(self, smoke_run, tmp_path, capsys):
        from pathlib import Path
        _, out = smoke_run
        bad = tmp_path / "bad.json"
        bad.write_text('{"format": "something-else"}')
        data = str(Path(out) / SPLIT_FILES["valid"])
        assert main(["eval", str(bad), data]) == EXIT_DATA
        assert "data error" in capsys.readouterr().err

    def test_truncated_dataset_is_a_data_error(self, smoke_run, tmp_path, capsys):
        from pathlib import Path
        _, out = smoke_run
        ckpt = str(Path(out) / "checkpoint_baseline_seed0.json")
        clipped = tmp_path / "clipped.wem"
        raw = (Path(out) / SPLIT_FILES["valid"]).read_bytes()
        clipped.write_bytes(raw[: len(raw) // 2])
        assert main(["eval", ckpt, str(clipped)]) == EXIT_DATA


class TestReport:
    def test_aggregates_existing_runs(self, smoke_run, capsys):
        from pathlib import Path
        cfg, out = smoke_run
        assert main(["report", "--config", cfg, "--out", out]) == EXIT_OK
        text = capsys.readouterr().out
        assert "baseline" in text
        summary = Path(out) / "summary.csv"
        lines = summary.read_text().strip().splitlines()
        assert lines[0] == "mode,seeds,mean_froc,std_froc,delta_vs_baseline"
        assert any(ln.startswith("baseline,1,") for ln in lines)

    def test_no_runs_is_a_config_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "exp.json", SMOKE)
        code = main(["report", "--config", cfg, "--out", str(tmp_path / "empty")])
        assert code == EXIT_CONFIG


class TestConfigHandling:
    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["generate", "--config", str(tmp_path / "absent.json")])
        assert code == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_invalid_json(self, tmp_path, capsys):
        bad = tmp_path / "broken.json"
        bad.write_text("{not json")
        assert main(["generate", "--config", str(bad)]) == EXIT_CONFIG

    def test_unknown_mode_in_config(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "exp.json", {**SMOKE, "mode": "alchemy"})
        assert main(["generate", "--config", cfg,
                     "--out", str(tmp_path / "r")]) == EXIT_CONFIG
        assert "mode" in capsys.readouterr().err

    def test_unknown_em_key_in_config(self, tmp_path, capsys):
        payload = {**SMOKE, "em": {"warp_factor": 9}}
        cfg = write_config(tmp_path / "exp.json", payload)
        assert main(["generate", "--config", cfg,
                     "--out", str(tmp_path / "r")]) == EXIT_CONFIG
