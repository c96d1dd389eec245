import json
import shutil
import subprocess
import time

import numpy as np
import pytest

from tiltseg import cli, experiment, segmetrics, synthseg
from tiltseg.diffmodel import ModelParams
from tiltseg.errors import DivergenceError

SMALL_SYNTH = dict(height=8, width=8, num_samples=20, seed=0)


def write_json(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def train_args(tmp_path, out="run", **overrides):
    cfg = dict(method="tce-stochastic", t=1.0, gamma=0.1, steps=30, synth=SMALL_SYNTH)
    cfg.update(overrides)
    return ["train", "--config", write_json(tmp_path / f"{out}.json", cfg), "--out", str(tmp_path / out)]


def read_artifacts(run_dir):
    out = {}
    for name in ("trace.csv", "ious.csv", "fairness.json", "fairness.txt"):
        out[name] = (run_dir / name).read_text()
    summary = json.loads((run_dir / "summary.json").read_text())
    summary.pop("wall_time_s")
    out["summary.json"] = summary
    return out


class TestGenerate:
    def test_writes_loadable_file(self, tmp_path):
        cfg = write_json(tmp_path / "g.json", SMALL_SYNTH)
        assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "d.sseg")]) == 0
        ds = synthseg.load(tmp_path / "d.sseg")
        assert ds == synthseg.generate(synthseg.SynthConfig(**SMALL_SYNTH))

    def test_byte_identical_reruns(self, tmp_path):
        cfg = write_json(tmp_path / "g.json", SMALL_SYNTH)
        cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "a.sseg")])
        cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "b.sseg")])
        assert (tmp_path / "a.sseg").read_bytes() == (tmp_path / "b.sseg").read_bytes()

    def test_seed_flag_overrides(self, tmp_path):
        cfg = write_json(tmp_path / "g.json", SMALL_SYNTH)
        cli.main(["generate", "--config", cfg, "--seed", "9", "--out", str(tmp_path / "a.sseg")])
        assert synthseg.load(tmp_path / "a.sseg").config.seed == 9

    def test_bad_frequency_names_field(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "g.json", dict(SMALL_SYNTH, class_frequency=[0.5, 0.5, 0.5, 0.1, 0.1]))
        assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "d.sseg")]) == 1
        assert "class_frequency" in capsys.readouterr().err
        assert not (tmp_path / "d.sseg").exists()

    def test_degenerate_is_input_error(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "g.json", dict(SMALL_SYNTH, height=2, width=2))
        assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "d.sseg")]) == 1
        assert "degenerate class" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert cli.main(["generate", "--config", str(tmp_path / "nope.json"), "--out", "x"]) == 1

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as info:
            cli.main(["generate"])
        assert info.value.code == 1


class TestTrain:
    def test_artifacts(self, tmp_path, capsys):
        assert cli.main(train_args(tmp_path)) == 0
        run = tmp_path / "run"
        for name in ("trace.csv", "params.npz", "ious.csv", "fairness.json", "fairness.txt", "summary.json"):
            assert (run / name).exists()
        summary = json.loads((run / "summary.json").read_text())
        stamp = f"config_hash={summary['config_hash']} seed=0"
        for name in ("trace.csv", "ious.csv", "fairness.txt"):
            assert (run / name).read_text().startswith(f"# {stamp}\n")
        assert json.loads((run / "fairness.json").read_text())["stamp"] == stamp
        assert summary["steps_completed"] == 30
        assert "sorted 25%" in capsys.readouterr().out

    def test_zero_tilt_uniform_trace(self, tmp_path):
        assert cli.main(train_args(tmp_path, t=0.0)) == 0
        lines = (tmp_path / "run" / "trace.csv").read_text().splitlines()[2:]
        assert len(lines) == 30
        for line in lines:
            assert [float(w) for w in line.split(",")[3:]] == [0.2] * 5

    def test_focal_reduction(self, tmp_path):
        assert cli.main(train_args(tmp_path, "m", method="mcce", steps=20)) == 0
        assert cli.main(
            train_args(tmp_path, "f", method="focal", focal_gamma=0.0, alpha="uniform", steps=20)
        ) == 0
        m = json.loads((tmp_path / "m" / "summary.json").read_text())["final_batch_loss"]
        f = json.loads((tmp_path / "f" / "summary.json").read_text())["final_batch_loss"]
        assert abs(m - f) <= 1e-10

    def test_deterministic(self, tmp_path):
        cli.main(train_args(tmp_path, "a", partition="disjoint"))
        cli.main(train_args(tmp_path, "b", partition="disjoint"))
        assert read_artifacts(tmp_path / "a") == read_artifacts(tmp_path / "b")

    def test_flags_override_config(self, tmp_path):
        args = train_args(tmp_path) + ["--steps", "7", "--seed", "3", "--eta", "0.02"]
        assert cli.main(args) == 0
        summary = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert summary["steps_completed"] == 7
        assert summary["trainer"]["lr"] == 0.02 and summary["seed"] == 3

    def test_dataset_file(self, tmp_path):
        synthseg.save(synthseg.generate(synthseg.SynthConfig(**SMALL_SYNTH)), tmp_path / "d.sseg")
        args = ["train", "--dataset", str(tmp_path / "d.sseg"), "--method", "mcce",
                "--steps", "5", "--out", str(tmp_path / "run")]
        assert cli.main(args) == 0

    @pytest.mark.parametrize(
        "cfg,needle",
        [
            (dict(method="tce-stochastic", gamma=0.1), "t"),
            (dict(method="focal"), "focal_gamma"),
            (dict(method="sgd"), "method"),
            (dict(method="mcce", steps=-1), "steps"),
            (dict(method="mcce", colour=1), "unknown"),
        ],
    )
    def test_invalid_config(self, tmp_path, capsys, cfg, needle):
        args = ["train", "--config", write_json(tmp_path / "c.json", cfg), "--out", str(tmp_path / "run")]
        assert cli.main(args) == 1
        assert needle in capsys.readouterr().err
        assert not (tmp_path / "run").exists()

    def test_missing_dataset(self, tmp_path):
        args = ["train", "--dataset", str(tmp_path / "nope.sseg"), "--method", "mcce", "--out", str(tmp_path / "r")]
        assert cli.main(args) == 1

    def test_bad_k_fraction(self, tmp_path):
        assert cli.main(train_args(tmp_path) + ["--k-fraction", "0.7"]) == 1

    def test_divergence_writes_only_trace(self, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise DivergenceError("divergence: non-finite loss at step 2", trace=[])

        monkeypatch.setattr(experiment, "train", diverge)
        assert cli.main(train_args(tmp_path)) == 2
        assert sorted(p.name for p in (tmp_path / "run").iterdir()) == ["trace.csv"]

    def test_default_task_runtime(self, tmp_path):
        start = time.perf_counter()
        args = ["train", "--method", "tce-stochastic", "--t", "1", "--gamma", "0.1",
                "--steps", "200", "--out", str(tmp_path / "run")]
        assert cli.main(args) == 0
        assert time.perf_counter() - start < 60


def perfect_fixture(tmp_path):
    """Features equal to one-hot labels and a model that reads them off."""
    labels = np.random.default_rng(0).integers(0, 3, size=(4, 5, 5))
    ds = synthseg.SegDataset(np.eye(3)[labels], labels, 3)
    synthseg.save(ds, tmp_path / "d.sseg")
    params = ModelParams("linear", [20.0 * np.eye(3), np.zeros(3)])
    cli._save_params(tmp_path / "p.npz", params, {"config_hash": "fixture", "seed": 0})
    return tmp_path / "p.npz", tmp_path / "d.sseg"


class TestEvaluate:
    def test_perfect_classifier(self, tmp_path):
        params, data = perfect_fixture(tmp_path)
        args = ["evaluate", "--params", str(params), "--dataset", str(data), "--split", "all",
                "--out", str(tmp_path / "ev")]
        assert cli.main(args) == 0
        _, ious = segmetrics.read_iou_csv(tmp_path / "ev" / "ious.csv")
        np.testing.assert_array_equal(ious, [100.0, 100.0, 100.0])
        report = json.loads((tmp_path / "ev" / "fairness.json").read_text())
        assert report["std"] == 0.0 and report["worst"] == 100.0

    def test_matches_training_run(self, tmp_path):
        cli.main(train_args(tmp_path))
        assert cli.main(["evaluate", "--params", str(tmp_path / "run"), "--out", str(tmp_path / "ev")]) == 0
        assert (tmp_path / "ev" / "ious.csv").read_text() == (tmp_path / "run" / "ious.csv").read_text()

    def test_missing_params(self, tmp_path):
        assert cli.main(["evaluate", "--params", str(tmp_path / "nope"), "--out", str(tmp_path / "ev")]) == 1

    def test_split_required_in_artifact(self, tmp_path):
        params, data = perfect_fixture(tmp_path)
        args = ["evaluate", "--params", str(params), "--dataset", str(data), "--out", str(tmp_path / "ev")]
        assert cli.main(args) == 1


class TestReportOnly:
    def test_table_row(self, fixtures_dir, capsys):
        assert cli.main(["report-only", str(fixtures_dir / "cityscapes_mcce.csv")]) == 0
        out = capsys.readouterr().out
        row = next(line for line in out.splitlines() if line.startswith("cityscapes_mcce"))
        for cell in ("57.69", "94.81", "(64.60, 57.69)", "(88.74, 94.81)", "48.46", "14.96", "75.79"):
            assert cell in row

    def test_reference_and_json(self, fixtures_dir, tmp_path):
        args = ["report-only", str(fixtures_dir / "cityscapes_tce_t1.csv"),
                "--reference", str(fixtures_dir / "cityscapes_mcce.csv"), "--out", str(tmp_path)]
        assert cli.main(args) == 0
        data = json.loads((tmp_path / "fairness.json").read_text())["cityscapes_tce_t1"]
        assert abs(data["sorted_bottom"] - 64.29) <= 0.01

    def test_first_as_reference(self, fixtures_dir, capsys):
        files = [str(fixtures_dir / f"cityscapes_{n}.csv") for n in ("mcce", "tce_t1")]
        assert cli.main(["report-only", *files, "--first-as-reference"]) == 0
        row = next(line for line in capsys.readouterr().out.splitlines() if line.startswith("cityscapes_tce_t1"))
        assert row.split()[1] == "64.29"

    def test_groups_of_22(self, fixtures_dir, tmp_path):
        args = ["report-only", str(fixtures_dir / "ade20k_mcce_150.csv"), "--k-fraction", "0.15",
                "--out", str(tmp_path)]
        assert cli.main(args) == 0
        data = json.loads((tmp_path / "fairness.json").read_text())["ade20k_mcce_150"]
        assert data["group_size"] == 22

    def test_missing_file(self, tmp_path):
        assert cli.main(["report-only", str(tmp_path / "nope.csv")]) == 1

    def test_reference_length_mismatch(self, fixtures_dir):
        args = ["report-only", str(fixtures_dir / "ade20k_mcce_150.csv"),
                "--reference", str(fixtures_dir / "cityscapes_mcce.csv")]
        assert cli.main(args) == 1


class TestGradcheck:
    def test_default_passes(self, capsys):
        assert cli.main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out
        for kind in cli.GRADCHECK_KINDS:
            assert kind in out

    def test_zero_tolerance_fails(self, capsys):
        assert cli.main(["gradcheck", "--loss", "mcce", "--trials", "3", "--tolerance", "0"]) == 2
        assert "coordinate" in capsys.readouterr().out

    def test_zero_trials(self, capsys, caplog):
        assert cli.main(["gradcheck", "--trials", "0"]) == 0
        assert "vacuous" in capsys.readouterr().out
        assert "trials=0" in caplog.text

    def test_one_hidden_helper(self):
        results = cli.gradcheck(("tce_class",), 3, 1e-5, arch="one-hidden")
        assert all(err < 1e-5 for _, _, err, _ in results)


@pytest.mark.skipif(shutil.which("tiltseg") is None, reason="console script not installed")
def test_console_script(fixtures_dir):
    proc = subprocess.run(
        ["tiltseg", "report-only", str(fixtures_dir / "cityscapes_mcce.csv")],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    assert "14.96" in proc.stdout
