import json
import shutil
import subprocess
import sys

import pytest

from conftest import PROTOCOL, write_protocol_files
from retifuse import cli
from retifuse.config import ConfigError, load_config, parse_config, table_runs
from retifuse.data import load_manifest
from retifuse.metrics import ScoredSet, auc, parse_report_csv
from retifuse.training import DivergenceError, TrainHistory

SMALL = {
    "version": 1,
    "data": {"synthetic": {"n_patients": 16, "n_acquisitions": 40, "volume_grid": [4, 16, 16],
                           "lso_grid": [16, 16], "positive_rate": 0.3, "seed": 1}},
    "split": {"fractions": [0.5, 0.25, 0.25], "seed": 0},
    "preprocess": {"volume_grid": [4, 16, 16], "lso_grid": [16, 16]},
    "runs": [
        {"name": "structure", "method": "single:structure", "backbone": "mini-res-a", "train": {"max_epochs": 2}},
        {"name": "lso", "method": "single:lso", "backbone": "mini-dense-a", "train": {"max_epochs": 2}},
        {"name": "hier", "method": "hierarchical", "backbone": "mini-res-a", "train": {"max_epochs": 2}},
    ],
    "baseline": "structure",
    "output_dir": "out",
}


def write_config(directory, doc=None, **changes):
    doc = json.loads(json.dumps(doc or SMALL))
    doc.update(changes)
    path = directory / "experiment.json"
    path.write_text(json.dumps(doc))
    return path


def log_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    cfg = write_config(root)
    assert cli.main(["synth", str(cfg)]) == 0
    assert cli.main(["run", str(cfg)]) == 0
    assert cli.main(["compare", str(cfg)]) == 0
    return root, cfg


class TestSynth:
    def test_refuses_then_force_is_byte_identical(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert cli.main(["synth", str(cfg)]) == 0
        tensors = tmp_path / "out" / "data" / "tensors"
        first = {p.name: p.read_bytes() for p in tensors.iterdir()}
        assert cli.main(["synth", str(cfg)]) == cli.EXIT_CONFIG
        assert "--force" in capsys.readouterr().err
        assert cli.main(["synth", str(cfg), "--force"]) == 0
        assert {p.name: p.read_bytes() for p in tensors.iterdir()} == first
        assert (tmp_path / "out" / "data" / "manifest.jsonl").is_file()

    def test_creates_missing_directory(self, tmp_path):
        cfg = write_config(tmp_path)
        target = tmp_path / "a" / "b"
        assert cli.main(["synth", str(cfg), "--output-dir", str(target)]) == 0
        assert (target / "data" / "manifest.jsonl").is_file()
        truth = json.loads((target / "data" / "synth.json").read_text())
        assert len(truth["planted"]) == 40

    def test_default_cohort_size(self):
        cfg = parse_config(dict(SMALL, data={"synthetic": {}}))
        assert (cfg.synthetic.n_patients, cfg.synthetic.n_acquisitions) == (64, 151)

    def test_manifest_config_cannot_synth(self, tmp_path):
        cfg = write_config(tmp_path, data={"manifest": "m.jsonl"})
        assert cli.main(["synth", str(cfg)]) == cli.EXIT_CONFIG


class TestConfigErrors:
    @pytest.mark.parametrize("changes,match", [
        ({"runs": []}, "no runs"),
        ({"version": 2}, "version"),
        ({"baseline": "nope"}, "baseline"),
        ({"extra": 1}, "unknown config keys"),
        ({"runs": [SMALL["runs"][0], SMALL["runs"][0]]}, "duplicate"),
        ({"runs": [dict(SMALL["runs"][0], method="late")]}, "unknown method"),
        ({"runs": [dict(SMALL["runs"][0], method="single:oct")]}, "unknown modality"),
        ({"runs": [dict(SMALL["runs"][0], backbone="resnet50")]}, "preset"),
        ({"runs": [dict(SMALL["runs"][0], train={"lr": -1})]}, "lr"),
        ({"runs": [dict(SMALL["runs"][0], train={"momentumm": 0.9})]}, "momentumm"),
        ({"split": {"fractions": [0.5, 0.5, 0.5]}}, "fractions"),
        ({"data": {}}, "exactly one"),
        ({"data": {"synthetic": {"mode": "mixed"}}}, "mode"),
    ])
    def test_rejected_before_any_work(self, tmp_path, capsys, changes, match):
        cfg = write_config(tmp_path, **changes)
        with pytest.raises(ConfigError, match=match):
            load_config(cfg)
        assert cli.main(["run", str(cfg)]) == cli.EXIT_CONFIG
        assert not (tmp_path / "out").exists()
        assert match in log_lines(capsys.readouterr().err)[-1]["message"]

    def test_unreadable_config(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
        (tmp_path / "bad.json").write_text("{")
        assert cli.main(["run", str(tmp_path / "bad.json")]) == cli.EXIT_CONFIG

    def test_round_trip_and_paths(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        assert cfg.output_dir == tmp_path / "out"
        again = parse_config(cfg.to_json(), tmp_path)
        assert again.to_json() == cfg.to_json()

    def test_table_runs(self):
        runs = table_runs("mini-dense-a")
        assert [r.method for r in runs] == ["single:structure", "single:flow", "single:lso",
                                            "hierarchical", "early", "intermediate"]


class TestRunAndCompare:
    def test_outputs(self, experiment):
        root, _ = experiment
        out = root / "out"
        for run in ("structure", "lso", "hier"):
            assert (out / "checkpoints" / f"{run}.ckpt").is_file()
            hist = TrainHistory.load(out / "histories" / f"{run}.jsonl")
            assert len(hist.records) == 2 and hist.best_epoch in (1, 2)
        for name in ("split.json", "report.csv", "report.txt", "roc.svg"):
            assert (out / name).is_file()
        rows = parse_report_csv((out / "report.csv").read_text())
        assert [r["method"] for r in rows] == ["Single modality (Structure)", "Single modality (LSO)",
                                               "Hierarchical fusion"]
        assert rows[0]["improvement"] == "Baseline"

    def test_report_equals_recomputed_scores(self, experiment):
        root, _ = experiment
        rows = parse_report_csv((root / "out" / "report.csv").read_text())
        for row, run in zip(rows, ("structure", "lso", "hier")):
            doc = json.loads((root / "out" / "scores" / f"{run}.json").read_text())
            assert row["auc"] == f"{auc(ScoredSet.from_json(doc['test'])):.3f}"
            assert len(doc["test"]["ids"]) + len(doc["val"]["ids"]) < 40

    def test_rerun_gives_identical_histories(self, experiment, tmp_path):
        root, _ = experiment
        shutil.copytree(root / "out" / "data", tmp_path / "out" / "data")
        cfg = write_config(tmp_path, runs=SMALL["runs"][:1])
        assert cli.main(["run", str(cfg)]) == 0
        a = TrainHistory.load(root / "out" / "histories" / "structure.jsonl")
        b = TrainHistory.load(tmp_path / "out" / "histories" / "structure.jsonl")
        assert a == b
        assert (root / "out" / "checkpoints" / "structure.ckpt").read_bytes() == \
            (tmp_path / "out" / "checkpoints" / "structure.ckpt").read_bytes()

    def test_compare_prints_table(self, experiment, capsys):
        _, cfg = experiment
        assert cli.main(["compare", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert out.splitlines()[0].split()[:2] == ["Method", "Backbone"] and "Baseline" in out

    def test_missing_checkpoint_names_run(self, experiment, tmp_path, capsys):
        root, _ = experiment
        shutil.copytree(root / "out", tmp_path / "out")
        (tmp_path / "out" / "checkpoints" / "lso.ckpt").unlink()
        cfg = write_config(tmp_path)
        assert cli.main(["compare", str(cfg)]) == cli.EXIT_MISSING
        assert "lso" in log_lines(capsys.readouterr().err)[-1]["message"]

    def test_run_without_dataset(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert cli.main(["run", str(cfg)]) == cli.EXIT_MISSING
        assert "synth" in capsys.readouterr().err

    def test_divergence_recorded_and_others_continue(self, experiment, tmp_path, monkeypatch, capsys):
        root, _ = experiment
        shutil.copytree(root / "out" / "data", tmp_path / "out" / "data")
        real_train = cli.train

        def flaky(model, train_set, val_set, config, checkpoint_dir=None):
            if model.method == "single:lso":
                raise DivergenceError("non-finite training loss at epoch 1", TrainHistory(stopping_reason="diverged"))
            return real_train(model, train_set, val_set, config, checkpoint_dir)

        monkeypatch.setattr(cli, "train", flaky)
        cfg = write_config(tmp_path)
        assert cli.main(["run", str(cfg)]) == cli.EXIT_RUN_FAILED
        ck = tmp_path / "out" / "checkpoints"
        assert (ck / "structure.ckpt").is_file() and (ck / "hier.ckpt").is_file()
        assert not (ck / "lso.ckpt").exists()
        assert TrainHistory.load(tmp_path / "out" / "histories" / "lso.jsonl").stopping_reason == "diverged"
        events = log_lines(capsys.readouterr().err)
        assert any(e["message"] == "runs failed" and e["runs"] == ["lso"] for e in events)

    def test_structured_logs(self, experiment, capsys):
        _, cfg = experiment
        assert cli.main(["--log-level", "info", "compare", str(cfg)]) == 0
        events = log_lines(capsys.readouterr().err)
        assert events and all({"time", "level", "logger", "message"} <= set(e) for e in events)
        assert any(e["message"] == "report written" for e in events)


class TestCompareFromScores:
    def test_metadata_overrides(self, tmp_path):
        runs = [{"name": n, "method": m, "backbone": "mini-res-a"}
                for n, m in [("s", "single:structure"), ("e", "early"), ("h", "hierarchical")]]
        cfg_path = write_config(tmp_path, runs=runs, baseline="s")
        cfg = load_config(cfg_path)
        stored = tmp_path / "stored"
        for run, value in zip(cfg.runs, (0.859, 0.865, 0.911)):
            cli.write_scores(stored / "scores" / f"{run.name}.json", run, None, None,
                             {"auc": value, "sensitivity": 0.5, "specificity": 0.75})
        assert cli.main(["compare", str(cfg_path), "--from-scores", str(stored)]) == 0
        rows = parse_report_csv((tmp_path / "out" / "report.csv").read_text())
        assert [r["improvement"] for r in rows] == ["Baseline", "+0.006", "+0.052"]
        assert cli.main(["compare", str(cfg_path), "--from-scores", str(stored / "scores")]) == 0

    def test_missing_scores(self, tmp_path):
        cfg = write_config(tmp_path)
        assert cli.main(["compare", str(cfg), "--from-scores", str(tmp_path / "nothing")]) == cli.EXIT_MISSING

    def test_validation_threshold_is_used(self, tmp_path):
        cfg = load_config(write_config(tmp_path))
        val = ScoredSet(None, [0.9, 0.7, 0.6, 0.1], [1, 1, 0, 0]).to_json()
        test = ScoredSet(None, [0.8, 0.65, 0.7, 0.2], [1, 1, 0, 0]).to_json()
        for run in cfg.runs:
            cli.write_scores(tmp_path / "sc" / f"{run.name}.json", run, val, test)
        report = cli.cmd_compare(cfg, tmp_path / "sc")
        # Youden on validation picks 0.7, so 0.65 is a false negative and 0.7 a false positive
        assert (report.rows[0].sensitivity, report.rows[0].specificity) == (0.5, 0.5)


class TestSplitReplay:
    def test_stored_split_file(self, tmp_path):
        manifest, split = write_protocol_files(tmp_path)
        doc = dict(SMALL, data={"manifest": manifest.name}, split={"file": split.name})
        cfg = load_config(write_config(tmp_path, doc))
        headers = load_manifest(manifest).headers()
        resolved = cli.resolve_split(cfg, headers)
        assert [len(resolved.ids(n)) for n in PROTOCOL] == [88, 28, 35]


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--seeds", "1"]) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith("4/4 cases passed")


def test_jobs_matches_sequential(experiment, tmp_path):
    root, _ = experiment
    shutil.copytree(root / "out" / "data", tmp_path / "out" / "data")
    cfg = write_config(tmp_path, runs=SMALL["runs"][:2])
    assert cli.main(["run", str(cfg), "--jobs", "2"]) == 0
    for run in ("structure", "lso"):
        assert TrainHistory.load(tmp_path / "out" / "histories" / f"{run}.jsonl") == \
            TrainHistory.load(root / "out" / "histories" / f"{run}.jsonl")


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "retifuse.cli", "run", str(tmp_path / "none.json")],
                          capture_output=True, text=True)
    assert proc.returncode == cli.EXIT_CONFIG
    assert json.loads(proc.stderr.splitlines()[-1])["level"] == "error"
