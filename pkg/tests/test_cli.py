import json
import subprocess
import sys

import pytest

from samplerank.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--customers", "80", "--seed", "2", "--out", str(root / "data")]) == 0
    return root


def data_args(root, name="data/sessions.jsonl"):
    return ["--data", str(root / name), "--schema", str(root / "data" / "schema.json")]


class TestStages:
    def test_synth_outputs(self, workspace):
        for name in ("sessions.jsonl", "schema.json", "synth_config.json"):
            assert (workspace / "data" / name).is_file()
        assert json.loads((workspace / "data" / "synth_config.json").read_text())["seed"] == 2

    def test_validate(self, workspace, capsys):
        assert main(["validate", *data_args(workspace)]) == 0
        assert json.loads(capsys.readouterr().out) == {"ok": True, "violations": []}

    def test_validate_to_file(self, workspace, capsys):
        out = workspace / "checks" / "validate.json"
        assert main(["validate", *data_args(workspace), "--out", str(out)]) == 0
        assert capsys.readouterr().out == ""
        assert json.loads(out.read_text())["ok"] is True

    def test_full_chain(self, workspace, capsys):
        w = workspace
        assert main(["split", *data_args(w), "--fraction", "0.7", "--seed", "1", "--out", str(w / "split")]) == 0
        train = data_args(w, "split/train.jsonl")
        assert main(["fit", *train, "--out", str(w / "base.json")]) == 0
        (w / "goal.json").write_text(json.dumps({"mu": {"item_rating": {"kind": "additive", "delta": 0.2}}}))
        assert main(["sample", *train, "--density", str(w / "base.json"), "--goal", str(w / "goal.json"),
                     "--seed", "1", "--out", str(w / "sampled")]) == 0
        report = json.loads((w / "sampled" / "report.json").read_text())
        assert 0 < report["accepted_sessions"] < report["input_sessions"]
        (w / "train.json").write_text(json.dumps({"n_trees": 5, "min_samples_leaf": 5}))
        for src, dst in (("split/train.jsonl", "base_model.json"), ("sampled/sampled.jsonl", "goal_model.json")):
            assert main(["train", *data_args(w, src), "--config", str(w / "train.json"), "--out", str(w / dst)]) == 0
        test = data_args(w, "split/test.jsonl")
        assert main(["eval", *test, "--model", str(w / "base_model.json"), "--k-grid", "1,3",
                     "--out", str(w / "base_eval.json")]) == 0
        capsys.readouterr()
        assert main(["eval", *test, "--model", str(w / "goal_model.json"), "--k-grid", "1,3",
                     "--baseline", str(w / "base_eval.json")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert set(out["topk_means"]) == {"item_rating", "restaurant_rating"}
        assert list(out["incremental"]["topk"]["item_rating"]) == ["1", "3"]

    def test_fit_gmm(self, workspace):
        out = workspace / "gmm.json"
        assert main(["fit", *data_args(workspace), "--family", "gmm", "--components", "2", "--seed", "4",
                     "--out", str(out)]) == 0
        assert json.loads(out.read_text())["kind"] == "gmm"


class TestRunAndReport:
    def test_run_then_report(self, tmp_path, capsys):
        cfg = {
            "synth": {"n_customers": 60},
            "train": {"n_trees": 4, "min_samples_leaf": 5},
            "goals": [{"name": "goal-1", "mu": {"item_rating": {"kind": "additive", "delta": 0.2}}}],
            "k_grid": [1, 3],
        }
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        assert main(["run", "--config", str(tmp_path / "cfg.json"), "--seed", "7", "--out", str(tmp_path / "r")]) == 0
        report = json.loads((tmp_path / "r" / "report.json").read_text())
        assert report["seed"] == 7
        md = (tmp_path / "r" / "report.md").read_text()
        (tmp_path / "r" / "report.md").unlink()
        assert main(["report", "--artifacts", str(tmp_path / "r")]) == 0
        assert (tmp_path / "r" / "report.md").read_text() == md
        capsys.readouterr()
        assert main(["report", "--artifacts", str(tmp_path / "r" / "report.json")]) == 0
        assert capsys.readouterr().out == md

    def test_run_needs_an_output_directory(self, tmp_path, capsys):
        (tmp_path / "cfg.json").write_text(json.dumps({"synth": {"n_customers": 20}}))
        assert main(["run", "--config", str(tmp_path / "cfg.json")]) == 2
        assert "[run]" in capsys.readouterr().err


class TestErrors:
    def test_missing_file_is_stage_tagged(self, tmp_path, capsys):
        code = main(["train", "--data", str(tmp_path / "none.jsonl"), "--schema", str(tmp_path / "s.json"),
                     "--out", str(tmp_path / "m.json")])
        assert code == 2
        assert "[train]" in capsys.readouterr().err

    def test_bad_data_reports_line(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"session_id": "s", "customer_id": "c", "items": [{"features": [1], "label": 1}]}\n')
        code = main(["validate", "--data", str(bad), "--schema", str(workspace / "data" / "schema.json")])
        assert code == 2
        err = capsys.readouterr().err
        assert "[validate]" in err and "line 1" in err

    def test_corrupt_model(self, workspace, tmp_path, capsys):
        (tmp_path / "m.json").write_text('{"format_version": 1, "kind": "gbt", "tr')
        code = main(["eval", *data_args(workspace), "--model", str(tmp_path / "m.json")])
        assert code == 2
        assert "CorruptModelError" in capsys.readouterr().err

    def test_bad_config_in_run(self, tmp_path, capsys):
        (tmp_path / "cfg.json").write_text(json.dumps({"synth": {}, "nonsense": 1}))
        assert main(["run", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "o")]) == 2
        assert "nonsense" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code != 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "samplerank", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("samplerank")
