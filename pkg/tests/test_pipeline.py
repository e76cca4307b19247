import json

import numpy as np
import pytest

from samplerank.data_model import write_schema, write_sessions
from samplerank.errors import ConfigError, CorruptModelError, StageError, VersionMismatchError
from samplerank.pipeline import (
    ExperimentConfig,
    apply_overrides,
    dataset_fingerprint,
    load_config,
    load_model,
    render_report,
    run_experiment,
    save_model,
    stage,
)
from samplerank.ranker import score
from samplerank.stats import GaussianModel
from samplerank.synth import SynthConfig, generate

SMALL_TRAIN = {"n_trees": 8, "max_depth": 3, "learning_rate": 0.3, "min_samples_leaf": 10}


def ratings_goal(name, delta):
    rule = {"kind": "additive", "delta": delta}
    return {"name": name, "mu": {"item_rating": rule, "restaurant_rating": rule}}


def small_config(goals=(), **extra):
    raw = {
        "seed": 3,
        "synth": {"n_customers": 120},
        "train": SMALL_TRAIN,
        "k_grid": [1, 2, 5],
        "goals": list(goals),
    }
    raw.update(extra)
    return raw


@pytest.fixture(scope="module")
def ratings_run():
    goals = [ratings_goal(f"Goal {i}", 0.1 * i) for i in range(1, 6)]
    return run_experiment(ExperimentConfig.from_dict(small_config(goals)))


class TestConfig:
    def test_section_seeds_follow_top_level_seed(self):
        cfg = ExperimentConfig.from_dict(small_config())
        assert cfg.synth.seed == cfg.split_seed == cfg.sampler.seed == cfg.train.seed == cfg.em.seed == 3

    def test_explicit_section_seed_wins(self):
        cfg = ExperimentConfig.from_dict(small_config(sampler={"seed": 9}))
        assert cfg.sampler.seed == 9 and cfg.train.seed == 3

    def test_cli_seed_override_replaces_section_seeds(self):
        raw = apply_overrides(small_config(sampler={"seed": 9}), {"seed": 5})
        cfg = ExperimentConfig.from_dict(raw)
        assert cfg.sampler.seed == 5 and cfg.synth.seed == 5

    def test_topk_defaults_to_goal_features(self):
        cfg = ExperimentConfig.from_dict(small_config())
        assert cfg.topk_features == ("item_rating", "restaurant_rating")

    @pytest.mark.parametrize(
        "extra",
        [
            {"bogus": 1},
            {"model": {"family": "gaussian", "components": 2}},
            {"model": "kde"},
            {"goals": [ratings_goal("a", 0.1), ratings_goal("a", 0.2)]},
            {"goals": [ratings_goal("baseline", 0.1)]},
            {"goals": [{"mu": {}}]},
            {"k_grid": [0, 1]},
            {"topk_features": ["nope"]},
            {"fit_rows": "negatives"},
            {"train": {"n_trees": 0}},
        ],
    )
    def test_invalid(self, extra):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(small_config(**extra))

    def test_needs_exactly_one_data_source(self):
        raw = small_config()
        del raw["synth"]
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(raw)

    def test_hash_ignores_out_and_jobs(self):
        a = ExperimentConfig.from_dict(small_config(out="x", jobs=4))
        b = ExperimentConfig.from_dict(small_config())
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != ExperimentConfig.from_dict(small_config(seed=4)).config_hash()

    def test_load_config_resolves_relative_data(self, tmp_path):
        ds = generate(SynthConfig(n_customers=20))
        (tmp_path / "data").mkdir()
        write_sessions(ds, tmp_path / "data" / "s.csv")
        write_schema(ds.schema, tmp_path / "data" / "schema.json")
        (tmp_path / "cfg.json").write_text(json.dumps({"data": "data/s.csv", "schema": "data/schema.json"}))
        cfg = load_config(tmp_path / "cfg.json")
        assert cfg.data_path == str(tmp_path / "data" / "s.csv")
        assert cfg.schema == ds.schema

    def test_invalid_json(self, tmp_path):
        (tmp_path / "cfg.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "cfg.json")


class TestRun:
    def test_baseline_only(self):
        art = run_experiment(ExperimentConfig.from_dict(small_config()))
        assert [e["name"] for e in art.report["experiments"]] == ["Baseline"]
        inc = art.report["experiments"][0]["incremental"]
        assert inc["auc"] == 0 and inc["ndcg"] == 0
        assert all(v == 0 for row in inc["topk"].values() for v in row.values())

    def test_rows_in_config_order(self, ratings_run):
        names = [e["name"] for e in ratings_run.report["experiments"]]
        assert names == ["Baseline"] + [f"Goal {i}" for i in range(1, 6)]
        assert len(ratings_run.results) == 6

    def test_every_model_sees_the_same_test_set(self, ratings_run):
        n = ratings_run.test.n_examples
        for r in ratings_run.results:
            assert r.eval.n_examples == n
        assert ratings_run.report["split"]["test_fingerprint"] == dataset_fingerprint(ratings_run.test)

    def test_sampled_sets_come_from_train_only(self, ratings_run):
        train_ids = {s.session_id for s in ratings_run.train}
        test_customers = set(ratings_run.test.customer_ids)
        for r in ratings_run.results[1:]:
            assert {s.session_id for s in r.sampled} <= train_ids
            assert not set(r.sampled.customer_ids) & test_customers

    def test_baseline_does_not_depend_on_goals(self, ratings_run):
        alone = run_experiment(ExperimentConfig.from_dict(small_config()))
        assert alone.results[0].ranker == ratings_run.results[0].ranker

    def test_stronger_goal_keeps_fewer_sessions(self, ratings_run):
        accepted = [e["sample"]["accepted_sessions"] for e in ratings_run.report["experiments"][1:]]
        assert accepted == sorted(accepted, reverse=True)

    def test_size_matched_baseline(self):
        art = run_experiment(ExperimentConfig.from_dict(
            small_config([ratings_goal("g", 0.3)], size_matched_baseline=True)
        ))
        g = art.result("g")
        assert g.size_matched_eval is not None
        entry = art.report["experiments"][1]["size_matched"]
        assert entry["incremental"]["auc"] == pytest.approx(g.eval.auc - g.size_matched_eval.auc)

    def test_gmm_family(self):
        art = run_experiment(ExperimentConfig.from_dict(
            small_config([ratings_goal("g", 0.2)], model={"family": "gmm", "components": 2})
        ))
        assert art.report["density"]["kind"] == "gmm"
        assert sum(art.result("g").sample_report.component_counts) == len(art.result("g").sampled)

    def test_failure_is_stage_tagged(self):
        far = ratings_goal("far", 50.0)
        with pytest.raises(StageError) as err:
            run_experiment(ExperimentConfig.from_dict(small_config([far])))
        assert err.value.stage == "sample:far"
        assert str(err.value).startswith("[sample:far] EmptySampleError")

    def test_stage_passes_through_other_errors(self):
        with pytest.raises(ZeroDivisionError):
            with stage("x"):
                1 / 0


class TestDeterminism:
    def test_serial_and_parallel_reports_are_byte_identical(self, tmp_path):
        cfg = ExperimentConfig.from_dict(small_config([ratings_goal("a", 0.2), ratings_goal("b", 0.4)]))
        run_experiment(cfg, tmp_path / "one", jobs=1)
        run_experiment(cfg, tmp_path / "two", jobs=2)
        run_experiment(cfg, tmp_path / "again", jobs=1)
        ref = (tmp_path / "one" / "report.json").read_bytes()
        assert (tmp_path / "two" / "report.json").read_bytes() == ref
        assert (tmp_path / "again" / "report.json").read_bytes() == ref
        for rel in ("models/goal-b.json", "sampled/goal-a.jsonl", "report.md"):
            assert (tmp_path / "two" / rel).read_bytes() == (tmp_path / "one" / rel).read_bytes()


@pytest.fixture(scope="module")
def out(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run_experiment(ExperimentConfig.from_dict(small_config([ratings_goal("Goal 1", 0.2)])), out)
    return out


class TestArtifacts:
    def test_layout(self, out):
        for rel in (
            "config.json", "report.json", "report.md", "split/train.jsonl", "split/test.jsonl",
            "density/base.json", "density/goal-1.json", "sampled/goal-1.jsonl", "sampled/goal-1.report.json",
            "models/baseline.json", "models/goal-1.json", "eval/baseline.json", "eval/goal-1.json",
        ):
            assert (out / rel).is_file(), rel

    def test_markdown_rerenders_identically(self, out):
        report = json.loads((out / "report.json").read_text())
        assert render_report(report) == (out / "report.md").read_text()

    def test_markdown_tables(self, out):
        md = (out / "report.md").read_text()
        assert "| Experiment | AUC | NDCG |" in md
        topk = md.split("## top@k")[1].split("\n\n")[1].splitlines()
        assert [row.split(" | ")[0].strip("| ") for row in topk[2:]] == ["1", "2", "5"]

    def test_model_files_are_stable_under_resave(self, tmp_path, out):
        for rel in ("models/goal-1.json", "density/base.json", "density/goal-1.json"):
            save_model(load_model(out / rel), tmp_path / "again.json")
            assert (tmp_path / "again.json").read_bytes() == (out / rel).read_bytes(), rel

    def test_save_load_round_trip(self, tmp_path, ratings_run):
        model = ratings_run.results[2].ranker
        save_model(model, tmp_path / "m.json")
        probes = np.random.default_rng(1).normal(loc=3.0, size=(100, 7))
        np.testing.assert_array_equal(score(load_model(tmp_path / "m.json"), probes), score(model, probes))
        g = GaussianModel.from_params([0.0, 1.0], np.eye(2))
        save_model(g, tmp_path / "g.json")
        assert load_model(tmp_path / "g.json") == g

    def test_truncated_model_file(self, tmp_path, out):
        text = (out / "models" / "goal-1.json").read_text()
        (tmp_path / "cut.json").write_text(text[: len(text) // 2])
        with pytest.raises(CorruptModelError):
            load_model(tmp_path / "cut.json")

    def test_bumped_version(self, tmp_path, out):
        d = json.loads((out / "models" / "goal-1.json").read_text())
        d["format_version"] = 2
        (tmp_path / "v2.json").write_text(json.dumps(d))
        with pytest.raises(VersionMismatchError):
            load_model(tmp_path / "v2.json")
