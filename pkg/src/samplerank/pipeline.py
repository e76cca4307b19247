"""End-to-end offline experiment: split, fit, build goals, sample, train, evaluate, report.

Every goal model and the baseline are evaluated on the same unsampled test
split. Goals are independent once the split and base density exist, so they
may run in worker processes (``jobs``); results are collected in config
order and are identical for any worker count.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import stats
from .data_model import (
    FeatureSchema,
    SessionDataset,
    goal_matrix,
    load_schema,
    load_sessions,
    split_by_customer,
    write_sessions,
)
from .errors import ConfigError, CorruptModelError, SampleRankError, StageError
from .goal import GoalSpec, build_goal
from .metrics import DEFAULT_K_GRID, EvalReport, evaluate, incremental
from .ranker import GbtModel, TrainConfig, train_pointwise
from .sampler import SamplerConfig, sample
from .stats import EmConfig, fit_gaussian, fit_gmm
from .synth import SynthConfig, generate

log = logging.getLogger(__name__)

REPORT_VERSION = 1
BASELINE = "Baseline"


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    schema: FeatureSchema
    data_path: Optional[str] = None
    data_format: Optional[str] = None
    synth: Optional[SynthConfig] = None
    seed: int = 0
    train_fraction: float = 0.7
    split_seed: int = 0
    family: str = "gaussian"
    components: int = 1
    fit_rows: str = "positives_only"
    em: EmConfig = field(default_factory=EmConfig)
    goals: list[tuple[str, GoalSpec]] = field(default_factory=list)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    k_grid: tuple[int, ...] = DEFAULT_K_GRID
    topk_features: tuple[str, ...] = ()
    size_matched_baseline: bool = False
    jobs: int = 1
    out: Optional[str] = None

    def __post_init__(self):
        if (self.data_path is None) == (self.synth is None):
            raise ConfigError("config needs exactly one data source: 'data' path or 'synth' settings")
        if self.family not in ("gaussian", "gmm"):
            raise ConfigError(f"model family must be 'gaussian' or 'gmm', got {self.family!r}")
        if self.family == "gaussian" and self.components != 1:
            raise ConfigError("gaussian family has exactly one component; use family 'gmm' for p > 1")
        if self.fit_rows not in ("positives_only", "all_rows"):
            raise ConfigError(f"fit_rows must be 'positives_only' or 'all_rows', got {self.fit_rows!r}")
        names = [n for n, _ in self.goals]
        if len(set(names)) != len(names):
            raise ConfigError(f"goal names must be unique: {names}")
        if any(n.lower() == BASELINE.lower() for n in names):
            raise ConfigError(f"goal name {BASELINE!r} is reserved")
        if any(not _slug(n) for n in names):
            raise ConfigError("goal names need at least one letter or digit")
        if len({_slug(n) for n in names}) != len(names):
            raise ConfigError(f"goal names collide after slugging: {names}")
        if not self.k_grid or any(int(k) < 1 for k in self.k_grid):
            raise ConfigError("k_grid must be a non-empty list of integers >= 1")
        if not self.topk_features:
            self.topk_features = self.schema.goal_feature_names
        for f in self.topk_features:
            self.schema.index_of(f)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        known = {
            "data", "synth", "schema", "seed", "split", "model", "fit_rows", "em", "goals",
            "sampler", "train", "k_grid", "topk_features", "size_matched_baseline", "jobs", "out",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        seed = int(d.get("seed", 0))
        base_dir = Path(base_dir) if base_dir is not None else Path(".")

        synth_cfg = None
        data_path = data_format = None
        if d.get("synth") is not None:
            sd = dict(d["synth"])
            sd.setdefault("seed", seed)
            if "schema" in d and "goal_features" not in sd:
                sd["goal_features"] = d["schema"]["goal_features"]
            synth_cfg = SynthConfig.from_dict(sd)
        if d.get("data") is not None:
            data = d["data"]
            if isinstance(data, str):
                data = {"path": data}
            data_path = str(base_dir / data["path"])
            data_format = data.get("format")

        schema_raw = d.get("schema")
        if isinstance(schema_raw, str):
            schema = load_schema(base_dir / schema_raw)
        elif isinstance(schema_raw, dict):
            schema = FeatureSchema.from_dict(schema_raw)
        elif synth_cfg is not None:
            schema = synth_cfg.schema
        else:
            raise ConfigError("config needs a 'schema' when reading data from a file")
        if synth_cfg is not None and tuple(schema.feature_names) != synth_cfg.feature_names:
            raise ConfigError("schema features do not match the synthetic generator's features")

        split = d.get("split", {})
        model = d.get("model", {"family": "gaussian"})
        if isinstance(model, str):
            model = {"family": model}
        em = dict(d.get("em", {}))
        em.setdefault("seed", seed)
        samp = dict(d.get("sampler", {}))
        samp.setdefault("seed", seed)
        train = dict(d.get("train", {}))
        train.setdefault("seed", seed)

        goals = []
        for g in d.get("goals", []):
            if "name" not in g:
                raise ConfigError(f"goal entry without a name: {g}")
            goals.append((str(g["name"]), GoalSpec.from_dict(g)))

        try:
            return cls(
                schema=schema,
                data_path=data_path,
                data_format=data_format,
                synth=synth_cfg,
                seed=seed,
                train_fraction=float(split.get("train_fraction", 0.7)),
                split_seed=int(split.get("seed", seed)),
                family=model.get("family", "gaussian"),
                components=int(model.get("components", 1)),
                fit_rows=d.get("fit_rows", "positives_only"),
                em=EmConfig(**em),
                goals=goals,
                sampler=SamplerConfig(**samp),
                train=TrainConfig(**train),
                k_grid=tuple(int(k) for k in d.get("k_grid", DEFAULT_K_GRID)),
                topk_features=tuple(d.get("topk_features", ())),
                size_matched_baseline=bool(d.get("size_matched_baseline", False)),
                jobs=int(d.get("jobs", 1)),
                out=d.get("out"),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config section: {exc}") from None

    def to_dict(self) -> dict:
        """Fully resolved config; excludes ``out`` and ``jobs``, which do not affect results."""
        out = {
            "schema": self.schema.to_dict(),
            "seed": self.seed,
            "split": {"train_fraction": self.train_fraction, "seed": self.split_seed},
            "model": {"family": self.family, "components": self.components},
            "fit_rows": self.fit_rows,
            "em": vars(self.em).copy(),
            "goals": [{"name": n, **g.to_dict()} for n, g in self.goals],
            "sampler": vars(self.sampler).copy(),
            "train": vars(self.train).copy(),
            "k_grid": list(self.k_grid),
            "topk_features": list(self.topk_features),
            "size_matched_baseline": self.size_matched_baseline,
        }
        if self.synth is not None:
            out["synth"] = self.synth.to_dict()
        else:
            out["data"] = {"path": os.path.basename(self.data_path), "format": self.data_format}
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides or {}), base_dir=Path(path).parent)


def apply_overrides(raw: dict, overrides: dict) -> dict:
    """Apply CLI overrides. A new ``seed`` replaces every section seed too."""
    raw = copy.deepcopy(raw)
    if overrides.get("seed") is not None:
        raw["seed"] = int(overrides["seed"])
        for section in ("split", "em", "sampler", "train", "synth"):
            if isinstance(raw.get(section), dict):
                raw[section].pop("seed", None)
    for key in ("out", "jobs"):
        if overrides.get(key) is not None:
            raw[key] = overrides[key]
    return raw


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _slug(name: str) -> str:
    s = re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")
    return s[5:] if s.startswith("goal-") and len(s) > 5 else s


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (SampleRankError, ValueError, OSError, KeyError) as exc:
        raise StageError(name, exc) from exc


# --------------------------------------------------------------------------
# model files


def save_model(model, path) -> None:
    if isinstance(model, GbtModel):
        payload = model.to_dict()
    else:
        payload = stats.model_to_dict(model)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path):
    """Load a ranker or density model saved by :func:`save_model`."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorruptModelError(f"{path}: not valid JSON ({exc.msg} at char {exc.pos})") from None
    if not isinstance(payload, dict):
        raise CorruptModelError(f"{path}: expected a JSON object")
    if payload.get("kind") == "gbt":
        return GbtModel.from_dict(payload)
    return stats.model_from_dict(payload)


# --------------------------------------------------------------------------
# running


@dataclass
class GoalResult:
    name: str
    spec: Optional[GoalSpec]
    goal_model: object = None
    sampled: Optional[SessionDataset] = None
    sample_report: object = None
    ranker: Optional[GbtModel] = None
    eval: Optional[EvalReport] = None
    size_matched_ranker: Optional[GbtModel] = None
    size_matched_eval: Optional[EvalReport] = None


@dataclass
class ExperimentArtifacts:
    config: ExperimentConfig
    train: SessionDataset
    test: SessionDataset
    base_model: object
    results: list[GoalResult]
    report: dict

    def result(self, name: str) -> GoalResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)


def _fit_base(cfg: ExperimentConfig, train: SessionDataset):
    X = goal_matrix(train, cfg.fit_rows)
    if cfg.family == "gaussian":
        return fit_gaussian(X, cfg.em.reg_covar)
    return fit_gmm(X, cfg.components, cfg.em)


def _size_matched_subset(train: SessionDataset, n: int, seed: int, name: str) -> SessionDataset:
    key = int.from_bytes(hashlib.blake2b(f"{seed}\x1f{name}".encode(), digest_size=8).digest(), "little")
    rng = np.random.default_rng(key)
    keep = np.sort(rng.choice(len(train), size=n, replace=False))
    return train.subset(keep)


def _run_goal(payload):
    """Worker: one goal from goal construction through evaluation."""
    name, spec, cfg, train, test, base = payload
    res = GoalResult(name, spec)
    features, ks = list(cfg.topk_features), list(cfg.k_grid)
    if spec is None:
        with stage("train:baseline"):
            res.ranker = train_pointwise(train, cfg.train)
        with stage("eval:baseline"):
            res.eval = evaluate(res.ranker, test, features, ks)
        return res
    with stage(f"goal:{name}"):
        res.goal_model = build_goal(base, spec, train.schema)
    with stage(f"sample:{name}"):
        res.sampled, res.sample_report = sample(train, base, res.goal_model, cfg.sampler)
    with stage(f"train:{name}"):
        res.ranker = train_pointwise(res.sampled, cfg.train)
    with stage(f"eval:{name}"):
        res.eval = evaluate(res.ranker, test, features, ks)
    if cfg.size_matched_baseline:
        with stage(f"size-matched:{name}"):
            sub = _size_matched_subset(train, len(res.sampled), cfg.sampler.seed, name)
            res.size_matched_ranker = train_pointwise(sub, cfg.train)
            res.size_matched_eval = evaluate(res.size_matched_ranker, test, features, ks)
    return res


def _resolve_jobs(jobs: int) -> int:
    if jobs is None or jobs <= 0:
        return os.cpu_count() or 1
    return jobs


def load_data(cfg: ExperimentConfig) -> SessionDataset:
    if cfg.synth is not None:
        return generate(cfg.synth)
    return load_sessions(cfg.data_path, cfg.schema, cfg.data_format)


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: Optional[int] = None) -> ExperimentArtifacts:
    """Run the whole protocol; write artifacts to ``out_dir`` when given."""
    jobs = _resolve_jobs(cfg.jobs if jobs is None else jobs)
    with stage("load"):
        ds = load_data(cfg)
    with stage("split"):
        train, test = split_by_customer(ds, cfg.train_fraction, cfg.split_seed)
    with stage("fit"):
        base = _fit_base(cfg, train)
    log.info("split %d/%d sessions, fitted %s base density", len(train), len(test), cfg.family)

    tasks = [(BASELINE, None)] + list(cfg.goals)
    payloads = [(name, spec, cfg, train, test, base) for name, spec in tasks]
    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(payloads))) as pool:
            results = list(pool.map(_run_goal, payloads))
    else:
        results = [_run_goal(p) for p in payloads]

    report = build_report(cfg, train, test, base, results)
    artifacts = ExperimentArtifacts(cfg, train, test, base, results, report)
    if out_dir is not None:
        with stage("write"):
            write_artifacts(artifacts, out_dir)
    return artifacts


def dataset_fingerprint(ds: SessionDataset) -> str:
    h = hashlib.sha256()
    for s in ds.sessions:
        h.update(s.session_id.encode())
        h.update(b"\x1f")
        h.update(s.customer_id.encode())
        h.update(np.ascontiguousarray(s.features).tobytes())
        h.update(np.ascontiguousarray(s.labels).tobytes())
    return h.hexdigest()


def build_report(cfg, train, test, base, results) -> dict:
    baseline = results[0].eval
    experiments = []
    for r in results:
        entry = {
            "name": r.name,
            "goal": None if r.spec is None else r.spec.to_dict(),
            "eval": r.eval.to_dict(),
            "incremental": incremental(r.eval, baseline).to_dict(),
        }
        if r.sample_report is not None:
            entry["sample"] = r.sample_report.to_dict()
        if r.size_matched_eval is not None:
            entry["size_matched"] = {
                "eval": r.size_matched_eval.to_dict(),
                "incremental": incremental(r.eval, r.size_matched_eval).to_dict(),
            }
        experiments.append(entry)
    return {
        "format_version": REPORT_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "split": {
            "train_sessions": len(train),
            "test_sessions": len(test),
            "train_customers": len(train.customer_ids),
            "test_customers": len(test.customer_ids),
            "test_fingerprint": dataset_fingerprint(test),
        },
        "density": stats.model_to_dict(base),
        "k_grid": list(cfg.k_grid),
        "topk_features": list(cfg.topk_features),
        "experiments": experiments,
    }


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def write_artifacts(art: ExperimentArtifacts, out_dir) -> Path:
    out = Path(out_dir)
    for sub in ("split", "density", "sampled", "models", "eval"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    _write_json(art.report["config"], out / "config.json")
    write_sessions(art.train, out / "split" / "train.jsonl")
    write_sessions(art.test, out / "split" / "test.jsonl")
    save_model(art.base_model, out / "density" / "base.json")
    for r in art.results:
        if r.spec is None:
            stem = "baseline"
        else:
            stem = f"goal-{_slug(r.name)}"
            save_model(r.goal_model, out / "density" / f"{stem}.json")
            write_sessions(r.sampled, out / "sampled" / f"{stem}.jsonl")
            _write_json(r.sample_report.to_dict(), out / "sampled" / f"{stem}.report.json")
        save_model(r.ranker, out / "models" / f"{stem}.json")
        _write_json(r.eval.to_dict(), out / "eval" / f"{stem}.json")
        if r.size_matched_ranker is not None:
            save_model(r.size_matched_ranker, out / "models" / f"size-matched-{_slug(r.name)}.json")
            _write_json(r.size_matched_eval.to_dict(), out / "eval" / f"size-matched-{_slug(r.name)}.json")
    _write_json(art.report, out / "report.json")
    (out / "report.md").write_text(render_report(art.report))
    return out


# --------------------------------------------------------------------------
# rendering


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _table(header, rows) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return lines


def render_report(report: dict) -> str:
    """Markdown tables from a ``report.json`` document (deterministic)."""
    exps = report["experiments"]
    feats = report["topk_features"]
    ks = report["k_grid"]
    lines = [f"# Experiment report `{report['config_hash'][:12]}` (seed {report['seed']})", ""]
    sp = report["split"]
    lines.append(
        f"Train: {sp['train_sessions']} sessions / {sp['train_customers']} customers; "
        f"test: {sp['test_sessions']} sessions / {sp['test_customers']} customers."
    )
    lines += ["", "## AUC and NDCG on the held-out test set", ""]
    lines += _table(
        ["Experiment", "AUC", "NDCG"],
        [[e["name"], _fmt(e["eval"]["auc"]), _fmt(e["eval"]["ndcg"])] for e in exps],
    )
    goals = [e for e in exps if e["goal"] is not None]
    if goals:
        lines += ["", "## Sampling", ""]
        lines += _table(
            ["Experiment", "Accepted sessions", "Input sessions", "Acceptance rate", "Clamped"],
            [
                [
                    e["name"],
                    str(e["sample"]["accepted_sessions"]),
                    str(e["sample"]["input_sessions"]),
                    _fmt(e["sample"]["acceptance_rate"]),
                    str(e["sample"]["clamped_count"]),
                ]
                for e in goals
            ],
        )
        lines += ["", "## top@k impact (goal minus baseline, feature units)", ""]
        header = ["top@k"] + [f"{e['name']}: {f}" for e in goals for f in feats]
        rows = []
        for k in ks:
            rows.append([str(k)] + [_fmt(e["incremental"]["topk"][f][str(k)]) for e in goals for f in feats])
        lines += _table(header, rows)
        matched = [e for e in goals if "size_matched" in e]
        if matched:
            lines += ["", "## Size-matched random baselines", ""]
            lines += _table(
                ["Experiment", "AUC (matched)", "NDCG (matched)", "AUC goal - matched", "NDCG goal - matched"],
                [
                    [
                        e["name"],
                        _fmt(e["size_matched"]["eval"]["auc"]),
                        _fmt(e["size_matched"]["eval"]["ndcg"]),
                        _fmt(e["size_matched"]["incremental"]["auc"]),
                        _fmt(e["size_matched"]["incremental"]["ndcg"]),
                    ]
                    for e in matched
                ],
            )
    lines.append("")
    return "\n".join(lines)


def render_report_file(report_json, out_md=None) -> str:
    with open(report_json) as fh:
        report = json.load(fh)
    md = render_report(report)
    if out_md is not None:
        Path(out_md).write_text(md)
    return md
