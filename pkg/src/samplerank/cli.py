"""``samplerank`` command line.

Each subcommand runs one stage of the offline protocol on files; ``run``
executes the whole protocol from an experiment config. Failures exit with
status 2 and a ``[stage]``-tagged message on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data_model import load_schema, load_sessions, split_by_customer, validate, write_schema, write_sessions
from .errors import SampleRankError, StageError
from .goal import GoalSpec, build_goal
from .metrics import DEFAULT_K_GRID, EvalReport, evaluate, incremental
from .pipeline import load_config, load_model, render_report_file, run_experiment, save_model, stage
from .ranker import TrainConfig, train_pointwise
from .sampler import SamplerConfig, sample
from .stats import EmConfig, fit_gaussian, fit_gmm
from .synth import SynthConfig, generate


def _read_json(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


def _dataset(args):
    schema = load_schema(args.schema)
    return load_sessions(args.data, schema, args.format)


def cmd_synth(args):
    with stage("synth"):
        raw = _read_json(args.config)
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.customers is not None:
            raw["n_customers"] = args.customers
        cfg = SynthConfig.from_dict(raw)
        ds = generate(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_sessions(ds, out / "sessions.jsonl")
        write_schema(ds.schema, out / "schema.json")
        _dump(cfg.to_dict(), out / "synth_config.json")
    print(f"wrote {len(ds)} sessions ({ds.n_examples} items) to {out}")


def cmd_validate(args):
    with stage("validate"):
        ds = _dataset(args)
        report = validate(ds)
    _dump(report.to_dict(), args.out)
    return 0 if report.ok else 1


def cmd_split(args):
    with stage("split"):
        ds = _dataset(args)
        train, test = split_by_customer(ds, args.fraction, args.seed or 0)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_sessions(train, out / "train.jsonl")
        write_sessions(test, out / "test.jsonl")
    print(f"train: {len(train)} sessions, test: {len(test)} sessions -> {out}")


def cmd_fit(args):
    with stage("fit"):
        from .data_model import goal_matrix

        ds = _dataset(args)
        X = goal_matrix(ds, args.rows)
        em = _read_json(args.config)
        if args.seed is not None:
            em["seed"] = args.seed
        cfg = EmConfig(**em)
        if args.family == "gaussian":
            model = fit_gaussian(X, cfg.reg_covar)
        else:
            model = fit_gmm(X, args.components, cfg)
        save_model(model, args.out)
    print(f"wrote {args.family} density to {args.out}")


def cmd_sample(args):
    with stage("sample"):
        ds = _dataset(args)
        base = load_model(args.density)
        spec = GoalSpec.from_dict(_read_json(args.goal))
        goal = build_goal(base, spec, ds.schema)
        cfg = SamplerConfig(seed=args.seed or 0, clamp=not args.no_clamp)
        sampled, report = sample(ds, base, goal, cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_sessions(sampled, out / "sampled.jsonl")
        save_model(goal, out / "goal.json")
        _dump(report.to_dict(), out / "report.json")
    print(f"accepted {report.accepted_sessions}/{report.input_sessions} sessions -> {out}")


def cmd_train(args):
    with stage("train"):
        ds = _dataset(args)
        raw = _read_json(args.config)
        if args.seed is not None:
            raw["seed"] = args.seed
        model = train_pointwise(ds, TrainConfig(**raw))
        save_model(model, args.out)
    print(f"trained {len(model.trees)} trees -> {args.out}")


def cmd_eval(args):
    with stage("eval"):
        ds = _dataset(args)
        model = load_model(args.model)
        feats = args.features.split(",") if args.features else list(ds.schema.goal_feature_names)
        ks = [int(k) for k in args.k_grid.split(",")] if args.k_grid else list(DEFAULT_K_GRID)
        report = evaluate(model, ds, feats, ks)
        out = report.to_dict()
        if args.baseline:
            out["incremental"] = incremental(report, EvalReport.from_dict(_read_json(args.baseline))).to_dict()
    _dump(out, args.out)


def cmd_run(args):
    cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "jobs": args.jobs})
    out = args.out or cfg.out
    if out is None:
        raise StageError("run", SampleRankError("no output directory: pass --out or set 'out' in the config"))
    art = run_experiment(cfg, out_dir=out)
    for e in art.report["experiments"]:
        print(f"{e['name']:>16}  AUC {e['eval']['auc']:.4f}  NDCG {e['eval']['ndcg']:.4f}")
    print(f"artifacts in {out}")


def cmd_report(args):
    with stage("report"):
        src = Path(args.artifacts)
        report_json = src / "report.json" if src.is_dir() else src
        out = args.out
        if out is None and src.is_dir():
            out = src / "report.md"
        md = render_report_file(report_json, out)
    if out is None:
        sys.stdout.write(md)
    else:
        print(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samplerank", description="Goal-distribution sampling for learning to rank.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", required=True, help="session file (.jsonl or .csv)")
        sp.add_argument("--schema", required=True, help="schema JSON")
        sp.add_argument("--format", choices=["jsonl", "csv"], default=None)

    sp = sub.add_parser("synth", help="generate a synthetic session dataset")
    sp.add_argument("--config", help="synthetic generator settings (JSON)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--customers", type=int, help="override n_customers")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("validate", help="check dataset invariants")
    data_args(sp)
    sp.add_argument("--out", help="write the JSON report here instead of stdout")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("split", help="customer-level train/test split")
    data_args(sp)
    sp.add_argument("--fraction", type=float, default=0.7)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("fit", help="fit the base density on goal features")
    data_args(sp)
    sp.add_argument("--family", choices=["gaussian", "gmm"], default="gaussian")
    sp.add_argument("--components", type=int, default=1)
    sp.add_argument("--rows", choices=["positives_only", "all_rows"], default="positives_only")
    sp.add_argument("--config", help="EM settings (JSON)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("sample", help="rejection-sample sessions toward a goal")
    data_args(sp)
    sp.add_argument("--density", required=True, help="base density model JSON")
    sp.add_argument("--goal", "--config", dest="goal", required=True, help="goal spec JSON")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--no-clamp", action="store_true", help="do not clamp accept ratios at 1")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("train", help="train the pointwise GBT ranker")
    data_args(sp)
    sp.add_argument("--config", help="training settings (JSON)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="AUC, NDCG and top@k means of a model")
    data_args(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--features", help="comma-separated top@k features (default: goal features)")
    sp.add_argument("--k-grid", help="comma-separated k values")
    sp.add_argument("--baseline", help="baseline eval JSON; adds incremental deltas")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("run", help="run a full experiment from a config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int, help="worker processes for goals (0 = all CPUs)")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("report", help="render report.md from report.json")
    sp.add_argument("--artifacts", required=True, help="run directory or report.json")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = args.func(args)
    except StageError as exc:
        print(f"samplerank {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SampleRankError, OSError, json.JSONDecodeError) as exc:
        print(f"samplerank {args.command}: error: [{args.command}] {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
