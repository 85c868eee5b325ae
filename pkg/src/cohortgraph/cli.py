"""Command line entry point: ``cohortgraph <command> [options]``.

Exit status is 0 on success, 2 for usage or configuration errors (the message
names the offending field) and 1 for failures while running.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import config as C

COMMANDS = ("synth", "preprocess", "graph", "train", "eval", "ensemble", "explain", "stats")


class UsageError(Exception):
    pass


def _load_document(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise C.ConfigError("<document>", f"not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise C.ConfigError("<document>", "top level must be a mapping")
    return data


def _set(doc: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = doc
    for key in parents:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise C.ConfigError(key, "expected a mapping")
    node[leaf] = value


def experiment_config(args, overrides: dict = ()) -> C.ExperimentConfig:
    doc = _load_document(args.config)
    if args.profile is not None:
        doc["profile"] = args.profile
    if args.seed is not None:
        doc["seed"] = args.seed
    for key, value in dict(overrides).items():
        if value is not None:
            _set(doc, key, value)
    return C.from_dict(doc)


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _echo(msg: str) -> None:
    print(msg, flush=True)


# -- commands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import generate, write_cohort

    overrides = {"cohort.synth.n_patients": args.n}
    if args.seed is not None:
        overrides["cohort.synth.seed"] = args.seed
    cfg = experiment_config(args, overrides)
    cohort = generate(cfg.cohort.synth)
    out = write_cohort(cohort, _out(args, "cohort"), cfg.cohort.synth)
    _echo(f"wrote {len(cohort)} patients to {out}")
    return 0


def cmd_preprocess(args) -> int:
    from .io import read_volume, write_volume
    from .synth import preprocess_volume, to_hounsfield

    src = Path(args.input)
    files = sorted(src.glob("*.json")) if src.is_dir() else [src]
    if not files:
        raise UsageError(f"no volume headers under {src}")
    out = _out(args, "preprocessed")
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        vol, spacing = read_volume(f)
        raw = to_hounsfield(vol) if args.synthetic_hu else vol
        res = preprocess_volume(raw, spacing, args.target_spacing)
        write_volume(out / f.name, res, (args.target_spacing,) * 3)
    _echo(f"preprocessed {len(files)} volumes into {out}")
    return 0


def _cohort(cfg: C.ExperimentConfig, path: Optional[str]):
    from .synth import generate, read_cohort

    if path:
        return read_cohort(path)
    return read_cohort(cfg.cohort.path) if cfg.cohort.path else generate(cfg.cohort.synth)


def cmd_graph(args) -> int:
    from .popgraph import fit_feature_weights, knn_graph, severity_encode, write_weights_csv
    from .radiomics import FEATURE_NAMES
    from .tabular import LABEL_COLUMNS, METADATA_COLUMNS, TabularPipeline, ZScorer, assemble_node_features

    cfg = experiment_config(args, {"train.task": args.task})
    cohort = _cohort(cfg, args.cohort)
    rows = np.arange(len(cohort))
    meta = TabularPipeline.fit(cohort.metadata, rows, METADATA_COLUMNS).transform(cohort.metadata)
    rad = ZScorer.fit(cohort.radiomics).transform(cohort.radiomics)
    feats = assemble_node_features(meta, rad)
    labels = cohort.labels
    if cfg.train.task in ("multilabel", "seg-only"):
        y = severity_encode(*(labels.T.astype(bool)))
    else:
        y = labels[:, LABEL_COLUMNS.index(cfg.train.task)]
    names = METADATA_COLUMNS + FEATURE_NAMES
    g = cfg.graph
    weights = fit_feature_weights(feats, y, g.weighting, names, g.mi_neighbors, g.mi_reps, seed=cfg.seed)
    graph = knn_graph(feats, weights, g.k, g.p, ids=cohort.ids, squared_kernel=g.squared_kernel)
    out = _out(args, "graph")
    out.mkdir(parents=True, exist_ok=True)
    graph.to_csv(out / "edges.csv")
    write_weights_csv(out / "weights.csv", weights, names)
    _echo(f"wrote {graph.n * graph.k} edges and {len(names)} weights to {out}")
    return 0


def cmd_train(args) -> int:
    from .metrics import summarize, write_json
    from .trainer import run_experiment

    overrides = {
        "train.task": args.task,
        "model.arch": args.arch,
        "model.pretrained": args.pretrained,
        "model.dtype": args.dtype,
        "cohort.path": args.cohort,
        "runs.outer": args.outer,
        "runs.inner": args.inner,
        "runs.replicate": args.replicate,
    }
    cfg = experiment_config(args, overrides)
    out = _out(args, "runs")

    def log(res):
        parts = [f"run {res.split.outer}_{res.split.inner}", f"{res.seconds:.1f}s", f"best epoch {res.best_epoch}"]
        parts += [f"{k} auc {v.auc:.3f} ap {v.ap:.3f}" for k, v in res.report.tasks.items()]
        if res.report.segmentation is not None:
            parts.append(f"merged dice {res.report.segmentation.merged_pathology:.3f}")
        _echo(", ".join(parts))

    results = run_experiment(cfg, out, log=log, workers=args.workers)
    if results and results[0].labels:
        summary = [summarize(name, cfg.model.arch, [r.report.tasks[name] for r in results]) for name in results[0].labels]
        write_json(out / cfg.train.task / "summary.json", summary)
    _echo(f"wrote {len(results)} run directories under {out / cfg.train.task}")
    return 0


def _run_dirs(root: Path) -> list:
    dirs = sorted({p.parent for p in root.rglob("metrics.json")})
    if not dirs:
        raise UsageError(f"no run directories under {root}")
    return dirs


def _prediction_files(run: Path) -> dict:
    files = {}
    for f in sorted(run.glob("predictions*.csv")):
        label = f.stem[len("predictions"):].lstrip("_") or None
        files[label] = f
    return files


def cmd_eval(args) -> int:
    from .fusion import read_predictions_csv
    from .metrics import MetricsReport, evaluate_task, summarize, write_json

    root = Path(args.runs)
    per_run, by_label, archs = {}, {}, set()
    for run in _run_dirs(root):
        stored = json.loads((run / "metrics.json").read_text(encoding="utf-8"))
        archs.add(stored.get("architecture", "unknown"))
        report = MetricsReport.from_dict(stored)
        for label, f in _prediction_files(run).items():
            name = label or stored.get("task", "task")
            p = read_predictions_csv(f)
            report.tasks[name] = evaluate_task(p["probabilities"], p["labels"], p["threshold"])
            by_label.setdefault(name, []).append(report.tasks[name])
        per_run[str(run.relative_to(root))] = report.to_dict()
    arch = ",".join(sorted(archs))
    payload = {"runs": per_run, "summary": [summarize(k, arch, v) for k, v in sorted(by_label.items())]}
    out = _out(args, str(root / "report.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, payload)
    _echo(f"evaluated {len(per_run)} runs into {out}")
    return 0


def cmd_ensemble(args) -> int:
    from dataclasses import asdict

    from .fusion import read_predictions_csv, write_predictions_csv
    from .metrics import write_json
    from .trainer import ensemble_predictions

    root = Path(args.runs)
    groups = {}
    for run in _run_dirs(root):
        outer = run.name.split("_")[0]
        groups.setdefault((str(run.parent.relative_to(root)), outer), []).append(run)
    out = _out(args, str(root / "ensemble"))
    rows = []
    for (task_dir, outer), runs in sorted(groups.items()):
        labels = sorted(_prediction_files(runs[0]), key=lambda x: x or "")
        for label in labels:
            members = [read_predictions_csv(_prediction_files(r)[label]) for r in runs]
            ens = ensemble_predictions(members)
            dest = out / task_dir / outer
            dest.mkdir(parents=True, exist_ok=True)
            suffix = f"_{label}" if label else ""
            write_predictions_csv(dest / f"predictions{suffix}.csv", ens.ids, ens.labels, ens.probabilities, ens.threshold)
            row = {
                "task": task_dir,
                "outer": int(outer) if outer.isdigit() else outer,
                "label": label,
                "members": [r.name for r in runs],
                "ensemble": asdict(ens.metrics),
                "member_mean_ap": float(np.mean([m.ap for m in ens.member_metrics])),
                "member_mean_auc": float(np.mean([m.auc for m in ens.member_metrics])),
            }
            write_json(dest / f"metrics{suffix}.json", row)
            rows.append(row)
    write_json(out / "summary.json", rows)
    _echo(f"ensembled {len(rows)} outer folds into {out}")
    return 0


def cmd_explain(args) -> int:
    from .gnn import AttentionTrace

    run = Path(args.run)
    path = run / "attention.json"
    if not path.exists():
        raise UsageError(f"{path} not found; only graph attention runs record traces")
    traces = json.loads(path.read_text(encoding="utf-8"))
    if args.patient:
        if args.patient not in traces:
            raise UsageError(f"patient {args.patient} has no trace in {run}")
        traces = {args.patient: traces[args.patient]}
    out = _out(args, str(run / "explain"))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ranking.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("patient", "rank", "neighbor", "attention"))
        for pid, d in traces.items():
            trace = AttentionTrace.from_dict(d)
            trace.write_json(out / f"{pid}.json")
            for rank, (node, alpha) in enumerate(trace.ranking(0), start=1):
                w.writerow((pid, rank, node, repr(alpha)))
    _echo(f"explained {len(traces)} patients into {out}")
    return 0


def read_grouped_csv(path) -> dict:
    """feature -> {group: GroupSummary}.

    Accepts summary rows (``feature,group,mean,std,n``) or raw values in
    wide form (a ``group`` column plus one column per feature).
    """
    from .radiomics import GroupSummary

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        rows = list(reader)
    out: dict = {}
    if {"feature", "group", "mean", "std", "n"} <= set(fields):
        for r in rows:
            out.setdefault(r["feature"], {})[r["group"]] = GroupSummary(float(r["mean"]), float(r["std"]), int(r["n"]))
        return out
    if "group" not in fields:
        raise UsageError(f"{path}: expected a 'group' column or feature,group,mean,std,n rows")
    features = [f for f in fields if f != "group"]
    values: dict = {}
    for r in rows:
        for f in features:
            cell = r[f].strip()
            values.setdefault(f, {}).setdefault(r["group"], []).append(float(cell) if cell else float("nan"))
    for f, groups in values.items():
        out[f] = {g: GroupSummary.from_values(v) for g, v in groups.items()}
    return out


def cmd_stats(args) -> int:
    from .radiomics import welch_t_test

    table = read_grouped_csv(args.input)
    rows = []
    for feature, groups in table.items():
        if len(groups) != 2:
            raise UsageError(f"feature {feature!r} has {len(groups)} groups; a t-test needs exactly two")
        (ga, a), (gb, b) = groups.items()
        res = welch_t_test(a, b, equal_var=args.test == "student")
        rows.append({
            "feature": feature,
            "groups": {g: {"mean": s.mean, "std": s.std, "n": s.n} for g, s in groups.items()},
            "test": args.test,
            "t": res.t,
            "df": res.df,
            "p": res.p,
            "significant": bool(res.p < args.alpha),
        })
    text = json.dumps(rows, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# -- argument parsing -----------------------------------------------------------

def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="experiment seed (synth: cohort seed)")
    common.add_argument("--config", help="YAML experiment configuration")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--profile", choices=sorted(C.PROFILES), help="preset scale (explicit config keys win)")

    parser = argparse.ArgumentParser(prog="cohortgraph", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--n", type=int, help="number of patients")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="resample, clip and normalise volumes")
    p.add_argument("--input", required=True, help="volume header or directory of headers")
    p.add_argument("--target-spacing", type=float, default=3.6)
    p.add_argument("--synthetic-hu", action="store_true", help="map normalised synthetic intensities to HU first")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("graph", parents=[common], help="build the weighted population graph")
    p.add_argument("--cohort", help="cohort directory (default: config cohort)")
    p.add_argument("--task", choices=("icu", "vent", "mort", "multilabel"))
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train", parents=[common], help="run the nested cross-validation")
    p.add_argument("--task", choices=C.TASKS)
    p.add_argument("--arch", choices=C.ARCHS)
    p.add_argument("--cohort", help="cohort directory (default: generate from config)")
    p.add_argument("--pretrained", help="seg-only output directory for pretrained architectures")
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--outer", type=_int_list, help="outer folds to run, e.g. 0,1")
    p.add_argument("--inner", type=_int_list, help="inner folds to run")
    p.add_argument("--replicate", type=int, help="reseed runs without changing folds")
    p.add_argument("--workers", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="recompute metrics from run predictions")
    p.add_argument("--runs", required=True, help="directory containing run directories")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", parents=[common], help="average inner-loop models per outer fold")
    p.add_argument("--runs", required=True, help="directory containing run directories")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("explain", parents=[common], help="export attention traces and neighbour rankings")
    p.add_argument("--run", required=True, help="run directory with attention.json")
    p.add_argument("--patient", help="restrict to one test patient")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("stats", parents=[common], help="two-group t-tests from grouped CSV")
    p.add_argument("--input", required=True, help="grouped CSV")
    p.add_argument("--test", choices=("student", "welch"), default="student")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"cohortgraph: invalid config: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"cohortgraph: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"cohortgraph: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
