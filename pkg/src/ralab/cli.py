"""Command-line orchestration and results persistence.

Subcommands: al (active learning run), attack-eval (robustness of a
checkpoint), bias (selection-bias study), retrain (test-selection
retraining), stats (Wilcoxon over stage records), report (merge stage CSVs).
Exit codes: 0 success, 2 config error, 1 runtime error. Every command writes
a manifest.json recording the config snapshot and output digests.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import analysis
from . import learner as learner_mod
from . import retrainer
from .acquisition import ACQUISITION_NAMES
from .attacks import evaluate_robustness, resolve_attack
from .errors import ConfigInvalid, ParseError, RalabError, SchemaError
from .learner import (
    ExperimentConfig,
    TrainSettings,
    build_model,
    load_experiment_data,
    run_active_learning,
)
from .presets import experiment_presets
from .util import append_csv, fmt, read_csv, sha256_file, write_csv

BIAS_HEADER = ["stage", "acquisition", "characteristic", "divergence", "robustness"]
CORR_HEADER = ["stage", "characteristic", "r", "n"]
STATS_HEADER = ["a", "b", "column", "W", "p_value", "n_effective"]


# ---------------------------------------------------------------------------
# config loading
# ---------------------------------------------------------------------------

_TOP_FIELDS = {
    "preset", "seed", "acquisition", "mode", "budget", "initial", "per_stage",
    "dataset", "model", "train", "train_attack", "eval_pgd", "eval_square",
    "mc_passes", "dfal_prepool_factor", "dump_scores", "checkpoint_stages", "timing",
}


def _require(cond, field, detail):
    if not cond:
        raise SchemaError(f"config field {field!r}: {detail}")


def config_from_dict(raw):
    """Validate a config dict (expanding any preset) into an ExperimentConfig."""
    if not isinstance(raw, dict):
        raise SchemaError("config root: expected a JSON object")
    unknown = set(raw) - _TOP_FIELDS
    if unknown:
        raise SchemaError(f"config field {sorted(unknown)[0]!r}: not a recognized field")
    merged = {}
    preset = raw.get("preset")
    if preset is not None:
        presets = experiment_presets()
        _require(preset in presets, "preset", f"unknown preset; have {sorted(presets)}")
        merged.update(presets[preset])
    merged.update({k: v for k, v in raw.items() if k != "preset"})
    _require("seed" in merged, "seed", "required")
    _require(isinstance(merged["seed"], int), "seed", "must be an integer")
    for field in ("budget", "initial", "per_stage", "mc_passes", "dfal_prepool_factor"):
        if field in merged:
            _require(isinstance(merged[field], int), field, "must be an integer")
    for field in ("dataset", "model", "train"):
        if field in merged:
            _require(isinstance(merged[field], dict), field, "must be an object")
    for field in ("dump_scores", "checkpoint_stages", "timing"):
        if field in merged:
            _require(isinstance(merged[field], bool), field, "must be a boolean")
    if "acquisition" in merged:
        _require(
            merged["acquisition"] in ACQUISITION_NAMES,
            "acquisition",
            f"must be one of: {', '.join(ACQUISITION_NAMES)}",
        )
    if "mode" in merged:
        _require(merged["mode"] in ("standard", "robust"), "mode", "must be standard or robust")
    for field in ("train_attack", "eval_pgd", "eval_square"):
        if field in merged and not isinstance(merged[field], (str, dict)):
            raise SchemaError(f"config field {field!r}: must be a preset name or an object")
    kwargs = {k: v for k, v in merged.items() if k in _TOP_FIELDS - {"preset", "train"}}
    if "train" in merged:
        kwargs["train"] = TrainSettings.from_json(merged["train"])
    try:
        cfg = ExperimentConfig(**kwargs)
        cfg.validate()
    except ConfigInvalid:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise SchemaError(f"config error: {exc}") from exc
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _write_manifest(out_dir, config_snapshot, seeds, started, outputs):
    entries = []
    for path in sorted(outputs):
        if os.path.isfile(path):
            entries.append(
                {"path": os.path.relpath(path, out_dir), "sha256": sha256_file(path)}
            )
    manifest = {
        "tool": "ralab",
        "version": __version__,
        "seeds": seeds,
        "started_unix": started,
        "finished_unix": time.time(),
        "config": config_snapshot,
        "outputs": entries,
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def _collect_files(root):
    found = []
    for dirpath, _, files in os.walk(root):
        for f in files:
            if f != "manifest.json":
                found.append(os.path.join(dirpath, f))
    return found


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_al(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.acquisition:
        overrides["acquisition"] = args.acquisition
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    cfg.validate()
    started = time.time()
    seeds = [cfg.seed + k for k in range(args.repeats)]
    for s in seeds:
        from dataclasses import replace

        run_cfg = replace(cfg, seed=s)
        run_dir = args.out if args.repeats == 1 else os.path.join(args.out, f"seed_{s}")
        os.makedirs(run_dir, exist_ok=True)
        records = run_active_learning(run_cfg, out_dir=run_dir)
        last = records[-1]
        print(
            f"al[{run_cfg.acquisition}/{run_cfg.mode}/seed={s}] stages={last.stage} "
            f"labeled={last.labeled} accuracy={last.accuracy:.4f} "
            f"rob_pgd={last.rob_pgd:.4f} rob_square={last.rob_square:.4f}"
        )
    _write_manifest(args.out, cfg.to_json(), seeds, started, _collect_files(args.out))
    return 0


def _cmd_attack_eval(args):
    from . import autodiff as ad

    cfg = load_config(args.config)
    started = time.time()
    train, _, test = load_experiment_data(cfg)
    model = build_model(cfg, train)
    model.load_state(ad.load_checkpoint(args.checkpoint))
    report = evaluate_robustness(
        model,
        test,
        {"pgd": resolve_attack(cfg.eval_pgd), "square": resolve_attack(cfg.eval_square)},
    )
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "attack_eval.csv")
    write_csv(
        out_csv,
        ["checkpoint", "n", "accuracy", "rob_pgd", "rob_square"],
        [[args.checkpoint, str(report.n), fmt(report.clean_accuracy),
          fmt(report.robustness["pgd"]), fmt(report.robustness["square"])]],
    )
    print(
        f"attack-eval n={report.n} accuracy={report.clean_accuracy:.4f} "
        f"rob_pgd={report.robustness['pgd']:.4f} rob_square={report.robustness['square']:.4f}"
    )
    _write_manifest(args.out, cfg.to_json(), [cfg.seed], started, [out_csv])
    return 0


def _run_name(run_dir):
    header, rows = read_csv(os.path.join(run_dir, "stages.csv"))
    col = header.index("acquisition")
    return rows[-1][col]


def _cmd_bias(args):
    started = time.time()
    runs = {}
    for run_dir in args.runs:
        name = _run_name(run_dir)
        if name in runs:
            raise ConfigInvalid(f"two runs share the acquisition name {name!r}")
        runs[name] = run_dir
    records, correlations = analysis.bias_study(runs, rob_column=args.column)
    os.makedirs(args.out, exist_ok=True)
    bias_csv = os.path.join(args.out, "bias.csv")
    corr_csv = os.path.join(args.out, "correlation.csv")
    write_csv(
        bias_csv,
        BIAS_HEADER,
        [[str(r.stage), r.acquisition, r.characteristic, fmt(r.divergence), fmt(r.robustness)]
         for r in records],
    )
    write_csv(
        corr_csv,
        CORR_HEADER,
        [[str(c.stage), c.characteristic, fmt(c.r), str(c.n)] for c in correlations],
    )
    ent = [c.r for c in correlations if c.characteristic == "entropy" and np.isfinite(c.r)]
    if ent:
        print(f"bias: stage-averaged entropy correlation r={np.mean(ent):.4f} over {len(ent)} stages")
    _write_manifest(args.out, {"runs": runs, "column": args.column}, [], started, [bias_csv, corr_csv])
    return 0


def _cmd_retrain(args):
    cfg = load_config(args.config)
    started = time.time()
    seed = cfg.seed if args.seed is None else args.seed
    train, val, test = load_experiment_data(cfg)
    spec = learner_mod.model_spec_for(cfg, train, seed=seed)
    model = retrainer.pretrain_full(spec, train, args.pretrain_epochs, cfg.train, val=val)
    rows = []
    for acq_name in args.acquisitions.split(","):
        for frac in (float(f) for f in args.fractions.split(",")):
            rcfg = retrainer.RetrainConfig(
                fraction=frac,
                acquisition=acq_name.strip(),
                seed=seed,
                pretrain_epochs=args.pretrain_epochs,
                retrain_epochs=args.retrain_epochs,
                train=cfg.train,
                train_attack=cfg.train_attack,
                eval_pgd=cfg.eval_pgd,
                eval_square=cfg.eval_square,
                mc_passes=cfg.mc_passes,
                dfal_prepool_factor=cfg.dfal_prepool_factor,
            )
            report = retrainer.select_retrain_evaluate(model, train, val, test, rcfg)
            rows.append(report.csv_row())
            print(
                f"retrain[{rcfg.acquisition}@{frac:.2%}] baseline rob_pgd="
                f"{report.baseline_robustness['pgd']:.4f} retrained rob_pgd="
                f"{report.retrained_robustness['pgd']:.4f}"
            )
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "retrain.csv")
    write_csv(out_csv, retrainer.RETRAIN_HEADER, rows)
    _write_manifest(args.out, cfg.to_json(), [seed], started, [out_csv])
    return 0


def _stage_column(path, column):
    header, rows = read_csv(path)
    if column not in header:
        raise ConfigInvalid(f"{path} has no column {column!r}")
    idx = header.index(column)
    stage_idx = header.index("stage")
    return {int(r[stage_idx]): float(r[idx]) for r in rows}


def _cmd_stats(args):
    a = _stage_column(args.a, args.column)
    b = _stage_column(args.b, args.column)
    stages = sorted(set(a) & set(b))
    if not stages:
        raise ConfigInvalid("the two runs share no stages")
    w, p, n = analysis.wilcoxon_signed_rank(
        np.array([a[s] for s in stages]), np.array([b[s] for s in stages])
    )
    print(f"wilcoxon W={w:.1f} p={p:.6g} n={n}")
    os.makedirs(args.out, exist_ok=True)
    append_csv(
        os.path.join(args.out, "stats.csv"),
        STATS_HEADER,
        [args.a, args.b, args.column, fmt(w, 1), fmt(p, 9), str(n)],
    )
    return 0


def _cmd_report(args):
    started = time.time()
    by_acq = {}
    for run_dir in args.runs:
        header, rows = read_csv(os.path.join(run_dir, "stages.csv"))
        col = {name: i for i, name in enumerate(header)}
        for r in rows:
            key = (r[col["acquisition"]], int(r[col["stage"]]))
            by_acq.setdefault(key, []).append(
                (int(r[col["labeled"]]), float(r[col["accuracy"]]),
                 float(r[col["rob_pgd"]]), float(r[col["rob_square"]]))
            )
    curve_rows = []
    for (name, stage), vals in sorted(by_acq.items()):
        arr = np.array(vals)
        curve_rows.append(
            [name, str(stage), str(int(arr[0, 0])),
             fmt(arr[:, 1].mean()), fmt(arr[:, 1].std()),
             fmt(arr[:, 2].mean()), fmt(arr[:, 2].std()),
             fmt(arr[:, 3].mean()), fmt(arr[:, 3].std()), str(arr.shape[0])]
        )
    summary_rows = []
    last_stage = {}
    for (name, stage) in by_acq:
        last_stage[name] = max(stage, last_stage.get(name, -1))
    for name in sorted(last_stage):
        arr = np.array(by_acq[(name, last_stage[name])])
        summary_rows.append(
            [name, str(last_stage[name]), fmt(arr[:, 1].mean()),
             fmt(arr[:, 2].mean()), fmt(arr[:, 3].mean()), str(arr.shape[0])]
        )
    os.makedirs(args.out, exist_ok=True)
    curves_csv = os.path.join(args.out, "curves.csv")
    summary_csv = os.path.join(args.out, "summary.csv")
    write_csv(
        curves_csv,
        ["acquisition", "stage", "labeled", "accuracy_mean", "accuracy_std",
         "rob_pgd_mean", "rob_pgd_std", "rob_square_mean", "rob_square_std", "runs"],
        curve_rows,
    )
    write_csv(
        summary_csv,
        ["acquisition", "final_stage", "accuracy", "rob_pgd", "rob_square", "runs"],
        summary_rows,
    )
    print(f"report: {len(curve_rows)} curve rows, {len(summary_rows)} acquisition functions")
    _write_manifest(args.out, {"runs": list(args.runs)}, [], started, [curves_csv, summary_csv])
    return 0


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _build_parser():
    p = argparse.ArgumentParser(prog="ralab", description=__doc__)
    p.add_argument("--version", action="version", version=f"ralab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    al = sub.add_parser("al", help="run one active-learning experiment")
    al.add_argument("--config", required=True)
    al.add_argument("--acquisition", default=None)
    al.add_argument("--mode", default=None, choices=["standard", "robust"])
    al.add_argument("--seed", type=int, default=None)
    al.add_argument("--out", required=True)
    al.add_argument("--repeats", type=int, default=1)
    al.set_defaults(fn=_cmd_al)

    ae = sub.add_parser("attack-eval", help="evaluate robustness of a checkpoint")
    ae.add_argument("--checkpoint", required=True)
    ae.add_argument("--config", required=True)
    ae.add_argument("--out", required=True)
    ae.set_defaults(fn=_cmd_attack_eval)

    bias = sub.add_parser("bias", help="selection-bias study over run dumps")
    bias.add_argument("--runs", nargs="+", required=True)
    bias.add_argument("--column", default="rob_pgd")
    bias.add_argument("--out", required=True)
    bias.set_defaults(fn=_cmd_bias)

    rt = sub.add_parser("retrain", help="test-selection retraining harness")
    rt.add_argument("--config", required=True)
    rt.add_argument("--acquisitions", required=True, help="comma-separated acquisition names")
    rt.add_argument("--fractions", default="0.04", help="comma-separated budget fractions")
    rt.add_argument("--seed", type=int, default=None)
    rt.add_argument("--pretrain-epochs", type=int, default=10)
    rt.add_argument("--retrain-epochs", type=int, default=10)
    rt.add_argument("--out", required=True)
    rt.set_defaults(fn=_cmd_retrain)

    st = sub.add_parser("stats", help="Wilcoxon signed-rank over two stage CSVs")
    st.add_argument("--a", required=True)
    st.add_argument("--b", required=True)
    st.add_argument("--column", default="rob_pgd")
    st.add_argument("--out", default=".")
    st.set_defaults(fn=_cmd_stats)

    rp = sub.add_parser("report", help="merge stage CSVs into curve/summary tables")
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=_cmd_report)
    return p


def _check_acquisition_flags(args):
    names = []
    if getattr(args, "acquisition", None):
        names.append(args.acquisition)
    if getattr(args, "acquisitions", None):
        names.extend(n.strip() for n in args.acquisitions.split(","))
    for name in names:
        if name not in ACQUISITION_NAMES:
            raise ConfigInvalid(
                f"unknown acquisition {name!r}; valid names: {', '.join(ACQUISITION_NAMES)}"
            )


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        _check_acquisition_flags(args)
        return args.fn(args)
    except ConfigInvalid as exc:
        print(f"ralab: config error: {exc}", file=sys.stderr)
        return 2
    except RalabError as exc:
        print(f"ralab: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ralab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
