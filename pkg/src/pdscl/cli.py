"""Command-line entry point: ``pdscl <subcommand>``.

Every flag has a JSON config-file equivalent (``--config file.json`` with the
flag names, dashes as underscores); flags given on the command line win.

Exit codes: 0 success, 1 gradient check failed, 2 dataset validation
failure, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from pdscl.core import BatchMeta

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_VALIDATION = 2
EXIT_CONFIG = 3

log = logging.getLogger("pdscl")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _seed_list(text):
    return [int(s) for s in str(text).split(",") if s.strip()]


def _method_list(text):
    return tuple(m.strip() for m in str(text).split(",") if m.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdscl", description=__doc__.splitlines()[0], add_help=False)
    p.add_argument("--help", action="help", help="show this help message and exit")
    p.add_argument("--verbose", action="store_true", default=None)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=None, add_help=False)
        sp.add_argument("--help", action="help", help="show this help message and exit")
        sp.add_argument("--config", help="JSON file with defaults for any flag")
        return sp

    g = add("gen-data", "write a synthetic two-domain corpus (WAV + metadata.csv)")
    g.add_argument("--out")
    g.add_argument("--n-patients", type=int)
    g.add_argument("--mobile-fraction", type=float)
    g.add_argument("--clips-per-patient", type=int)
    g.add_argument("--abnormal-fraction", type=float)
    g.add_argument("--seed", type=int)

    f = add("features", "precompute PDSF feature caches for every clip")
    f.add_argument("--metadata")
    f.add_argument("--features-dir")

    def experiment_flags(sp):
        sp.add_argument("--metadata")
        sp.add_argument("--features-dir")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--folds", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--hidden", type=int)
        sp.add_argument("--dim", type=int)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--lambda-pdscl", type=float)
        sp.add_argument("--lambda-dat", type=float)

    t = add("train", "train one method on one fold's training partition")
    experiment_flags(t)
    t.add_argument("--method")
    t.add_argument("--fold", type=int)
    t.add_argument("--checkpoint", help="output checkpoint path")

    e = add("eval", "score a checkpoint on one fold's mobile validation set")
    e.add_argument("--metadata")
    e.add_argument("--features-dir")
    e.add_argument("--checkpoint")
    e.add_argument("--seed", type=int)
    e.add_argument("--folds", type=int)
    e.add_argument("--fold", type=int)
    e.add_argument("--out", help="output directory for predictions.csv, roc.csv, metrics.json")

    gc = add("gradcheck", "compare backprop with central differences for every loss mode")
    gc.add_argument("--seeds", type=int, help="number of random parameter points")
    gc.add_argument("--hidden", type=int)
    gc.add_argument("--dim", type=int)
    gc.add_argument("--batch", type=int)
    gc.add_argument("--tolerance", type=float)

    r = add("run", "full cross-validated comparison of all methods")
    experiment_flags(r)
    r.add_argument("--seeds", help="comma-separated seeds; one report per seed")
    r.add_argument("--methods", help="comma-separated subset of methods")
    r.add_argument("--out")
    return p


DEFAULTS = {
    "gen-data": {"out": "corpus", "n_patients": 40, "mobile_fraction": 0.5, "clips_per_patient": 6,
                 "abnormal_fraction": 0.5, "seed": 0},
    "features": {"metadata": None, "features_dir": None},
    "gradcheck": {"seeds": 20, "hidden": 8, "dim": 8, "batch": 8, "tolerance": 1e-5},
    "train": {"method": "pdscl", "fold": 0, "checkpoint": "model.ckpt"},
    "eval": {"fold": 0, "seed": 0, "folds": 5, "out": "eval"},
    "run": {"out": "runs", "seeds": None, "methods": None},
}


def resolve(args) -> dict:
    """Merge built-in defaults, then the config file, then explicit flags."""
    merged = dict(DEFAULTS.get(args.command, {}))
    if args.command in ("train", "run"):
        from pdscl.experiment import ExperimentConfig

        base = ExperimentConfig()
        merged = {**{f.name: getattr(base, f.name) for f in fields(ExperimentConfig)}, **merged}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}", EXIT_CONFIG) from None
        if not isinstance(file_cfg, dict):
            raise CliError("config file must hold a JSON object", EXIT_CONFIG)
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
        unknown = set(file_cfg) - set(merged) - {"verbose"}
        if unknown:
            raise CliError(f"unknown config key(s) {sorted(unknown)}", EXIT_CONFIG)
        merged.update(file_cfg)
    for k, v in vars(args).items():
        if k in ("command", "config", "verbose") or v is None:
            continue
        merged[k] = v
    return merged


def _experiment_config(opts: dict):
    from pdscl.experiment import ExperimentConfig

    keep = {f.name for f in fields(ExperimentConfig)}
    d = {k: v for k, v in opts.items() if k in keep}
    if isinstance(d.get("methods"), str):
        d["methods"] = _method_list(d["methods"])
    if d.get("methods") is None:
        d.pop("methods", None)
    return ExperimentConfig.from_dict(d)


def _load_index(opts):
    from pdscl.synthdata import load_metadata

    if not opts.get("metadata"):
        raise CliError("--metadata is required", EXIT_CONFIG)
    try:
        return load_metadata(opts["metadata"])
    except FileNotFoundError as e:
        raise CliError(str(e), EXIT_CONFIG) from None
    except ValueError as e:
        raise CliError(f"dataset validation failed: {e}", EXIT_VALIDATION) from None


def cmd_gen_data(opts):
    from pdscl.synthdata import CorpusConfig, generate_corpus

    try:
        cfg = CorpusConfig(n_patients=opts["n_patients"], mobile_fraction=opts["mobile_fraction"],
                           clips_per_patient_per_domain=opts["clips_per_patient"],
                           abnormal_fraction=opts["abnormal_fraction"], seed=opts["seed"])
    except ValueError as e:
        raise CliError(str(e), EXIT_CONFIG) from None
    _, csv_path = generate_corpus(cfg, opts["out"])
    print(csv_path)


def cmd_features(opts):
    from pdscl.experiment import load_or_compute_features

    index = _load_index(opts)
    if not opts.get("features_dir"):
        raise CliError("--features-dir is required", EXIT_CONFIG)
    load_or_compute_features(index, opts["features_dir"])
    print(f"{len(index)} feature files in {opts['features_dir']}")


def _fold_split(index, opts):
    from pdscl.splits import fold_partition, make_folds

    fa = make_folds([s.patient_id for s in index], opts["folds"], opts["seed"])
    if not 0 <= opts["fold"] < opts["folds"]:
        raise CliError(f"--fold must be in [0, {opts['folds']})", EXIT_CONFIG)
    return fold_partition(index, fa, opts["fold"])


def cmd_train(opts):
    from pdscl.experiment import ConfigError, METHODS, load_or_compute_features, train_model, training_subset
    from pdscl.model import save_checkpoint

    if opts["method"] not in METHODS:
        raise CliError(f"unknown method {opts['method']!r}; choose from {METHODS}", EXIT_CONFIG)
    try:
        cfg = _experiment_config(opts)
    except ConfigError as e:
        raise CliError(str(e), EXIT_CONFIG) from None
    index = _load_index(opts)
    train, _ = _fold_split(index, opts)
    subset = training_subset(opts["method"], train)
    if not subset:
        raise CliError(f"no training samples for {opts['method']} in fold {opts['fold']}", EXIT_CONFIG)
    feats = load_or_compute_features(subset, opts.get("features_dir"))
    x = np.stack([feats[s.sample_id] for s in subset])
    params = train_model(x, BatchMeta.from_samples(subset), opts["method"], cfg, opts["fold"])
    steps = cfg.epochs * max(1, len(subset) // cfg.batch_size)
    save_checkpoint(opts["checkpoint"], params, seed=cfg.seed, step=steps)
    print(opts["checkpoint"])


def cmd_eval(opts):
    from pdscl import metrics
    from pdscl.experiment import evaluate_predictions, load_or_compute_features, predict, write_predictions_csv
    from pdscl.model import load_checkpoint

    if not opts.get("checkpoint"):
        raise CliError("--checkpoint is required", EXIT_CONFIG)
    index = _load_index(opts)
    _, val = _fold_split(index, opts)
    if not val:
        raise CliError("validation set is empty (no mobile clips in this fold)", EXIT_CONFIG)
    params, _ = load_checkpoint(opts["checkpoint"])
    feats = load_or_compute_features(val, opts.get("features_dir"))
    scores, preds = predict(params, np.stack([feats[s.sample_id] for s in val]))
    rows = [{"sample_id": s.sample_id, "label": s.label_index, "score_abnormal": float(sc), "pred": int(p),
             "fine_label": s.fine_label} for s, sc, p in zip(val, scores, preds)]
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(out / "predictions.csv", rows)
    block = evaluate_predictions(rows)
    if block["auc"] is not None:
        metrics.write_roc_csv(out / "roc.csv", metrics.roc_curve(scores, [r["label"] for r in rows]))
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(block, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps({k: block[k] for k in ("sp", "se", "sc", "auc")}))


def gradcheck_sweep(n_seeds=20, hidden=8, dim=8, batch=8):
    """Worst relative error per loss mode over ``n_seeds`` random parameter points and batches."""
    from pdscl.model import LOSS_MODES, grad_check, init_params

    worst = {m: 0.0 for m in LOSS_MODES}
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        params = init_params(seed, 128, hidden, dim).map(lambda a: a + 0.1 * rng.standard_normal(a.shape))
        x = rng.standard_normal((batch, 128))
        labels = np.resize([0, 1], batch)
        rng.shuffle(labels)
        meta = BatchMeta(labels, [f"p{i}" for i in rng.integers(0, 3, batch)], rng.integers(0, 2, batch))
        for mode in LOSS_MODES:
            worst[mode] = max(worst[mode], grad_check(params, (x, meta), mode))
    return worst


def cmd_gradcheck(opts):
    worst = gradcheck_sweep(opts["seeds"], opts["hidden"], opts["dim"], opts["batch"])
    ok = True
    for mode, err in worst.items():
        passed = err < opts["tolerance"]
        ok &= passed
        print(f"{mode:9s} max_rel_err={err:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_run(opts):
    from pdscl.experiment import ConfigError, load_or_compute_features, run_experiment, write_report

    seeds = _seed_list(opts["seeds"]) if opts.get("seeds") is not None else [opts["seed"]]
    index = _load_index(opts)
    feats = load_or_compute_features(index, opts.get("features_dir"))
    out = Path(opts["out"])
    summary = {}
    for seed in seeds:
        try:
            cfg = _experiment_config({**opts, "seed": seed})
            report = run_experiment(index, feats, cfg, out / f"seed{seed}")
        except ConfigError as e:
            raise CliError(str(e), EXIT_CONFIG) from None
        for method, block in report["methods"].items():
            summary.setdefault(method, {})[str(seed)] = block["aggregate"]["mean_of_folds"]["sc"]
    table = {}
    for method, per_seed in summary.items():
        vals = [v for v in per_seed.values() if v is not None]
        table[method] = {"per_seed_sc": per_seed, "mean_sc": float(np.mean(vals)) if vals else None}
        print(f"{method:15s} mean Sc {table[method]['mean_sc']}")
    from pdscl.experiment import SCHEMA_VERSION

    write_report(out / "summary.json", {"schema_version": SCHEMA_VERSION, "seeds": seeds, "methods": table})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "features": cmd_features,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        code = COMMANDS[args.command](opts)
    except CliError as e:
        print(f"pdscl: error: {e}", file=sys.stderr)
        return e.code
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
