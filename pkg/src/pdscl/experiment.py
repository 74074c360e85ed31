"""Cross-validated training and evaluation of the four compared methods."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from pdscl import metrics
from pdscl.core import BatchMeta, SampleMeta
from pdscl.model import (
    LossConfig,
    ModelParams,
    forward,
    init_params,
    loss_and_grads,
    sgd_step,
)
from pdscl.splits import fold_partition, make_folds
from pdscl.synthdata import derived_rng

log = logging.getLogger(__name__)

METHODS = ("ce_mobile_only", "ce_combined", "dat", "pdscl")
LOSS_MODE = {"ce_mobile_only": "ce", "ce_combined": "ce", "dat": "dat", "pdscl": "ce+pdscl"}
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    metadata: str = ""
    features_dir: str = ""
    out_dir: str = "runs"
    methods: tuple = METHODS
    lambda_pdscl: float = 0.5
    tau: float = 0.5
    lambda_dat: float = 0.2
    folds: int = 5
    seed: int = 0
    epochs: int = 150
    batch_size: int = 32
    lr: float = 0.05
    hidden: int = 64
    dim: int = 32
    standardize: bool = True

    def __post_init__(self):
        self.methods = tuple(self.methods)
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {METHODS}")
        if self.tau <= 0 or self.lambda_pdscl < 0 or self.lambda_dat < 0:
            raise ConfigError("tau must be positive and lambdas non-negative")
        if self.folds < 2 or self.epochs < 1 or self.batch_size < 2 or self.lr <= 0:
            raise ConfigError("need folds >= 2, epochs >= 1, batch_size >= 2, lr > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s) {sorted(unknown)}")
        return cls(**d)

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, lambda_pdscl=self.lambda_pdscl, lambda_dat=self.lambda_dat)


def training_subset(method: str, train: Sequence[SampleMeta]) -> list[SampleMeta]:
    if method == "ce_mobile_only":
        return [s for s in train if s.domain == "mobile"]
    return list(train)


def _has_positive(meta: BatchMeta, idx) -> bool:
    lab = meta.labels[idx]
    pat = [meta.patient_ids[i] for i in idx]
    dom = meta.domain_ids[idx]
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            if lab[a] == lab[b] and (pat[a] != pat[b] or dom[a] != dom[b]):
                return True
    return False


def make_batches(meta: BatchMeta, batch_size: int, rng, need_positive: bool = False) -> list[np.ndarray]:
    """Shuffled mini-batches covering the set once; a trailing singleton joins the previous batch.

    With ``need_positive`` every batch lacking a positive pair gets its last
    member swapped for a sample that forms one with its first member, when
    the data contains such a sample.
    """
    n = len(meta)
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    if need_positive:
        for b, idx in enumerate(batches):
            if len(idx) < 2 or _has_positive(meta, idx):
                continue
            a = idx[0]
            partners = [j for j in range(n) if j not in set(idx.tolist())
                        and meta.labels[j] == meta.labels[a]
                        and (meta.patient_ids[j] != meta.patient_ids[a] or meta.domain_ids[j] != meta.domain_ids[a])]
            if partners:
                idx = idx.copy()
                idx[-1] = partners[int(rng.integers(len(partners)))]
                batches[b] = idx
    return batches


def input_standardizer(x: np.ndarray):
    """Per-band mean and scale of the training inputs; constant bands keep scale 1."""
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return mu, np.where(sd > 1e-6, sd, 1.0)


def unstandardize(params: ModelParams, mu: np.ndarray, sd: np.ndarray) -> ModelParams:
    """Fold ``(x - mu) / sd`` into the first affine layer so the model acts on raw inputs."""
    w1 = params.w1 / sd[:, None]
    return replace(params, w1=w1, b1=params.b1 - mu @ w1)


def train_model(x: np.ndarray, meta: BatchMeta, method: str, cfg: ExperimentConfig, fold: int) -> ModelParams:
    """Plain SGD; all randomness comes from (seed, fold[, epoch]).

    The method is deliberately not part of the stream, so methods trained on
    the same fold share initial weights and batch order and differ only in
    their objective (and, for ``ce_mobile_only``, the training subset).

    With ``cfg.standardize`` SGD runs on per-band standardized inputs and the
    returned parameters are mapped back to act on the raw features.
    """
    mode = LOSS_MODE[method]
    if cfg.standardize:
        mu, sd = input_standardizer(x)
        x = (x - mu) / sd
    init_seed = int(derived_rng(cfg.seed, "init", str(fold)).integers(2**31))
    params = init_params(init_seed, x.shape[1], cfg.hidden, cfg.dim)
    lc = cfg.loss_config
    for epoch in range(cfg.epochs):
        rng = derived_rng(cfg.seed, "batches", str(fold), str(epoch))
        for idx in make_batches(meta, cfg.batch_size, rng, need_positive=(mode == "ce+pdscl")):
            _, grads = loss_and_grads(params, x[idx], meta.take(idx), mode, lc)
            params = sgd_step(params, grads, cfg.lr)
    return unstandardize(params, mu, sd) if cfg.standardize else params


def predict(params: ModelParams, x: np.ndarray):
    """(abnormal probability, argmax class) per row."""
    out = forward(x, params, keep_cache=False)
    z = out.class_logits
    p_abn = 1.0 / (1.0 + np.exp(z[:, 0] - z[:, 1]))
    return p_abn, np.argmax(z, axis=1)


def evaluate_predictions(rows: Sequence[dict]) -> dict:
    """Metrics block from prediction rows (label, score_abnormal, pred[, fine_label])."""
    labels = [int(r["label"]) for r in rows]
    scores = [float(r["score_abnormal"]) for r in rows]
    preds = [int(r["pred"]) for r in rows]
    fine = [r.get("fine_label") for r in rows] if all("fine_label" in r for r in rows) else None
    return metrics.predictions_report(labels, scores, preds, fine)


def _mean_defined(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def aggregate(fold_blocks: Sequence[dict]) -> dict:
    """Mean of per-fold scores (folds where a score is undefined are skipped) and pooled-count scores."""
    pooled = metrics.MetricsCounts(0, 0, 0, 0)
    for b in fold_blocks:
        c = b["counts"]
        pooled = pooled + metrics.MetricsCounts(c["c_n"], c["n_n"], c["c_ab"], c["n_ab"])
    both = pooled.n_n > 0 and pooled.n_ab > 0
    sp, se, sc = metrics.sp_se_sc(pooled) if both else (None, None, None)
    return {
        "mean_of_folds": {k: _mean_defined([b[k] for b in fold_blocks]) for k in ("sp", "se", "sc", "auc")},
        "folds_scored": sum(b["sc"] is not None for b in fold_blocks),
        "pooled": {"sp": sp, "se": se, "sc": sc},
    }


def run_fold(method, fold, train, val, features, cfg):
    subset = training_subset(method, train)
    if not subset:
        raise ConfigError(f"method {method} has no training samples in fold {fold}")
    xt = np.stack([features[s.sample_id] for s in subset])
    params = train_model(xt, BatchMeta.from_samples(subset), method, cfg, fold)
    if not val:
        return params, []
    xv = np.stack([features[s.sample_id] for s in val])
    scores, preds = predict(params, xv)
    rows = [
        {"sample_id": s.sample_id, "label": s.label_index, "score_abnormal": float(sc),
         "pred": int(p), "fine_label": s.fine_label}
        for s, sc, p in zip(val, scores, preds)
    ]
    return params, rows


def check_data(index: Sequence[SampleMeta], cfg: ExperimentConfig) -> None:
    mobile = [s for s in index if s.domain == "mobile"]
    if not mobile:
        raise ConfigError("dataset has no mobile recordings; validation sets would be empty")
    patients = {s.patient_id for s in index}
    if len(patients) < cfg.folds:
        raise ConfigError(f"{len(patients)} patients cannot fill {cfg.folds} folds")


def _fold_job(args):
    method, fold, train, val, features, cfg = args
    return run_fold(method, fold, train, val, features, cfg)[1]


def fold_workers() -> int:
    """Process count for fold-level parallelism, from ``PDSCL_THREADS`` (default 1)."""
    raw = os.environ.get("PDSCL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PDSCL_THREADS must be an integer, got {raw!r}") from None


def run_experiment(index: Sequence[SampleMeta], features: dict, cfg: ExperimentConfig,
                   out_dir=None, workers: int | None = None) -> dict:
    """Train and score every configured method on every fold.

    ``features`` maps sample_id to a pooled (mels,) vector or a (frames, mels)
    spectrogram. With ``out_dir``, writes ``report.json``, one predictions CSV
    and one ROC CSV per method and fold. Fold jobs may run in ``workers``
    processes; results do not depend on it.
    """
    check_data(index, cfg)
    features = {k: (v.mean(axis=0) if np.ndim(v) == 2 else np.asarray(v)) for k, v in features.items()}
    fa = make_folds([s.patient_id for s in index], cfg.folds, cfg.seed)
    report = {"schema_version": SCHEMA_VERSION, "config": _config_dict(cfg), "methods": {}}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    parts = {fold: fold_partition(index, fa, fold) for fold in range(cfg.folds)}
    # a fold whose patients have no mobile clips has nothing to validate on
    jobs = [(m, f, *parts[f], features, cfg) for m in cfg.methods for f in range(cfg.folds) if parts[f][1]]
    workers = fold_workers() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fold_job, jobs))
    else:
        results = [_fold_job(j) for j in jobs]
    all_rows = {(j[0], j[1]): r for j, r in zip(jobs, results)}
    for method in cfg.methods:
        blocks = []
        for fold in range(cfg.folds):
            train, val = parts[fold]
            rows = all_rows.get((method, fold), [])
            block = {"fold": fold, "n_train": len(training_subset(method, train)), "n_val": len(val)}
            block.update(evaluate_predictions(rows))
            blocks.append(block)
            log.info("%s fold %d: Sc=%s AUC=%s", method, fold, block["sc"], block["auc"])
            if out is not None:
                write_predictions_csv(out / f"predictions_{method}_fold{fold}.csv", rows)
                if block["auc"] is not None:
                    labels = [r["label"] for r in rows]
                    scores = [r["score_abnormal"] for r in rows]
                    metrics.write_roc_csv(out / f"roc_{method}_fold{fold}.csv", metrics.roc_curve(scores, labels))
        report["methods"][method] = {"folds": blocks, "aggregate": aggregate(blocks)}
    if out is not None:
        write_report(out / "report.json", report)
    return report


def _config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["methods"] = list(cfg.methods)
    return d


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


PREDICTION_COLUMNS = ("sample_id", "label", "score_abnormal", "pred")


def write_predictions_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for r in rows:
            w.writerow([r["sample_id"], r["label"], repr(float(r["score_abnormal"])), r["pred"]])


def read_predictions_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != PREDICTION_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(PREDICTION_COLUMNS)}")
        return [{"sample_id": r["sample_id"], "label": int(r["label"]),
                 "score_abnormal": float(r["score_abnormal"]), "pred": int(r["pred"])} for r in reader]


def load_or_compute_features(index: Sequence[SampleMeta], features_dir=None) -> dict:
    """Pooled (mels,) vector per sample, reading ``<sample_id>.pdsf`` caches when present.

    Missing caches are computed from the WAV and written back when
    ``features_dir`` is given.
    """
    from pdscl.frontend import extract_features, load_features, read_wav, save_features

    out = {}
    cache = Path(features_dir) if features_dir else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    for s in index:
        path = cache / f"{s.sample_id}.pdsf" if cache is not None else None
        if path is not None and path.exists():
            spec = load_features(path)
        else:
            spec = extract_features(read_wav(s.path))
            if path is not None:
                save_features(path, spec)
        out[s.sample_id] = spec.mean(axis=0)
    return out
