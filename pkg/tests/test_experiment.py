import json

import numpy as np
import pytest

from pdscl import metrics
from pdscl.core import BatchMeta
from pdscl.model import forward, init_params
from pdscl.experiment import (
    ConfigError,
    ExperimentConfig,
    aggregate,
    check_data,
    fold_workers,
    load_or_compute_features,
    make_batches,
    read_predictions_csv,
    input_standardizer,
    run_experiment,
    train_model,
    unstandardize,
    write_predictions_csv,
)
from pdscl.synthdata import CorpusConfig, generate_corpus, load_metadata

FAST = dict(epochs=3, batch_size=8, hidden=8, dim=4)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = CorpusConfig(n_patients=10, mobile_fraction=1.0, clips_per_patient_per_domain=2, seed=1,
                       duration_range_s=(0.3, 0.5))
    _, csv_path = generate_corpus(cfg, root)
    index = load_metadata(csv_path)
    return index, load_or_compute_features(index, root / "features"), root


class TestConfig:
    def test_default_loss_weights(self):
        cfg = ExperimentConfig()
        assert (cfg.lambda_pdscl, cfg.tau, cfg.lambda_dat, cfg.folds) == (0.5, 0.5, 0.2, 5)
        assert cfg.methods == ("ce_mobile_only", "ce_combined", "dat", "pdscl")

    @pytest.mark.parametrize("kw", [dict(methods=("svm",)), dict(tau=0.0), dict(lambda_dat=-1.0),
                                    dict(folds=1), dict(lr=0.0), dict(batch_size=1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_from_dict_unknown_key(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            ExperimentConfig.from_dict({"learning_rate": 0.1})

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv("PDSCL_THREADS", "3")
        assert fold_workers() == 3
        monkeypatch.setenv("PDSCL_THREADS", "many")
        with pytest.raises(ConfigError):
            fold_workers()


class TestBatches:
    def meta(self, n=21, seed=0):
        rng = np.random.default_rng(seed)
        return BatchMeta(rng.integers(0, 2, n), [f"p{i}" for i in rng.integers(0, 6, n)], rng.integers(0, 2, n))

    def test_cover_once(self):
        meta = self.meta()
        batches = make_batches(meta, 5, np.random.default_rng(0))
        np.testing.assert_array_equal(np.sort(np.concatenate(batches)), np.arange(21))
        assert min(len(b) for b in batches) >= 2

    def test_trailing_singleton_merged(self):
        batches = make_batches(self.meta(n=11), 5, np.random.default_rng(0))
        assert [len(b) for b in batches] == [5, 6]

    def test_positive_pairs_guaranteed(self):
        # patients 0..3 each one clip; labels 0,1,0,1 -> batches of 2 often lack a positive
        meta = BatchMeta([0, 1, 0, 1, 0, 1, 0, 1], ["a", "b", "c", "d", "e", "f", "g", "h"], [0] * 8)
        for seed in range(20):
            for idx in make_batches(meta, 2, np.random.default_rng(seed), need_positive=True):
                lab = meta.labels[idx]
                assert lab[0] == lab[1]

    def test_no_partner_leaves_batch(self):
        meta = BatchMeta([0, 1], ["a", "a"], [0, 0])
        (batch,) = make_batches(meta, 2, np.random.default_rng(0), need_positive=True)
        assert sorted(batch.tolist()) == [0, 1]


class TestTraining:
    def test_bit_identical(self, corpus):
        index, feats, _ = corpus
        x = np.stack([feats[s.sample_id] for s in index])
        meta = BatchMeta.from_samples(index)
        cfg = ExperimentConfig(**FAST)
        a = train_model(x, meta, "pdscl", cfg, fold=0)
        b = train_model(x, meta, "pdscl", cfg, fold=0)
        assert a.fingerprint() == b.fingerprint()
        c = train_model(x, meta, "pdscl", cfg, fold=1)
        assert a.fingerprint() != c.fingerprint()

    def test_methods_share_random_streams(self, corpus):
        """With a zero contrastive weight the pdscl run is the ce_combined run, bit for bit."""
        index, feats, _ = corpus
        x = np.stack([feats[s.sample_id] for s in index])
        meta = BatchMeta.from_samples(index)
        cfg = ExperimentConfig(lambda_pdscl=0.0, **FAST)
        a = train_model(x, meta, "ce_combined", cfg, fold=3)
        b = train_model(x, meta, "pdscl", cfg, fold=3)
        assert a.fingerprint() == b.fingerprint()
        assert train_model(x, meta, "pdscl", ExperimentConfig(**FAST), fold=3).fingerprint() != a.fingerprint()

    def test_standardization_folded_into_first_layer(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((30, 16)) * rng.uniform(0.01, 5, 16) + rng.uniform(-20, 0, 16)
        x[:, 3] = -7.0  # constant band keeps unit scale
        mu, sd = input_standardizer(x)
        assert sd[3] == 1.0
        p = init_params(0, 16, 8, 4)
        raw = forward(x, unstandardize(p, mu, sd))
        std = forward((x - mu) / sd, p)
        np.testing.assert_allclose(raw.class_logits, std.class_logits, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(raw.features, std.features, rtol=1e-9, atol=1e-9)


@pytest.fixture(scope="module")
def run(corpus, tmp_path_factory):
    index, feats, _ = corpus
    out = tmp_path_factory.mktemp("run")
    report = run_experiment(index, feats, ExperimentConfig(seed=4, **FAST), out)
    return report, out


class TestRunExperiment:
    def test_structure(self, run):
        report, out = run
        assert report["schema_version"] == 1
        for method, block in report["methods"].items():
            assert [b["fold"] for b in block["folds"]] == [0, 1, 2, 3, 4]
            assert set(block["aggregate"]) == {"mean_of_folds", "folds_scored", "pooled"}
            for f in range(5):
                assert (out / f"predictions_{method}_fold{f}.csv").is_file()
        assert json.loads((out / "report.json").read_text()) == report

    def test_training_sets(self, run, corpus):
        report, _ = run
        for b_mob, b_all in zip(report["methods"]["ce_mobile_only"]["folds"], report["methods"]["ce_combined"]["folds"]):
            assert b_all["n_train"] == 2 * b_mob["n_train"]
            assert b_all["n_val"] == b_mob["n_val"] == 4

    def test_report_recomputable_from_predictions(self, run):
        report, out = run
        for method, block in report["methods"].items():
            recomputed = []
            for b in block["folds"]:
                rows = read_predictions_csv(out / f"predictions_{method}_fold{b['fold']}.csv")
                r = metrics.predictions_report([x["label"] for x in rows], [x["score_abnormal"] for x in rows],
                                               [x["pred"] for x in rows])
                for key in ("sp", "se", "sc", "auc", "counts"):
                    assert r[key] == b[key]
                recomputed.append(r)
            assert aggregate(recomputed) == block["aggregate"]

    def test_rerun_byte_identical(self, run, corpus, tmp_path):
        _, out = run
        index, feats, _ = corpus
        run_experiment(index, feats, ExperimentConfig(seed=4, **FAST), tmp_path)
        assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()

    def test_parallel_matches_serial(self, corpus):
        index, feats, _ = corpus
        cfg = ExperimentConfig(seed=2, methods=("pdscl", "dat"), **FAST)
        assert run_experiment(index, feats, cfg, workers=2) == run_experiment(index, feats, cfg, workers=1)

    def test_spectrogram_features_accepted(self, corpus):
        index, feats, root = corpus
        from pdscl.frontend import load_features

        specs = {s.sample_id: load_features(root / "features" / f"{s.sample_id}.pdsf") for s in index}
        cfg = ExperimentConfig(seed=2, methods=("ce_combined",), **FAST)
        assert run_experiment(index, specs, cfg) == run_experiment(index, feats, cfg)


class TestChecks:
    def test_no_mobile(self, corpus):
        index, _, _ = corpus
        with pytest.raises(ConfigError, match="mobile"):
            check_data([s for s in index if s.domain == "stethoscope"], ExperimentConfig())

    def test_too_few_patients(self, corpus):
        index, _, _ = corpus
        with pytest.raises(ConfigError, match="patients"):
            check_data(index, ExperimentConfig(folds=11))

    def test_aggregate_skips_undefined(self):
        full = metrics.predictions_report([0, 1, 0, 1], [0.1, 0.9, 0.2, 0.4], [0, 1, 0, 0])
        single = metrics.predictions_report([1, 1], [0.8, 0.3], [1, 0])
        agg = aggregate([full, single])
        assert agg["folds_scored"] == 1
        assert agg["mean_of_folds"]["sc"] == full["sc"]
        assert agg["mean_of_folds"]["se"] == pytest.approx((0.5 + 0.5) / 2)
        assert agg["pooled"]["se"] == pytest.approx(2 / 4)


def test_predictions_csv_round_trip(tmp_path):
    rows = [{"sample_id": "a", "label": 1, "score_abnormal": 1 / 3, "pred": 0},
            {"sample_id": "b", "label": 0, "score_abnormal": 1e-17, "pred": 0}]
    write_predictions_csv(tmp_path / "p.csv", rows)
    assert read_predictions_csv(tmp_path / "p.csv") == rows
    (tmp_path / "bad.csv").write_text("id,label\n")
    with pytest.raises(ValueError):
        read_predictions_csv(tmp_path / "bad.csv")
