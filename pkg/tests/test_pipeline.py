"""Synthetic generation, metrics, config handling, and staged runs."""

import json

import numpy as np
import pytest

from ddlc import classify, core, encoding, labelprop, pipeline
from ddlc.pipeline import (Metrics, PipelineConfig, SynthSpec, evaluate,
                           generate_synthetic, parse_kv_file, run_pipeline)

TINY_SPEC = SynthSpec(
    num_classes=3, train_per_class=8, test_per_class=5,
    signal_modes_per_class=2, signal_per_entity=12, background_per_entity=12,
    dim=8, separation=12.0, noise_scale=1.0, background_scale=14.0, seed=101,
)

TINY_CFG = dict(n_trees=60, rank_t=8, llc_k=10, lp_fraction=0.4)


class TestSynthetic:
    def test_counts_and_balance(self):
        spec = SynthSpec(num_classes=5, train_per_class=20, test_per_class=4,
                         dim=16, seed=3)
        train, test = generate_synthetic(spec)
        assert len(train) == 100 and len(test) == 20
        assert np.bincount(train.labels()).tolist() == [20] * 5
        assert np.bincount(test.labels()).tolist() == [4] * 5
        assert train.dim == test.dim == 16

    def test_same_seed_identical(self):
        a_train, a_test = generate_synthetic(TINY_SPEC)
        b_train, b_test = generate_synthetic(TINY_SPEC)
        for a, b in zip(a_train.entities + a_test.entities,
                        b_train.entities + b_test.entities):
            assert a.id == b.id and a.label == b.label
            np.testing.assert_array_equal(a.descriptors, b.descriptors)

    def test_zero_noise_pins_signal_to_modes(self):
        spec = SynthSpec(num_classes=2, train_per_class=2, test_per_class=1,
                         signal_modes_per_class=2, signal_per_entity=6,
                         background_per_entity=0, dim=4, separation=5.0,
                         noise_scale=0.0, seed=9)
        train, _ = generate_synthetic(spec)
        for e in train.entities:
            # every descriptor coincides with one of a handful of centers
            uniq = np.unique(e.descriptors, axis=0)
            assert uniq.shape[0] <= spec.signal_modes_per_class

    def test_infeasible_separation(self):
        spec = SynthSpec(num_classes=2, signal_modes_per_class=6, dim=1,
                         separation=1.0, seed=0)
        with pytest.raises(core.ParameterError, match="dimension 1"):
            generate_synthetic(spec)

    def test_spec_validation(self):
        with pytest.raises(core.ParameterError):
            SynthSpec(num_classes=1)
        with pytest.raises(core.ParameterError):
            SynthSpec(separation=0.0)


class TestEvaluate:
    def test_perfect_predictions(self):
        m = evaluate([0, 1, 2], [0, 1, 2], 3)
        assert m.overall_accuracy == 1.0
        np.testing.assert_array_equal(m.confusion, np.eye(3, dtype=int))
        assert m.per_class_accuracy == [1.0, 1.0, 1.0]

    def test_constant_prediction_on_balanced_labels(self):
        truth = [0, 1, 2, 3] * 5
        m = evaluate([1] * 20, truth, 4)
        assert m.overall_accuracy == pytest.approx(0.25)
        assert m.per_class_accuracy == [0.0, 1.0, 0.0, 0.0]

    def test_row_sums_match_class_counts(self):
        rng = np.random.default_rng(4)
        truth = rng.integers(0, 3, size=50)
        pred = rng.integers(0, 3, size=50)
        m = evaluate(pred, truth, 3)
        np.testing.assert_array_equal(
            m.confusion.sum(axis=1), np.bincount(truth, minlength=3)
        )
        assert m.overall_accuracy == pytest.approx(
            np.trace(m.confusion) / 50.0
        )

    def test_length_mismatch(self):
        with pytest.raises(core.ValidationError):
            evaluate([0, 1], [0, 1, 2])


class TestConfig:
    def test_kv_parse_and_overrides(self, tmp_path):
        (tmp_path / "c.cfg").write_text(
            "# comment\nmode=llc\nn_trees=123\nlp_fraction=0.3\n\nseed=5\n"
        )
        cfg = PipelineConfig.from_mapping(parse_kv_file(tmp_path / "c.cfg"),
                                          {"n_trees": 77})
        assert cfg.mode == "llc"
        assert cfg.n_trees == 77  # flag beats file
        assert cfg.lp_fraction == 0.3
        assert cfg.seed == 5

    def test_unknown_key_rejected(self):
        with pytest.raises(core.ParameterError, match="unknown config key"):
            PipelineConfig.from_mapping({"n_tres": "10"})

    def test_bad_literal_rejected(self):
        with pytest.raises(core.ParameterError, match="cannot parse"):
            PipelineConfig.from_mapping({"n_trees": "lots"})

    def test_bool_parsing(self):
        cfg = PipelineConfig.from_mapping({"disable_ranking": "true",
                                           "gmm_on_raw": "0"})
        assert cfg.disable_ranking is True
        assert cfg.gmm_on_raw is False

    def test_range_validation(self):
        with pytest.raises(core.ParameterError):
            PipelineConfig.from_mapping({"bandwidth_m": "0.2"})
        with pytest.raises(core.ParameterError):
            PipelineConfig.from_mapping({"mode": "vlad"})

    def test_empty_value_means_unset(self):
        cfg = PipelineConfig.from_mapping({"sigma_g": "", "max_depth": ""})
        assert cfg.sigma_g is None and cfg.max_depth is None


def run_tiny(tmp_path, name, **overrides):
    train, test = generate_synthetic(TINY_SPEC)
    cfg = PipelineConfig(run_dir=str(tmp_path / name), seed=31, **{**TINY_CFG, **overrides})
    metrics = run_pipeline(cfg, train=train, test=test)
    return cfg, metrics


class TestRunPipeline:
    def test_artifacts_written(self, tmp_path):
        cfg, metrics = run_tiny(tmp_path, "a")
        run_dir = tmp_path / "a"
        for artifact in ("dictionary.bin", "dictionary.meta", "encoded_train.bin",
                         "encoded_train.manifest", "encoded_test.bin",
                         "encoded_test.manifest", "forest.bin",
                         "predictions.tsv", "metrics.json", "timings.json"):
            assert (run_dir / artifact).exists(), artifact
        persisted = json.loads((run_dir / "metrics.json").read_text())
        assert persisted["overall_accuracy"] == metrics.overall_accuracy
        assert metrics.stage_runtimes.keys() >= {
            "load", "dictionary", "encoding", "training", "prediction",
            "refinement", "evaluation",
        }

    def test_disable_labelprop_keeps_forest_labels(self, tmp_path):
        cfg, metrics = run_tiny(tmp_path, "b", disable_labelprop=True)
        rows = pipeline.read_predictions(tmp_path / "b" / "predictions.tsv")
        assert all(forest == refined for _, forest, _, refined in rows)
        assert metrics.overall_accuracy == metrics.forest_accuracy

    def test_fixed_top_b_caps_class_counts(self, tmp_path):
        cfg, metrics = run_tiny(tmp_path, "c", fixed_top_b=2)
        assert metrics.dictionary_sizes == [
            min(2, n) for n in metrics.unfiltered_sizes
        ]

    def test_disable_ranking_keeps_everything(self, tmp_path):
        cfg, metrics = run_tiny(tmp_path, "d", disable_ranking=True)
        assert metrics.dictionary_sizes == metrics.unfiltered_sizes

    def test_selection_shrinks_dictionary(self, tmp_path):
        cfg, metrics = run_tiny(tmp_path, "e")
        assert sum(metrics.dictionary_sizes) < sum(metrics.unfiltered_sizes)

    def test_thread_count_changes_nothing(self, tmp_path):
        _, m1 = run_tiny(tmp_path, "t1", threads=1)
        _, m2 = run_tiny(tmp_path, "t2", threads=3)
        for name in ("dictionary.bin", "dictionary.meta", "forest.bin",
                     "encoded_train.bin", "encoded_test.bin",
                     "predictions.tsv", "metrics.json"):
            assert (tmp_path / "t1" / name).read_bytes() == \
                (tmp_path / "t2" / name).read_bytes(), name

    def test_resume_from_persisted_stages(self, tmp_path):
        """Reloading every artifact reproduces the run's predictions exactly."""
        cfg, metrics = run_tiny(tmp_path, "f")
        run_dir = tmp_path / "f"
        enc_test, num_classes = encoding.load_encoded(
            run_dir / "encoded_test.manifest", "llc"
        )
        forest = classify.load_forest(run_dir / "forest.bin")
        preds = classify.predict_dataset(forest, enc_test)
        lp_cfg = labelprop.AffinityConfig(cfg.lp_sigma, cfg.lp_fraction,
                                          cfg.lp_max_iter, cfg.lp_tol)
        refined = labelprop.refine_predictions(enc_test, preds, lp_cfg,
                                               num_classes=num_classes)
        rows = pipeline.read_predictions(run_dir / "predictions.tsv")
        assert [r[1] for r in rows] == [int(p.label) for p in preds]
        assert [r[3] for r in rows] == [int(r_) for r_ in refined]

    def test_requires_seed(self):
        cfg = PipelineConfig(run_dir="unused")
        with pytest.raises(core.ParameterError, match="seed"):
            run_pipeline(cfg, train=None, test=None)

    def test_stage_failures_are_tagged(self, tmp_path):
        train, test = generate_synthetic(TINY_SPEC)
        cfg = PipelineConfig(run_dir=str(tmp_path / "g"), seed=1,
                             rank_t=10_000, **{k: v for k, v in TINY_CFG.items()
                                               if k != "rank_t"})
        with pytest.raises(core.StageError, match=r"stage\[dictionary\]"):
            run_pipeline(cfg, train=train, test=test)


class TestPredictionsFile:
    def test_round_trip(self, tmp_path):
        rows = [("e0", 1, 0.75, 1), ("e1", 0, 1.0, 2)]
        pipeline.write_predictions(tmp_path / "p.tsv", rows)
        assert pipeline.read_predictions(tmp_path / "p.tsv") == rows

    def test_malformed_line(self, tmp_path):
        (tmp_path / "p.tsv").write_text("e0\t1\t0.5\n")
        with pytest.raises(core.ManifestError):
            pipeline.read_predictions(tmp_path / "p.tsv")
