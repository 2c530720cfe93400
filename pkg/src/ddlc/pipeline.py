"""End-to-end orchestration: config, synthetic data, staged runs, metrics.

A run proceeds dictionary -> encoding -> training -> prediction ->
refinement -> evaluation, persisting every stage's artifacts under a run
directory. Persisted artifacts are reloaded before use so a run resumed
from disk is bit-identical to one that never stopped (descriptor binaries
store float32, so reloading is the canonicalizing step).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import classify, core, dictionary, encoding, labelprop, meanshift

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv_file(path):
    """Flat key=value text; blank lines and #-comments ignored."""
    mapping = {}
    for i, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise core.ManifestError(f"expected key=value, got {line!r}", line=i)
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def _coerce(name, text, kind):
    if text is None or text == "":
        return None
    try:
        if kind is bool:
            lowered = str(text).lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except (TypeError, ValueError):
        raise core.ParameterError(f"config key {name!r}: cannot parse {text!r} as {kind.__name__}")


@dataclass
class PipelineConfig:
    """Every knob of a full run; file values lose to explicit overrides."""

    train_manifest: str | None = None
    test_manifest: str | None = None
    run_dir: str | None = None
    mode: str = "llc"
    seed: int | None = None
    threads: int = 1
    bandwidth_m: float = meanshift.DEFAULT_M
    rank_t: int = dictionary.DEFAULT_T
    rank_w1: float = dictionary.DEFAULT_W1
    rank_h_floor: float = dictionary.DEFAULT_H_FLOOR
    sigma_g: float | None = None
    support_theta: float = dictionary.DEFAULT_SUPPORT_THETA
    llc_k: int = encoding.DEFAULT_LLC_K
    llc_lambda: float = encoding.DEFAULT_LLC_LAMBDA
    gmm_k: int = encoding.DEFAULT_GMM_K
    gmm_on_raw: bool = False
    n_trees: int = classify.DEFAULT_N_TREES
    min_leaf: int = 1
    max_depth: int | None = None
    lp_fraction: float = labelprop.DEFAULT_CONFIDENT_FRACTION
    lp_sigma: float | None = None
    lp_tol: float = labelprop.DEFAULT_TOL
    lp_max_iter: int = labelprop.DEFAULT_MAX_ITER
    disable_ranking: bool = False
    fixed_top_b: int | None = None
    disable_labelprop: bool = False

    _FIELD_TYPES = {
        "train_manifest": str, "test_manifest": str, "run_dir": str,
        "mode": str, "seed": int, "threads": int,
        "bandwidth_m": float, "rank_t": int, "rank_w1": float,
        "rank_h_floor": float, "sigma_g": float, "support_theta": float,
        "llc_k": int, "llc_lambda": float, "gmm_k": int, "gmm_on_raw": bool,
        "n_trees": int, "min_leaf": int, "max_depth": int,
        "lp_fraction": float, "lp_sigma": float, "lp_tol": float,
        "lp_max_iter": int, "disable_ranking": bool, "fixed_top_b": int,
        "disable_labelprop": bool,
    }

    @classmethod
    def from_mapping(cls, mapping, overrides=None):
        values = {}
        for source in (mapping, overrides or {}):
            for key, value in source.items():
                if key not in cls._FIELD_TYPES:
                    raise core.ParameterError(f"unknown config key {key!r}")
                if value is None:
                    continue
                if isinstance(value, str):
                    value = _coerce(key, value, cls._FIELD_TYPES[key])
                if value is not None:
                    values[key] = value
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self):
        if self.mode not in ("llc", "fisher"):
            raise core.ParameterError(f"mode must be llc or fisher, got {self.mode!r}")
        if self.threads < 1:
            raise core.ParameterError(f"threads must be >= 1, got {self.threads}")
        if not 1.0 <= self.bandwidth_m <= 10.0:
            raise core.ParameterError(f"bandwidth_m={self.bandwidth_m} outside [1, 10]")
        if self.rank_t < 1:
            raise core.ParameterError(f"rank_t must be >= 1, got {self.rank_t}")
        if not 0 <= self.rank_w1 <= 1:
            raise core.ParameterError(f"rank_w1 must be in [0, 1], got {self.rank_w1}")
        if self.rank_h_floor <= 0:
            raise core.ParameterError(f"rank_h_floor must be positive")
        if self.sigma_g is not None and self.sigma_g <= 0:
            raise core.ParameterError(f"sigma_g must be positive, got {self.sigma_g}")
        if self.fixed_top_b is not None and self.fixed_top_b < 1:
            raise core.ParameterError(f"fixed_top_b must be >= 1, got {self.fixed_top_b}")
        if not 0 < self.lp_fraction <= 1:
            raise core.ParameterError(f"lp_fraction must be in (0, 1], got {self.lp_fraction}")
        return self


@dataclass
class Metrics:
    """Evaluation summary; stage runtimes ride along but are not persisted
    with the deterministic metrics (they go to a separate timings file)."""

    overall_accuracy: float
    per_class_accuracy: list
    confusion: np.ndarray
    dictionary_sizes: list | None = None
    unfiltered_sizes: list | None = None
    forest_accuracy: float | None = None
    stage_runtimes: dict | None = None

    def to_dict(self):
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.tolist(),
            "dictionary_sizes": self.dictionary_sizes,
            "unfiltered_sizes": self.unfiltered_sizes,
            "forest_accuracy": self.forest_accuracy,
        }


def evaluate(predicted, truth, num_classes=None):
    """Accuracy, per-class accuracy, and the confusion matrix."""
    predicted = np.asarray(predicted, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if predicted.shape != truth.shape or predicted.ndim != 1 or len(predicted) == 0:
        raise core.ValidationError(
            f"prediction/truth shapes {predicted.shape} vs {truth.shape}"
        )
    if num_classes is None:
        num_classes = int(max(predicted.max(), truth.max())) + 1
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (truth, predicted), 1)
    row_sums = confusion.sum(axis=1)
    per_class = [
        float(confusion[l, l] / row_sums[l]) if row_sums[l] else None
        for l in range(num_classes)
    ]
    overall = float(np.trace(confusion) / len(truth))
    return Metrics(overall, per_class, confusion)


@dataclass
class SynthSpec:
    """Desk-scale synthetic generator: class-specific signal modes plus a
    background distribution shared by every class."""

    num_classes: int = 5
    train_per_class: int = 20
    test_per_class: int = 10
    signal_modes_per_class: int = 3
    signal_per_entity: int = 20
    background_per_entity: int = 40
    dim: int = 16
    separation: float = 10.0
    noise_scale: float = 1.0
    background_scale: float = 10.0
    seed: int = 0

    _FIELD_TYPES = {
        "num_classes": int, "train_per_class": int, "test_per_class": int,
        "signal_modes_per_class": int, "signal_per_entity": int,
        "background_per_entity": int, "dim": int, "separation": float,
        "noise_scale": float, "background_scale": float, "seed": int,
    }

    def __post_init__(self):
        counts = (self.num_classes, self.train_per_class, self.test_per_class,
                  self.signal_modes_per_class, self.signal_per_entity, self.dim)
        if any(c < 1 for c in counts):
            raise core.ParameterError("all synthetic counts must be >= 1")
        if self.num_classes < 2:
            raise core.ParameterError("need at least 2 classes")
        if self.background_per_entity < 0:
            raise core.ParameterError("background_per_entity must be >= 0")
        if self.separation <= 0:
            raise core.ParameterError("separation must be positive")
        if self.noise_scale < 0 or self.background_scale < 0:
            raise core.ParameterError("scales must be nonnegative")

    @classmethod
    def from_mapping(cls, mapping, overrides=None):
        values = {}
        for source in (mapping, overrides or {}):
            for key, value in source.items():
                if key not in cls._FIELD_TYPES:
                    raise core.ParameterError(f"unknown synth key {key!r}")
                if value is None:
                    continue
                if isinstance(value, str):
                    value = _coerce(key, value, cls._FIELD_TYPES[key])
                if value is not None:
                    values[key] = value
        return cls(**values)


def _place_mode_centers(spec, rng):
    total = spec.num_classes * spec.signal_modes_per_class
    # Box sized so centers land within a small multiple of the separation:
    # classes must be distinguishable but not trivially far apart.
    side = spec.separation * max(2.0, total ** (1.0 / spec.dim))
    centers = []
    attempts = 0
    while len(centers) < total:
        attempts += 1
        if attempts > 500 * total:
            raise core.ParameterError(
                f"cannot place {total} mode centers separated by {spec.separation} "
                f"in dimension {spec.dim}"
            )
        candidate = rng.uniform(0.0, side, size=spec.dim)
        if all(np.linalg.norm(candidate - c) >= spec.separation for c in centers):
            centers.append(candidate)
    return np.vstack(centers).reshape(
        spec.num_classes, spec.signal_modes_per_class, spec.dim
    ), side


def generate_synthetic(spec):
    """Deterministic (seeded) train/test datasets from the spec.

    Signal descriptors scatter around their class's mode centers; background
    descriptors come from one wide Gaussian shared by all classes.
    """
    rng = np.random.default_rng(spec.seed)
    centers, side = _place_mode_centers(spec, rng)
    background_center = np.full(spec.dim, side / 2.0)

    def make_entity(split, label, index):
        modes = centers[label]
        picks = rng.integers(0, spec.signal_modes_per_class, size=spec.signal_per_entity)
        signal = modes[picks] + rng.normal(
            0.0, spec.noise_scale, size=(spec.signal_per_entity, spec.dim)
        )
        parts = [signal]
        if spec.background_per_entity:
            parts.append(background_center + rng.normal(
                0.0, spec.background_scale,
                size=(spec.background_per_entity, spec.dim),
            ))
        return core.Entity(f"{split}_c{label}_e{index:03d}", label, np.vstack(parts))

    train, test = [], []
    for label in range(spec.num_classes):
        for i in range(spec.train_per_class):
            train.append(make_entity("train", label, i))
        for i in range(spec.test_per_class):
            test.append(make_entity("test", label, i))
    return (
        core.DescriptorDataset(train, spec.num_classes, spec.dim, "train"),
        core.DescriptorDataset(test, spec.num_classes, spec.dim, "test"),
    )


def write_predictions(path, rows):
    """Rows of (entity_id, forest_label, confidence, refined_label)."""
    lines = [
        f"{entity_id}\t{forest_label}\t{repr(float(conf))}\t{refined}"
        for entity_id, forest_label, conf, refined in rows
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions(path):
    rows = []
    for i, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 4:
            raise core.ManifestError("expected 4 tab-separated fields", line=i)
        rows.append((parts[0], int(parts[1]), float(parts[2]), int(parts[3])))
    return rows


def build_codebooks(train, cfg):
    """Entity-level reduction followed by per-category clustering."""
    reduced = core.parallel_map(
        lambda e: meanshift.reduce_entity(e, cfg.bandwidth_m),
        train.entities, threads=cfg.threads,
    )
    groups = {l: [] for l in range(train.num_classes)}
    for e in reduced:
        groups[e.label].append(e)

    def per_class(label):
        return meanshift.build_category_codebook(
            groups[label], cfg.bandwidth_m, label=label
        )

    books = core.parallel_map(per_class, range(train.num_classes), threads=cfg.threads)
    return reduced, books


def select_dictionary(temp_books, cfg):
    """Apply ranking plus adaptive (or ablation) selection per class."""
    if cfg.disable_ranking:
        selected = temp_books
    else:
        total = sum(len(cb) for cb in temp_books)
        if cfg.rank_t >= total:
            raise core.ParameterError(
                f"rank_t={cfg.rank_t} must be below the total codeword count {total}"
            )

        def per_class(cb):
            ranked = dictionary.rank_codebook(
                cb, temp_books, cfg.rank_t, cfg.rank_w1, cfg.rank_h_floor
            )
            if cfg.fixed_top_b is not None:
                keep = min(cfg.fixed_top_b, len(ranked))
                return dictionary.CategoryCodebook(
                    ranked.label, list(ranked.codewords[:keep])
                )
            if len(ranked) < 2:
                return ranked
            graph = dictionary.build_chain_graph(ranked)
            sigma_g = cfg.sigma_g
            if sigma_g is None:
                sigma_g = dictionary.mean_edge_weight(graph)
                if sigma_g <= 0:
                    sigma_g = 1.0
            partition = dictionary.dominant_set_bipartition(
                graph, sigma_g, theta=cfg.support_theta
            )
            return dictionary.select_codewords(ranked, partition)

        selected = core.parallel_map(per_class, temp_books, threads=cfg.threads)
    return dictionary.build_global_dictionary(selected, len(temp_books))


def _encode_split(dataset, cfg, global_dict, gmm):
    if cfg.mode == "llc":
        params = encoding.LlcParams(
            global_dict, min(cfg.llc_k, len(global_dict)), cfg.llc_lambda
        )
        return encoding.encode_dataset(dataset, "llc", llc_params=params,
                                       threads=cfg.threads)
    return encoding.encode_dataset(dataset, "fisher", gmm=gmm, threads=cfg.threads)


class _StageTimer:
    def __init__(self):
        self.runtimes = {}

    def run(self, stage, fn):
        start = time.perf_counter()
        try:
            result = fn()
        except core.StageError:
            raise
        except Exception as exc:
            raise core.StageError(stage, exc) from exc
        self.runtimes[stage] = time.perf_counter() - start
        return result


def run_pipeline(cfg, train=None, test=None, log=None):
    """Full run; returns Metrics and leaves every stage's artifacts on disk."""
    if cfg.seed is None:
        raise core.ParameterError("a seed is required for a pipeline run")
    log = log or (lambda msg: None)
    run_dir = Path(cfg.run_dir) if cfg.run_dir else Path("run") / time.strftime("%Y%m%d-%H%M%S")
    run_dir.mkdir(parents=True, exist_ok=True)
    timer = _StageTimer()

    def load_stage():
        loaded_train = train if train is not None else core.load_dataset(cfg.train_manifest, "train")
        loaded_test = test if test is not None else core.load_dataset(cfg.test_manifest, "test")
        if loaded_train.num_classes != loaded_test.num_classes:
            raise core.ValidationError("train/test class counts disagree")
        if loaded_train.dim != loaded_test.dim:
            raise core.ValidationError("train/test dimensions disagree")
        return loaded_train, loaded_test

    train_ds, test_ds = timer.run("load", load_stage)
    log(f"loaded {len(train_ds)} train / {len(test_ds)} test entities, "
        f"d={train_ds.dim}, L={train_ds.num_classes}")

    def dictionary_stage():
        reduced, temp_books = build_codebooks(train_ds, cfg)
        global_dict = select_dictionary(temp_books, cfg)
        dictionary.save_dictionary(global_dict, run_dir / "dictionary.bin",
                                   run_dir / "dictionary.meta")
        reloaded = dictionary.load_dictionary(run_dir / "dictionary.bin",
                                              run_dir / "dictionary.meta")
        return reduced, [len(cb) for cb in temp_books], reloaded

    reduced, unfiltered_sizes, global_dict = timer.run("dictionary", dictionary_stage)
    log(f"dictionary: {global_dict.per_class_counts} selected of {unfiltered_sizes}")

    def encoding_stage():
        gmm = None
        if cfg.mode == "fisher":
            source = train_ds.entities if cfg.gmm_on_raw else reduced
            pool = np.vstack([e.descriptors for e in source])
            gmm = encoding.fit_gmm(pool, cfg.gmm_k, cfg.seed)
            encoding.save_gmm(gmm, run_dir / "gmm.bin")
            gmm = encoding.load_gmm(run_dir / "gmm.bin")
        enc = {}
        for tag, ds in (("train", train_ds), ("test", test_ds)):
            samples = _encode_split(ds, cfg, global_dict, gmm)
            encoding.save_encoded(samples, run_dir / f"encoded_{tag}.bin",
                                  run_dir / f"encoded_{tag}.manifest",
                                  ds.num_classes)
            enc[tag], _ = encoding.load_encoded(
                run_dir / f"encoded_{tag}.manifest", cfg.mode
            )
        return enc["train"], enc["test"]

    enc_train, enc_test = timer.run("encoding", encoding_stage)
    log(f"encoded feature length: {len(enc_train[0].features)}")

    def training_stage():
        params = classify.ForestParams(cfg.n_trees, cfg.min_leaf, cfg.max_depth, cfg.seed)
        forest = classify.train_forest(enc_train, params,
                                       num_classes=train_ds.num_classes,
                                       threads=cfg.threads)
        if forest.oob_error is not None:
            log(f"forest out-of-bag error: {forest.oob_error:.4f}")
        classify.save_forest(forest, run_dir / "forest.bin")
        return classify.load_forest(run_dir / "forest.bin")

    forest = timer.run("training", training_stage)

    predictions = timer.run(
        "prediction",
        lambda: classify.predict_dataset(forest, enc_test, threads=cfg.threads),
    )

    def refinement_stage():
        forest_labels = np.array([p.label for p in predictions], dtype=np.int64)
        if cfg.disable_labelprop:
            refined = forest_labels.copy()
        else:
            lp_cfg = labelprop.AffinityConfig(cfg.lp_sigma, cfg.lp_fraction,
                                              cfg.lp_max_iter, cfg.lp_tol)
            refined = labelprop.refine_predictions(enc_test, predictions, lp_cfg,
                                                   num_classes=test_ds.num_classes)
        rows = [
            (s.entity_id, int(p.label), p.confidence, int(r))
            for s, p, r in zip(enc_test, predictions, refined)
        ]
        write_predictions(run_dir / "predictions.tsv", rows)
        return forest_labels, refined

    forest_labels, refined = timer.run("refinement", refinement_stage)

    def evaluation_stage():
        truth = test_ds.labels()
        metrics = evaluate(refined, truth, test_ds.num_classes)
        metrics.forest_accuracy = evaluate(
            forest_labels, truth, test_ds.num_classes
        ).overall_accuracy
        metrics.dictionary_sizes = list(global_dict.per_class_counts)
        metrics.unfiltered_sizes = unfiltered_sizes
        (run_dir / "metrics.json").write_text(
            json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return metrics

    metrics = timer.run("evaluation", evaluation_stage)
    metrics.stage_runtimes = dict(timer.runtimes)
    (run_dir / "timings.json").write_text(
        json.dumps(timer.runtimes, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    log(f"accuracy: forest {metrics.forest_accuracy:.4f} "
        f"refined {metrics.overall_accuracy:.4f}")
    return metrics
