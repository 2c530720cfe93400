"""Command-line entry points for the dictionary-learning pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import classify, core, dictionary, encoding, labelprop, meanshift, pipeline

_BOOL = argparse.BooleanOptionalAction


def _add_config_flags(parser):
    """Flags mirroring PipelineConfig; unset flags defer to the config file."""
    add = parser.add_argument
    add("--config", help="key=value config file")
    add("--train-manifest")
    add("--test-manifest")
    add("--run-dir")
    add("--mode", choices=["llc", "fisher"])
    add("--threads", type=int)
    add("--bandwidth-m", type=float)
    add("--rank-t", type=int)
    add("--rank-w1", type=float)
    add("--rank-h-floor", type=float)
    add("--sigma-g", type=float)
    add("--support-theta", type=float)
    add("--llc-k", type=int)
    add("--llc-lambda", type=float)
    add("--gmm-k", type=int)
    add("--gmm-on-raw", action=_BOOL, default=None)
    add("--n-trees", type=int)
    add("--min-leaf", type=int)
    add("--max-depth", type=int)
    add("--lp-fraction", type=float)
    add("--lp-sigma", type=float)
    add("--lp-tol", type=float)
    add("--lp-max-iter", type=int)
    add("--disable-ranking", action=_BOOL, default=None)
    add("--fixed-top-b", type=int)
    add("--disable-labelprop", action=_BOOL, default=None)


def _config_from_args(args, seed=None):
    mapping = pipeline.parse_kv_file(args.config) if args.config else {}
    overrides = {
        key: getattr(args, key)
        for key in pipeline.PipelineConfig._FIELD_TYPES
        if hasattr(args, key) and getattr(args, key) is not None
    }
    if seed is not None:
        overrides["seed"] = seed
    return pipeline.PipelineConfig.from_mapping(mapping, overrides)


def _cmd_synth(args):
    mapping = pipeline.parse_kv_file(args.spec) if args.spec else {}
    spec = pipeline.SynthSpec.from_mapping(mapping, {"seed": args.seed})
    train, test = pipeline.generate_synthetic(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_manifest = core.save_dataset(train, out / "train.manifest")
    test_manifest = core.save_dataset(test, out / "test.manifest")
    print(train_manifest)
    print(test_manifest)
    return 0


def _cmd_build_dict(args):
    cfg = _config_from_args(args)
    train = core.load_dataset(args.train_manifest or cfg.train_manifest, "train")
    _, books = pipeline.build_codebooks(train, cfg)
    global_dict = pipeline.select_dictionary(books, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bin_path, meta_path = dictionary.save_dictionary(
        global_dict, out / "dictionary.bin", out / "dictionary.meta"
    )
    print(bin_path)
    print(meta_path)
    return 0


def _cmd_encode(args):
    cfg = _config_from_args(args)
    ds = core.load_dataset(args.manifest)
    gmm = None
    global_dict = None
    if cfg.mode == "fisher":
        if not args.gmm:
            raise core.ParameterError("fisher encoding needs --gmm")
        gmm = encoding.load_gmm(args.gmm)
    else:
        if not args.dictionary:
            raise core.ParameterError("llc encoding needs --dictionary")
        global_dict = dictionary.load_dictionary(args.dictionary)
    samples = pipeline._encode_split(ds, cfg, global_dict, gmm)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    encoding.save_encoded(samples, prefix.with_suffix(".bin"),
                          prefix.with_suffix(".manifest"), ds.num_classes)
    print(prefix.with_suffix(".manifest"))
    return 0


def _cmd_fit_gmm(args):
    cfg = _config_from_args(args, seed=args.seed)
    ds = core.load_dataset(args.manifest)
    if not cfg.gmm_on_raw:
        entities = [meanshift.reduce_entity(e, cfg.bandwidth_m) for e in ds.entities]
    else:
        entities = ds.entities
    pool = np.vstack([e.descriptors for e in entities])
    gmm = encoding.fit_gmm(pool, cfg.gmm_k, cfg.seed)
    encoding.save_gmm(gmm, args.out)
    print(args.out)
    return 0


def _cmd_train(args):
    cfg = _config_from_args(args, seed=args.seed)
    samples, num_classes = encoding.load_encoded(args.encoded_manifest, cfg.mode)
    params = classify.ForestParams(cfg.n_trees, cfg.min_leaf, cfg.max_depth, cfg.seed)
    forest = classify.train_forest(samples, params, num_classes=num_classes,
                                   threads=cfg.threads)
    if forest.oob_error is not None:
        print(f"oob_error\t{forest.oob_error}")
    classify.save_forest(forest, args.out)
    print(args.out)
    return 0


def _cmd_predict(args):
    cfg = _config_from_args(args)
    samples, _ = encoding.load_encoded(args.encoded_manifest, cfg.mode)
    forest = classify.load_forest(args.forest)
    preds = classify.predict_dataset(forest, samples, threads=cfg.threads)
    rows = [
        (s.entity_id, int(p.label), p.confidence, int(p.label))
        for s, p in zip(samples, preds)
    ]
    pipeline.write_predictions(args.out, rows)
    print(args.out)
    return 0


def _cmd_refine(args):
    cfg = _config_from_args(args)
    samples, num_classes = encoding.load_encoded(args.encoded_manifest, cfg.mode)
    rows = pipeline.read_predictions(args.predictions)
    if len(rows) != len(samples):
        raise core.ValidationError(
            f"{len(rows)} predictions vs {len(samples)} encoded samples"
        )
    preds = [classify.Prediction(label, None, conf) for _, label, conf, _ in rows]
    lp_cfg = labelprop.AffinityConfig(cfg.lp_sigma, cfg.lp_fraction,
                                      cfg.lp_max_iter, cfg.lp_tol)
    refined = labelprop.refine_predictions(samples, preds, lp_cfg,
                                           num_classes=num_classes)
    out_rows = [
        (entity_id, label, conf, int(r))
        for (entity_id, label, conf, _), r in zip(rows, refined)
    ]
    pipeline.write_predictions(args.out, out_rows)
    print(args.out)
    return 0


def _cmd_run(args):
    cfg = _config_from_args(args, seed=args.seed)
    metrics = pipeline.run_pipeline(cfg, log=print)
    print(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_eval(args):
    rows = pipeline.read_predictions(args.predictions)
    _, num_classes, entries = core.parse_manifest(args.manifest)
    truth_by_id = {entity_id: label for entity_id, label, _ in entries}
    missing = [entity_id for entity_id, *_ in rows if entity_id not in truth_by_id]
    if missing:
        raise core.ValidationError(f"no truth labels for: {missing[:5]}")
    truth = [truth_by_id[entity_id] for entity_id, *_ in rows]
    refined = [refined_label for *_, refined_label in rows]
    forest = [forest_label for _, forest_label, _, _ in rows]
    metrics = pipeline.evaluate(refined, truth, num_classes)
    metrics.forest_accuracy = pipeline.evaluate(
        forest, truth, num_classes
    ).overall_accuracy
    print(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ddlc",
        description="Discriminative dictionary learning and classification "
                    "over bags of local descriptors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate seeded synthetic datasets")
    p.add_argument("--spec", help="key=value synthesis spec file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("build-dict", help="build and select the global dictionary")
    _add_config_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_build_dict)

    p = sub.add_parser("fit-gmm", help="fit the mixture model for fisher encoding")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_fit_gmm)

    p = sub.add_parser("encode", help="encode a dataset against a dictionary or GMM")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dictionary")
    p.add_argument("--gmm")
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(fn=_cmd_encode)

    p = sub.add_parser("train", help="train the random forest on encoded samples")
    _add_config_flags(p)
    p.add_argument("--encoded-manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("predict", help="predict labels for encoded samples")
    _add_config_flags(p)
    p.add_argument("--forest", required=True)
    p.add_argument("--encoded-manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("refine", help="label-propagation refinement of predictions")
    _add_config_flags(p)
    p.add_argument("--encoded-manifest", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_refine)

    p = sub.add_parser("run", help="full pipeline: dictionary to metrics")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("eval", help="score a predictions file against a manifest")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=_cmd_eval)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except core.StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except (core.ManifestError, core.ValidationError, core.ParameterError,
            core.InsufficientDataError, core.NumericError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
