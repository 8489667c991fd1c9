#!/usr/bin/env python
"""Command-line entry point of the place recognition toolkit."""
import argparse
import os
import sys
from typing import List, Sequence

import pandas as pd
from hydra.errors import HydraException
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

# mlflow
import mlflow

# torch
import torch

# vprtk
from vprtk.config import load_configuration
from vprtk.datasets import (
    extract_features,
    generate_synth_world,
    load_features,
    load_manifest,
    read_image,
    save_features,
)
from vprtk.index import (
    MatchThresholds,
    batch_query,
    load_index,
    recall_at_n,
    save_index,
)
from vprtk.ignite import TrainingData, train
from vprtk.losses import TripletImages, check_model_gradients
from vprtk.mlflow import create_run_name, log_mlflow_params, prepare_mlflow
from vprtk.models import (
    apply_freeze_policy,
    count_parameters,
    instantiate_model,
    load_checkpoint,
    randomize_adapters,
    save_checkpoint,
)
from vprtk.benchmark import benchmark_rerank
from vprtk.visualize import emit_heatmap
from vprtk.utils import get_logger, install, resolve_dtype, set_determinism

logger = get_logger("vprtk.scripts")

RERANK_FLAGS = {"dense": "dense_local", "patches": "backbone_patches", "none": "none"}
# (flag, configuration key, type)
TRAIN_FLAGS = [
    ("--lr", "train.learning_rate", float),
    ("--batch-size", "train.batch_size", int),
    ("--epoch-queries", "train.epoch_queries", int),
    ("--patience", "train.patience_epochs", int),
    ("--max-epochs", "train.max_epochs", int),
    ("--max-triplets", "train.max_triplets", int),
    ("--margin", "loss.margin", float),
    ("--weight", "loss.weight", float),
    ("--positive-radius", "mining.positive_radius_m", float),
    ("--negative-radius", "mining.negative_radius_m", float),
    ("--negative-pool", "mining.negative_pool", int),
    ("--hard-negatives", "mining.hard_negatives", int),
]


def _dest(key: str) -> str:
    return key.replace(".", "_")


def _int_list(value: str) -> List[int]:
    try:
        values = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got '{value}'.")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"Expected positive integers, got '{value}'.")
    return values


def _write_csv(frame: pd.DataFrame, path: str = None, **kwargs):
    if path is None:
        sys.stdout.write(frame.to_csv(index=False, lineterminator="\n", **kwargs))
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n", **kwargs)
    logger.info(f"Wrote '{path}'.")


def _load_model(cfg: DictConfig, args: argparse.Namespace, dtype: torch.dtype):
    if getattr(args, "checkpoint", None):
        model, model_cfg = load_checkpoint(args.checkpoint, dtype=dtype)
        return model, model_cfg
    return instantiate_model(cfg.models, dtype=dtype, seed=cfg.job.seed), cfg.models


def run_synth(cfg: DictConfig, args: argparse.Namespace) -> int:
    generate_synth_world(cfg.datasets, args.out, progress=args.progress)
    return 0


def run_extract(cfg: DictConfig, args: argparse.Namespace) -> int:
    dtype = resolve_dtype(cfg.job.precision)
    entries = load_manifest(args.manifest)
    if args.split:
        entries = [e for e in entries if e.split in args.split]
    model, _ = _load_model(cfg, args, dtype)
    features = extract_features(
        model,
        entries,
        args.manifest,
        batch_size=args.batch_size,
        workers=cfg.job.workers if cfg.job.workers > 1 else 0,
        dtype=dtype,
        progress=args.progress,
    )
    save_features(features, args.out)
    return 0


def run_index(cfg: DictConfig, args: argparse.Namespace) -> int:
    features = load_features(args.features).by_split(args.split)
    if len(features) == 0:
        raise ValueError(f"No '{args.split}' rows in '{args.features}'.")
    save_index(features.to_index(with_patches=not args.no_patches), args.out)
    return 0


def _query_features(args: argparse.Namespace):
    features = load_features(args.features).by_split(args.split)
    if getattr(args, "subset", "all") == "aliased":
        features = features.subset(features.aliased)
    if len(features) == 0:
        raise ValueError(f"No query rows selected from '{args.features}'.")
    return features


def run_query(cfg: DictConfig, args: argparse.Namespace) -> int:
    index = load_index(args.index)
    features = _query_features(args)
    results = batch_query(
        index,
        features.queries(),
        k=args.k,
        rerank_mode=RERANK_FLAGS[args.rerank],
        workers=cfg.job.workers,
        progress=args.progress,
    )
    rows = []
    for query_id, result in zip(features.ids, results):
        positions = {int(i): p for p, i in enumerate(result.candidate_ids)}
        for rank, record_id in enumerate(result.final_ids[: args.top], start=1):
            p = positions[int(record_id)]
            rows.append(
                {
                    "query_id": int(query_id),
                    "rank": rank,
                    "record_id": int(record_id),
                    "global_distance": float(result.global_distances[p]),
                    "score": -1 if result.scores is None else int(result.scores[p]),
                }
            )
    frame = pd.DataFrame(
        rows, columns=["query_id", "rank", "record_id", "global_distance", "score"]
    )
    _write_csv(frame, args.out, float_format="%.6f")
    return 0


def run_evaluate(cfg: DictConfig, args: argparse.Namespace) -> int:
    index = load_index(args.index)
    features = _query_features(args)
    thresholds = MatchThresholds(args.dist_m, args.heading_deg)
    database_tags = index.geotags()
    query_tags = features.geotags()
    queries = features.queries()
    k_values = args.k
    rows = []
    for k in k_values:
        results = batch_query(
            index,
            queries,
            k=k,
            rerank_mode=RERANK_FLAGS[args.rerank],
            workers=cfg.job.workers,
            progress=args.progress,
        )
        recalls = recall_at_n(
            [r.final_ids for r in results], query_tags, database_tags, thresholds, args.n
        )
        for n, recall in recalls.items():
            rows.append({"k": k, "N": n, "recall_percent": recall})
            logger.info(f"k={k} R@{n}: {recall:.2f}")
    frame = pd.DataFrame(rows, columns=["k", "N", "recall_percent"])
    if len(k_values) == 1:
        frame = frame.drop(columns="k")
    _write_csv(frame, args.out, float_format="%.4f")
    return 0


def run_train(cfg: DictConfig, args: argparse.Namespace) -> int:
    dtype = resolve_dtype(cfg.job.precision)
    set_determinism(cfg.job.seed)
    entries = load_manifest(args.manifest)
    data = TrainingData.from_manifest(entries, args.manifest, dtype=dtype)
    model, model_cfg = _load_model(cfg, args, dtype)
    cfg.models = model_cfg

    def run() -> int:
        result = train(cfg, model, data, output_dir=args.out, progress=args.progress)
        save_checkpoint(result.model, cfg.models, os.path.join(args.out, "checkpoint.svwt"))
        report = count_parameters(result.model, cfg.train.freeze_policy)
        logger.info(
            f"Tunable parameters: {report.tunable_params:,} of {report.total_params:,} "
            f"({100 * report.tunable_ratio:.2f}%)."
        )
        return 0

    if cfg.job.use_mlflow:
        start_run_kwargs = prepare_mlflow(cfg)
        run_name = create_run_name(cfg=cfg, random_state=cfg.job.seed)
        with mlflow.start_run(run_name=run_name, **start_run_kwargs) as mlflow_run:
            logger.debug(
                "run_id: '{}'; status: '{}'".format(mlflow_run.info.run_id, mlflow_run.info.status)
            )
            log_mlflow_params(cfg)
            status = run()
            mlflow.log_artifacts(args.out)
        return status
    return run()


def run_gradcheck(cfg: DictConfig, args: argparse.Namespace) -> int:
    if cfg.job.precision != "f64":
        logger.warning("Finite differences need 64-bit precision; checking in f64.")
    model, model_cfg = _load_model(cfg, args, torch.float64)
    randomize_adapters(model, seed=cfg.gradcheck.seed)
    apply_freeze_policy(model, cfg.train.freeze_policy)

    size = model_cfg.backbone.image_size
    generator = torch.Generator().manual_seed(cfg.gradcheck.seed)
    batch, negatives = args.batch_size, cfg.loss.hard_negatives_per_query

    def images(*shape) -> torch.Tensor:
        return torch.rand(*shape, size, size, 3, generator=generator, dtype=torch.float64)

    report = check_model_gradients(
        model,
        TripletImages(images(batch), images(batch), images(batch, negatives)),
        cfg.loss,
        cfg.gradcheck,
    )
    passed = report.passed(cfg.gradcheck.tolerance)
    frame = pd.DataFrame(
        [
            {
                "max_relative_error": report.max_relative_error,
                "checked": report.checked,
                "skipped": report.skipped,
                "passed": passed,
            }
        ]
    )
    _write_csv(frame, args.out, float_format="%.6e")
    return 0 if passed else 1


def run_params(cfg: DictConfig, args: argparse.Namespace) -> int:
    # shapes are all that counting needs
    model = instantiate_model(cfg.models, device="meta")
    report = count_parameters(model, cfg.train.freeze_policy)
    frame = report.to_frame(cfg.train.freeze_policy)
    totals = pd.DataFrame(
        [
            {"group": "total", "params": report.total_params, "frozen": False},
            {"group": "tunable", "params": report.tunable_params, "frozen": False},
            {"group": "frozen", "params": report.frozen_params, "frozen": True},
        ]
    )
    _write_csv(pd.concat([frame, totals], ignore_index=True), args.out)
    logger.info(f"Tunable ratio: {report.tunable_ratio:.4f}")
    return 0


def run_bench(cfg: DictConfig, args: argparse.Namespace) -> int:
    index = load_index(args.index)
    features = _query_features(args)
    queries = features.queries()[: args.queries]
    result = benchmark_rerank(
        index,
        queries,
        k_values=args.k,
        n_prime_values=args.n_prime,
        repeats=args.repeats,
        seed=cfg.job.seed,
    )
    _write_csv(result.table, args.out, float_format="%.9f")
    logger.info(f"slope_k={result.slope_k:.3f}, slope_n_prime={result.slope_n_prime:.3f}")
    return 0


def run_heatmap(cfg: DictConfig, args: argparse.Namespace) -> int:
    dtype = resolve_dtype(cfg.job.precision)
    model, _ = _load_model(cfg, args, dtype)
    image = torch.from_numpy(read_image(args.image)).to(dtype)
    model.eval()
    with torch.no_grad():
        out = model(image.unsqueeze(0))
    fm = out.local_features[0] if args.source == "local" else out.feature_map[0]
    emit_heatmap(fm, args.out, colormap=args.colormap)
    return 0


COMMANDS = {
    "synth": run_synth,
    "extract": run_extract,
    "index": run_index,
    "query": run_query,
    "evaluate": run_evaluate,
    "train": run_train,
    "gradcheck": run_gradcheck,
    "params": run_params,
    "bench": run_bench,
    "heatmap": run_heatmap,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vprtk", description="Two-stage visual place recognition toolkit."
    )
    parser.add_argument("--seed", type=int, default=None, help="Seed of every random stream.")
    parser.add_argument("--precision", choices=["f32", "f64"], default=None)
    parser.add_argument(
        "--config",
        default=None,
        help="Preset name in configs/, a YAML file, or a flat key=value file.",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Dotted configuration override, e.g. train.learning_rate=1e-4.",
    )
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--progress", action="store_true", help="Show progress bars.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    synth = subparsers.add_parser("synth", help="Generate the synthetic place-world.")
    synth.add_argument("--out", required=True)
    synth.add_argument("--places", type=int, default=None)
    synth.add_argument("--variants", type=int, default=None)
    synth.add_argument("--aliasing-pairs", type=int, default=None)

    extract = subparsers.add_parser("extract", help="Extract features of manifest images.")
    extract.add_argument("--manifest", required=True)
    extract.add_argument("--out", required=True)
    extract.add_argument("--checkpoint", default=None)
    extract.add_argument("--split", action="append", default=None)
    extract.add_argument("--batch-size", type=int, default=32)

    index = subparsers.add_parser("index", help="Build an index file from extracted features.")
    index.add_argument("--features", required=True)
    index.add_argument("--out", required=True)
    index.add_argument("--split", default="database")
    index.add_argument("--no-patches", action="store_true", help="Omit backbone patch tokens.")

    def add_query_arguments(sub: argparse.ArgumentParser):
        sub.add_argument("--index", required=True)
        sub.add_argument("--features", required=True)
        sub.add_argument("--split", default="query")
        sub.add_argument("--subset", choices=["all", "aliased"], default="all")
        sub.add_argument("--rerank", choices=sorted(RERANK_FLAGS), default="dense")
        sub.add_argument("--out", default=None)

    query = subparsers.add_parser("query", help="Two-stage retrieval for every query.")
    add_query_arguments(query)
    query.add_argument("--k", type=int, default=100)
    query.add_argument("--top", type=int, default=10, help="Results written per query.")

    evaluate = subparsers.add_parser("evaluate", help="Recall@N table.")
    add_query_arguments(evaluate)
    evaluate.add_argument("--k", type=_int_list, default=[100])
    evaluate.add_argument("--n", type=_int_list, default=[1, 5, 10])
    evaluate.add_argument("--dist-m", type=float, default=None)
    evaluate.add_argument("--heading-deg", type=float, default=None)

    training = subparsers.add_parser("train", help="Train with mined triplets.")
    training.add_argument("--manifest", required=True)
    training.add_argument("--out", required=True)
    training.add_argument("--checkpoint", default=None)
    for flag, key, kind in TRAIN_FLAGS:
        training.add_argument(flag, dest=_dest(key), type=kind, default=None)
    training.add_argument("--freeze", default=None, help="Comma-separated frozen parameter groups.")
    training.add_argument("--val-rerank", action="store_true", default=None)
    training.add_argument("--mlflow", action="store_true", default=None)

    gradcheck = subparsers.add_parser("gradcheck", help="Finite-difference gradient check.")
    gradcheck.add_argument("--checkpoint", default=None)
    gradcheck.add_argument("--samples", type=int, default=None)
    gradcheck.add_argument("--step", type=float, default=None)
    gradcheck.add_argument("--tolerance", type=float, default=None)
    gradcheck.add_argument("--batch-size", type=int, default=2)
    gradcheck.add_argument("--out", default=None)

    params = subparsers.add_parser("params", help="Parameter accounting.")
    params.add_argument("--out", default=None)

    bench = subparsers.add_parser("bench", help="Re-rank cost against k and N'.")
    bench.add_argument("--index", required=True)
    bench.add_argument("--features", required=True)
    bench.add_argument("--split", default="query")
    bench.add_argument("--k", type=_int_list, default=[10, 25, 50, 100])
    bench.add_argument("--n-prime", type=_int_list, default=[64, 225, 841])
    bench.add_argument("--queries", type=int, default=5)
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--out", default=None)

    heatmap = subparsers.add_parser("heatmap", help="Channel-mean heatmap of one image.")
    heatmap.add_argument("--image", required=True)
    heatmap.add_argument("--out", required=True, help="Output path prefix.")
    heatmap.add_argument("--checkpoint", default=None)
    heatmap.add_argument("--source", choices=["backbone", "local"], default="backbone")
    heatmap.add_argument("--colormap", default=None)
    return parser


def flag_overrides(args: argparse.Namespace) -> List[str]:
    """Translates the parsed flags into dotlist overrides, applied after `--config` and `--set`."""
    overrides = list(args.overrides)

    def put(key: str, value):
        if value is not None:
            overrides.append(f"{key}={value}")

    if args.seed is not None:
        for key in ("job.seed", "train.seed", "datasets.seed", "gradcheck.seed"):
            put(key, args.seed)
    put("job.precision", args.precision)
    put("job.workers", args.workers)
    if args.command == "synth":
        put("datasets.num_places", args.places)
        put("datasets.variants_per_place", args.variants)
        put("datasets.aliasing_pairs", args.aliasing_pairs)
    elif args.command == "evaluate":
        put("evaluation.distance_m", args.dist_m)
    elif args.command == "train":
        for _, key, _ in TRAIN_FLAGS:
            put(key, getattr(args, _dest(key)))
        put("loss.hard_negatives_per_query", args.mining_hard_negatives)
        if args.freeze is not None:
            groups = [g.strip() for g in args.freeze.split(",") if g.strip()]
            overrides.append(f"train.freeze_policy=[{','.join(groups)}]")
        put("train.val_rerank", args.val_rerank)
        put("job.use_mlflow", args.mlflow)
    elif args.command == "gradcheck":
        put("gradcheck.samples", args.samples)
        put("gradcheck.step", args.step)
        put("gradcheck.tolerance", args.tolerance)
    return overrides


def main(argv: Sequence[str] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_configuration(args.config, flag_overrides(args))
        if args.command == "evaluate":
            if args.dist_m is None:
                args.dist_m = cfg.evaluation.distance_m
            if args.heading_deg is None:
                args.heading_deg = cfg.evaluation.heading_deg
        logger.debug(OmegaConf.to_yaml(cfg))
        return COMMANDS[args.command](cfg, args)
    except (ValueError, OSError, OmegaConfBaseException, HydraException) as e:
        logger.error(f"{args.command}: {e}")
        return 1


if __name__ == "__main__":
    install(show_locals=False)
    sys.exit(main())
