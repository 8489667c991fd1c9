# imports
import math
import os
import time
from copy import deepcopy
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np
import pandas as pd

## mlflow
import mlflow

# torch
import torch
import torch.nn as nn

## ignite.engine
from ignite.engine import Engine
from ignite.engine.events import Events
from ignite.handlers.early_stopping import EarlyStopping
from ignite.contrib.handlers import ProgressBar

# vprtk
from vprtk.config import Configuration, EvaluationConfiguration
from vprtk.datasets import (
    ManifestEntry,
    compute_features,
    compute_global_features,
    entries_by_split,
    iterate_batches,
    load_images,
)
from vprtk.index import GeoTag, MatchThresholds, PlaceIndex, QueryFeatures, batch_query, recall_at_n
from vprtk.losses import TripletImages, model_triplet_loss
from vprtk.mining import MiningStats, Triplet, TripletMiner, epoch_query_order
from vprtk.mlflow import log_epoch_metrics
from vprtk.models import apply_freeze_policy, instantiate_optimizer, validate_freeze_policy
from vprtk.utils import get_logger

logger = get_logger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_r1", "val_r5", "wall_seconds"]


def adam_step(optimizer: torch.optim.Optimizer) -> bool:
    """
    Applies one optimizer step unless a gradient is non-finite, in which case the step is rejected and
    the gradients are cleared.

    ## Returns:
    * `bool`: Whether the step was applied.
    """
    for group in optimizer.param_groups:
        for param in group["params"]:
            if param.grad is not None and not torch.isfinite(param.grad).all():
                logger.warning("Rejected optimizer step: non-finite gradient.")
                optimizer.zero_grad(set_to_none=True)
                return False
    optimizer.step()
    return True


@dataclass
class TrainingData:
    """
    Images and geotags of the splits used by training.

    ## Attributes:
    * `database_images` (`torch.Tensor`): `(n_db, H, W, 3)` database images.
    * `database_ids` (`np.ndarray`): `(n_db,)` database image ids.
    * `database_tags` (`List[GeoTag]`): Database geotags.
    * `train_images` (`torch.Tensor`): `(n_train, H, W, 3)` training queries.
    * `train_tags` (`List[GeoTag]`): Training query geotags.
    * `val_images` (`torch.Tensor`): `(n_val, H, W, 3)` validation queries.
    * `val_tags` (`List[GeoTag]`): Validation query geotags.
    """

    database_images: torch.Tensor
    database_ids: np.ndarray
    database_tags: List[GeoTag]
    train_images: torch.Tensor
    train_tags: List[GeoTag]
    val_images: torch.Tensor
    val_tags: List[GeoTag]

    @property
    def database_latlon(self) -> np.ndarray:
        return np.array([[t.lat, t.lon] for t in self.database_tags], dtype=np.float64)

    @property
    def train_latlon(self) -> np.ndarray:
        return np.array([[t.lat, t.lon] for t in self.train_tags], dtype=np.float64)

    @classmethod
    def from_manifest(
        cls,
        entries: Sequence[ManifestEntry],
        manifest_path: os.PathLike,
        dtype: torch.dtype = torch.float64,
    ) -> "TrainingData":
        logger.info("Loading training images...")
        splits = entries_by_split(entries)
        for split in ("database", "train", "val"):
            if not splits[split]:
                raise ValueError(f"The manifest has no '{split}' images.")
        return cls(
            database_images=load_images(splits["database"], manifest_path, dtype=dtype),
            database_ids=np.array([e.id for e in splits["database"]], dtype=np.int64),
            database_tags=[e.geotag for e in splits["database"]],
            train_images=load_images(splits["train"], manifest_path, dtype=dtype),
            train_tags=[e.geotag for e in splits["train"]],
            val_images=load_images(splits["val"], manifest_path, dtype=dtype),
            val_tags=[e.geotag for e in splits["val"]],
        )


def _features(model: nn.Module, images: torch.Tensor, batch_size: int) -> Dict[str, np.ndarray]:
    return compute_features(model, iterate_batches(images, batch_size))


def validation_recall(
    model: nn.Module,
    data: TrainingData,
    eval_cfg: EvaluationConfiguration,
    rerank: bool = False,
    batch_size: int = 32,
) -> Dict[int, float]:
    """
    Validation R@1 and R@5: global-only retrieval, or two-stage retrieval when `rerank` is set.
    """
    rerank_mode = eval_cfg.rerank_mode if rerank else "none"
    with_patches = rerank_mode == "backbone_patches"
    database = _features(model, data.database_images, batch_size)
    queries = _features(model, data.val_images, batch_size)
    index = PlaceIndex(
        ids=data.database_ids,
        global_features=database["global"],
        local_grids=database["local"],
        lat=[t.lat for t in data.database_tags],
        lon=[t.lon for t in data.database_tags],
        heading=[np.nan if t.heading is None else t.heading for t in data.database_tags],
        patches=database["patches"] if with_patches else None,
    )
    results = batch_query(
        index,
        [
            QueryFeatures(
                queries["global"][i],
                queries["local"][i],
                queries["patches"][i] if with_patches else None,
            )
            for i in range(len(data.val_tags))
        ],
        k=eval_cfg.k,
        rerank_mode=rerank_mode,
    )
    return recall_at_n(
        [r.final_ids for r in results],
        data.val_tags,
        index.geotags(),
        MatchThresholds(eval_cfg.distance_m, eval_cfg.heading_deg),
        n_values=(1, 5),
    )


def triplet_images(data: TrainingData, triplets: Sequence[Triplet]) -> TripletImages:
    return TripletImages(
        query=data.train_images[[t.query for t in triplets]],
        positive=data.database_images[[t.positive for t in triplets]],
        negatives=data.database_images[
            torch.tensor([list(t.negatives) for t in triplets], dtype=torch.long)
        ],
    )


@dataclass
class TrainResult:
    """
    ## Attributes:
    * `model` (`nn.Module`): The model holding the best-R@5 parameters.
    * `history` (`pd.DataFrame`): One row per epoch: `epoch, train_loss, val_r1, val_r5, wall_seconds`.
    * `best_epoch` (`int`): Epoch of the returned parameters.
    * `best_r5` (`float`): Validation R@5 of the returned parameters.
    * `stats` (`MiningStats`): Mining counts over the whole run.
    * `triplets_seen` (`int`): Number of triplets optimized on.
    """

    model: nn.Module
    history: pd.DataFrame
    best_epoch: int
    best_r5: float
    stats: MiningStats = field(default_factory=MiningStats)
    triplets_seen: int = 0


def create_trainer(
    cfg: Configuration,
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    data: TrainingData,
    miner: TripletMiner,
    state: dict,
    **kwargs,
) -> Engine:
    """
    Creates the triplet training engine. One engine iteration mines and optimizes one batch of queries.
    Mining features are refreshed at the start of every epoch.
    """
    train_cfg = cfg.train
    loss_cfg = cfg.loss
    device = next(model.parameters()).device

    def triplet_train_step(engine: Engine, batch: int):
        start = batch * train_cfg.batch_size
        queries = state["order"][start : start + train_cfg.batch_size]
        triplets, stats = miner.mine_batch(
            queries,
            state["train_global"],
            state["database_global"],
            seed=train_cfg.seed,
            epoch=engine.state.epoch,
        )
        state["stats"].update(stats)
        if not triplets:
            return {"loss": math.nan, "triplets": 0}

        model.train()
        images = triplet_images(data, triplets)
        optimizer.zero_grad(set_to_none=True)
        output = model_triplet_loss(
            model,
            TripletImages(
                images.query.to(device), images.positive.to(device), images.negatives.to(device)
            ),
            loss_cfg,
        )
        output.backward()
        adam_step(optimizer)
        return {"loss": output.value, "triplets": len(triplets)}

    trainer = Engine(triplet_train_step)

    @trainer.on(Events.EPOCH_STARTED)
    def refresh_mining_cache(engine: Engine):
        logger.info(f"Epoch {engine.state.epoch}: refreshing mining features...")
        state["train_global"] = compute_global_features(
            model, iterate_batches(data.train_images.to(device), train_cfg.feature_batch_size)
        )
        state["database_global"] = compute_global_features(
            model, iterate_batches(data.database_images.to(device), train_cfg.feature_batch_size)
        )
        state["order"] = epoch_query_order(
            len(data.train_tags), train_cfg.epoch_queries, train_cfg.seed, engine.state.epoch
        )
        state["losses"] = []
        state["epoch_start"] = time.perf_counter()

    @trainer.on(Events.ITERATION_COMPLETED)
    def count_triplets(engine: Engine):
        output = engine.state.output
        if output["triplets"]:
            state["losses"].append(output["loss"])
        state["triplets_seen"] += output["triplets"]
        if 0 < train_cfg.max_triplets <= state["triplets_seen"]:
            logger.info(f"Reached {train_cfg.max_triplets} triplets.")
            state["capped"] = True
            engine.terminate_epoch()

    return trainer


def train(
    cfg: Configuration,
    model: nn.Module,
    data: TrainingData,
    output_dir: os.PathLike = None,
    validation_fn: Callable[[nn.Module], Dict[int, float]] = None,
    progress: bool = False,
    **kwargs,
) -> TrainResult:
    """
    Trains with mined triplets until validation R@5 stops improving for `patience_epochs` epochs, then
    restores the best-R@5 parameters.

    ## Args:
    * `cfg` (`Configuration`): The configuration.
    * `model` (`nn.Module`): The model, trained in place.
    * `data` (`TrainingData`): Database, training and validation images.
    * `output_dir` (`os.PathLike`, optional): Where `history.csv` is written.
    * `validation_fn` (`Callable`, optional): Returns `{1: R@1, 5: R@5}` for a model. Defaults to
      `validation_recall` on `data`.
    * `progress` (`bool`, optional): Attach a progress bar.
    """
    train_cfg = cfg.train
    if len(data.train_tags) == 0:
        raise ValueError("The training set is empty.")
    if cfg.mining.hard_negatives != cfg.loss.hard_negatives_per_query:
        raise ValueError("mining.hard_negatives must equal loss.hard_negatives_per_query.")
    validate_freeze_policy(cfg.models, train_cfg.freeze_policy)
    apply_freeze_policy(model, train_cfg.freeze_policy)
    optimizer = instantiate_optimizer(cfg.models, model, train_cfg.learning_rate)
    miner = TripletMiner(data.train_latlon, data.database_latlon, cfg.mining)
    if validation_fn is None:

        def validation_fn(m: nn.Module) -> Dict[int, float]:
            return validation_recall(
                m, data, cfg.evaluation, rerank=train_cfg.val_rerank, batch_size=train_cfg.feature_batch_size
            )

    state = {
        "stats": MiningStats(),
        "triplets_seen": 0,
        "capped": False,
        "history": [],
        "best_r5": -math.inf,
        "best_epoch": 0,
        "best_state": deepcopy(model.state_dict()),
    }
    trainer = create_trainer(cfg, model, optimizer, data, miner, state)
    if progress:
        ProgressBar().attach(trainer)

    @trainer.on(Events.EPOCH_COMPLETED)
    def validate(engine: Engine):
        epoch = engine.state.epoch
        recalls = validation_fn(model)
        engine.state.metrics["val_r1"] = recalls[1]
        engine.state.metrics["val_r5"] = recalls[5]
        train_loss = float(np.mean(state["losses"])) if state["losses"] else math.nan
        state["history"].append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_r1": recalls[1],
                "val_r5": recalls[5],
                "wall_seconds": time.perf_counter() - state["epoch_start"],
            }
        )
        logger.info(
            f"epoch: {epoch}, train_loss: {train_loss:.6f}, val R@1: {recalls[1]:.2f}, val R@5: {recalls[5]:.2f}"
        )
        if recalls[5] > state["best_r5"]:
            state["best_r5"] = recalls[5]
            state["best_epoch"] = epoch
            state["best_state"] = deepcopy(model.state_dict())
        if cfg.job.use_mlflow:
            log_epoch_metrics(
                {"train_loss": train_loss, "val_r1": recalls[1], "val_r5": recalls[5]}, epoch
            )

    early_stopping = EarlyStopping(
        patience=train_cfg.patience_epochs,
        score_function=lambda engine: engine.state.metrics["val_r5"],
        trainer=trainer,
    )
    trainer.add_event_handler(Events.EPOCH_COMPLETED, early_stopping)

    @trainer.on(Events.EPOCH_COMPLETED)
    def stop_at_triplet_cap(engine: Engine):
        if state["capped"]:
            engine.terminate()

    @trainer.on(Events.EXCEPTION_RAISED)
    def handle_exception_raised(engine: Engine, error: Exception):
        if cfg.job.use_mlflow:
            mlflow.end_run(status="FAILED")
        raise error

    num_batches = math.ceil(train_cfg.epoch_queries / train_cfg.batch_size)
    logger.info(
        f"Training for at most {train_cfg.max_epochs} epochs of {train_cfg.epoch_queries} queries..."
    )
    trainer.run(range(num_batches), max_epochs=train_cfg.max_epochs)

    model.load_state_dict(state["best_state"])
    history = pd.DataFrame(state["history"], columns=HISTORY_COLUMNS)
    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        history.to_csv(os.path.join(output_dir, "history.csv"), index=False)
    logger.info(
        f"Best validation R@5 {state['best_r5']:.2f} at epoch {state['best_epoch']}; "
        f"{state['stats'].skipped} queries skipped by mining."
    )
    return TrainResult(
        model=model,
        history=history,
        best_epoch=state["best_epoch"],
        best_r5=state["best_r5"],
        stats=state["stats"],
        triplets_seen=state["triplets_seen"],
    )
