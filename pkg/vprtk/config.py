"""
Basic hydra template configurations for the `vprtk` package.
"""
import os
from dataclasses import dataclass, field
from typing import Any, List, Optional

from omegaconf import DictConfig, OmegaConf

# hydra
from hydra import compose, initialize_config_dir
from hydra.core.global_hydra import GlobalHydra

# vprtk
from vprtk import DEFAULT_CONFIG_DIR
from vprtk.utils import get_logger

logger = get_logger(__name__)

ADAPTER_MODES = ("none", "serial_only", "parallel_only", "both")
GLOBAL_MODES = ("gem", "class_token")
RERANK_MODES = ("dense_local", "backbone_patches", "none")
PARAMETER_GROUPS = (
    "patch_embed",
    "pos_embed",
    "cls_token",
    "blocks",
    "final_norm",
    "adapters",
    "local_head",
    "gem",
)
BACKBONE_GROUPS = ("patch_embed", "pos_embed", "cls_token", "blocks", "final_norm")


@dataclass
class BackboneConfiguration:
    """
    Configuration of the adapter-augmented ViT backbone.

    ## Attributes:
    * `image_size` (`int`): Side of the square input image in pixels.
    * `patch_size` (`int`): Side of a square patch in pixels.
    * `embed_dim` (`int`): Token dimension `D`.
    * `num_blocks` (`int`): Number of transformer blocks `L`.
    * `num_heads` (`int`): Number of attention heads.
    * `mlp_ratio` (`float`): MLP hidden width as a multiple of `D`. Defaults to `4.0`.
    * `adapter_mode` (`str`): One of `none`, `serial_only`, `parallel_only`, `both`.
    * `bottleneck_ratio` (`float`): Adapter hidden width as a fraction of `D`.
    * `scale` (`float`): Scaling factor `s` of the parallel adapter.
    * `layer_norm_eps` (`float`): Epsilon of every LayerNorm.
    """

    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    adapter_mode: str = "both"
    bottleneck_ratio: float = 0.5
    scale: float = 0.2
    layer_norm_eps: float = 1e-6


@dataclass
class HeadConfiguration:
    """
    Configuration of the global (GeM) and local (up-conv) feature heads.

    ## Attributes:
    * `mid_channels` (`int`): Output channels of the first up-conv layer.
    * `local_dim` (`int`): Output channels of the second up-conv layer (`C_l`).
    * `kernel_size` (`int`): Up-conv kernel size. Defaults to `3`.
    * `stride` (`int`): Up-conv stride. Defaults to `2`.
    * `padding` (`int`): Up-conv padding. Defaults to `1`.
    * `gem_p` (`float`): GeM exponent. Defaults to `3.0`.
    * `gem_eps` (`float`): Clamp applied before the GeM power. Defaults to `1e-6`.
    * `gem_learnable` (`bool`): Whether `p` is a tunable parameter.
    * `global_mode` (`str`): `gem` or `class_token`.
    * `normalize_eps` (`float`): Epsilon guard of every L2 normalization. Defaults to `1e-12`.
    """

    mid_channels: int = 32
    local_dim: int = 16
    kernel_size: int = 3
    stride: int = 2
    padding: int = 1
    gem_p: float = 3.0
    gem_eps: float = 1e-6
    gem_learnable: bool = False
    global_mode: str = "gem"
    normalize_eps: float = 1e-12


@dataclass
class ModelConfiguration:
    """
    The model configuration class.

    ## Attributes:
    * `backbone` (`BackboneConfiguration`): The backbone configuration.
    * `head` (`HeadConfiguration`): The feature head configuration.
    * `optimizer` (`DictConfig`): The optimizer configuration, instantiated by hydra.
    """

    backbone: BackboneConfiguration = field(default_factory=BackboneConfiguration)
    head: HeadConfiguration = field(default_factory=HeadConfiguration)
    optimizer: Any = field(
        default_factory=lambda: {
            "_target_": "torch.optim.Adam",
            "betas": [0.9, 0.999],
            "eps": 1e-8,
        }
    )


@dataclass
class LossConfiguration:
    """
    ## Attributes:
    * `margin` (`float`): Triplet margin `m`. Defaults to `0.1`.
    * `weight` (`float`): Weight `lambda` of the local loss. Defaults to `1.0`.
    * `hard_negatives_per_query` (`int`): Negatives per triplet. Defaults to `2`.
    """

    margin: float = 0.1
    weight: float = 1.0
    hard_negatives_per_query: int = 2


@dataclass
class MiningConfiguration:
    """
    ## Attributes:
    * `positive_radius_m` (`float`): Potential positives lie within this radius.
    * `negative_radius_m` (`float`): Definite negatives lie beyond this radius.
    * `negative_pool` (`int`): Size of the random definite-negative sample per query.
    * `hard_negatives` (`int`): Number of hard negatives kept from the pool.
    """

    positive_radius_m: float = 10.0
    negative_radius_m: float = 25.0
    negative_pool: int = 1000
    hard_negatives: int = 2


@dataclass
class TrainConfiguration:
    """
    ## Attributes:
    * `learning_rate` (`float`): Adam learning rate.
    * `batch_size` (`int`): Triplets per optimizer step.
    * `epoch_queries` (`int`): Training queries per epoch.
    * `patience_epochs` (`int`): Epochs without validation R@5 improvement before stopping.
    * `max_epochs` (`int`): Hard cap on the number of epochs.
    * `max_triplets` (`int`): Stop after this many triplets, `-1` for no cap.
    * `seed` (`int`): Seed for query sampling and negative pools.
    * `freeze_policy` (`list`): Parameter groups excluded from optimization.
    * `val_rerank` (`bool`): Whether validation uses two-stage retrieval.
    * `feature_batch_size` (`int`): Images per forward pass when refreshing feature caches.
    """

    learning_rate: float = 1e-5
    batch_size: int = 4
    epoch_queries: int = 512
    patience_epochs: int = 3
    max_epochs: int = 30
    max_triplets: int = -1
    seed: int = 0
    freeze_policy: List[str] = field(default_factory=lambda: list(BACKBONE_GROUPS))
    val_rerank: bool = False
    feature_batch_size: int = 32


@dataclass
class GradcheckConfiguration:
    """
    ## Attributes:
    * `step` (`float`): Central difference step `h`.
    * `samples` (`int`): Number of parameter coordinates checked.
    * `tolerance` (`float`): Maximum accepted relative error.
    * `kink_tolerance` (`float`): Hinge arguments closer than this to zero are skipped.
    * `seed` (`int`): Seed for the coordinate sample.
    """

    step: float = 1e-5
    samples: int = 200
    tolerance: float = 1e-4
    kink_tolerance: float = 1e-3
    seed: int = 0


@dataclass
class EvaluationConfiguration:
    """
    ## Attributes:
    * `n_values` (`list`): The `N` of every Recall@N.
    * `distance_m` (`float`): Ground-truth distance threshold.
    * `heading_deg` (`float`, optional): Ground-truth heading threshold, `None` to disable.
    * `k` (`int`): Candidates re-ranked per query.
    * `rerank_mode` (`str`): `dense_local`, `backbone_patches` or `none`.
    * `workers` (`int`): Threads used for per-candidate re-scoring.
    """

    n_values: List[int] = field(default_factory=lambda: [1, 5, 10])
    distance_m: float = 25.0
    heading_deg: Optional[float] = None
    k: int = 100
    rerank_mode: str = "dense_local"
    workers: int = 1


@dataclass
class SynthWorldConfiguration:
    """
    Configuration of the synthetic place-world.

    ## Attributes:
    * `num_places` (`int`): Number of distinct places.
    * `place_spacing_m` (`float`): Grid spacing between places. Must exceed twice the 25 m threshold.
    * `variants_per_place` (`int`): Images rendered per place.
    * `database_variants` (`int`): Variants per place placed in the database split.
    * `query_variants` (`int`): Variants per place placed in the query split.
    * `train_variants` (`int`): Variants per place placed in the train split. The rest go to val.
    * `image_size` (`int`): Side of the rendered images.
    * `landmark_grid` (`int`): Landmark cells per image side.
    * `brightness` (`float`): Maximum absolute brightness shift per variant.
    * `noise` (`float`): Standard deviation of the additive pixel noise.
    * `max_shift_px` (`int`): Maximum translation in pixels ("viewpoint").
    * `heading_jitter_deg` (`float`): Maximum heading deviation of a variant from its place.
    * `aliasing_pairs` (`int`): Place pairs sharing landmark colours in permuted layouts.
    * `origin_lat` (`float`): Latitude of the first place.
    * `origin_lon` (`float`): Longitude of the first place.
    * `seed` (`int`): Generation seed.
    """

    num_places: int = 64
    place_spacing_m: float = 100.0
    variants_per_place: int = 8
    database_variants: int = 2
    query_variants: int = 2
    train_variants: int = 2
    image_size: int = 64
    landmark_grid: int = 4
    brightness: float = 0.1
    noise: float = 0.02
    max_shift_px: int = 2
    heading_jitter_deg: float = 10.0
    aliasing_pairs: int = 16
    origin_lat: float = 40.4406
    origin_lon: float = -79.9959
    seed: int = 0


@dataclass
class JobConfiguration:
    """
    Job configuration class.

    ## Attributes:
    * `seed` (`int`): The random seed for reproducibility.
    * `precision` (`str`): `f32` or `f64`.
    * `device` (`str`): The torch device to use.
    * `workers` (`int`): Worker threads for parallel extraction and querying.
    * `output_dir` (`str`): Where artifacts are written.
    * `use_mlflow` (`bool`): Whether to track runs with MLflow.
    """

    seed: int = 0
    precision: str = "f64"
    device: str = "cpu"
    workers: int = 1
    output_dir: str = "artifacts"
    use_mlflow: bool = False


@dataclass
class Configuration:
    """
    Configuration dataclass.

    ## Attributes:
    * `job` (`JobConfiguration`): The job configuration.
    * `models` (`ModelConfiguration`): The model configuration.
    * `datasets` (`SynthWorldConfiguration`): The synthetic world configuration.
    * `loss` (`LossConfiguration`): The loss configuration.
    * `mining` (`MiningConfiguration`): The triplet mining configuration.
    * `train` (`TrainConfiguration`): The training configuration.
    * `gradcheck` (`GradcheckConfiguration`): The gradient check configuration.
    * `evaluation` (`EvaluationConfiguration`): The evaluation configuration.
    * `mlflow` (`DictConfig`): MLflow settings.
    """

    postfix: str = ""
    job: JobConfiguration = field(default_factory=JobConfiguration)
    models: ModelConfiguration = field(default_factory=ModelConfiguration)
    datasets: SynthWorldConfiguration = field(default_factory=SynthWorldConfiguration)
    loss: LossConfiguration = field(default_factory=LossConfiguration)
    mining: MiningConfiguration = field(default_factory=MiningConfiguration)
    train: TrainConfiguration = field(default_factory=TrainConfiguration)
    gradcheck: GradcheckConfiguration = field(default_factory=GradcheckConfiguration)
    evaluation: EvaluationConfiguration = field(
        default_factory=EvaluationConfiguration
    )
    mlflow: Any = field(
        default_factory=lambda: {"tracking_uri": "./mlruns"}
    )


def set_hydra_configuration(
    config_name: str,
    ConfigurationInstance: type = Configuration,
    init_method: callable = initialize_config_dir,
    init_method_kwargs: dict = None,
    **compose_kwargs,
):
    """
    Creates and returns a hydra configuration, merged over the structured defaults.

    ## Args:
    * `config_name` (`str`): The name of the config (usually the file name without the .yaml extension).
    * `ConfigurationInstance` (`type`, optional): The structured configuration to validate against. Defaults to `Configuration`.
    * `init_method` (`function`, optional): The initialization method to use. Defaults to `initialize_config_dir`.
    * `init_method_kwargs` (`dict`, optional): Keyword arguments for the `init_method` function. Defaults to the packaged `configs/` directory.

    ## Returns:
    * `DictConfig`: The typed configuration.
    """
    logger.info(f"Creating configuration: '{config_name}'")
    init_method_kwargs = (
        {"config_dir": DEFAULT_CONFIG_DIR}
        if init_method_kwargs is None
        else init_method_kwargs
    )
    GlobalHydra.instance().clear()
    with init_method(version_base="1.1", **init_method_kwargs):
        cfg: DictConfig = compose(config_name=config_name, **compose_kwargs)
    return OmegaConf.merge(OmegaConf.structured(ConfigurationInstance), cfg)


def _read_key_value_file(path: os.PathLike) -> DictConfig:
    """Parses the flat `key=value` format: one dotted key per line, `#` starts a comment."""
    dotlist = []
    with open(path, "r") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if line:
                dotlist.append(line)
    return OmegaConf.from_dotlist(dotlist)


def load_configuration(source: str = None, overrides: list = None) -> DictConfig:
    """
    Loads a configuration from a preset name, a YAML file or a flat `key=value` file, then applies overrides.

    ## Args:
    * `source` (`str`, optional): Preset name in `configs/`, or a path. `None` gives the structured defaults.
    * `overrides` (`list`, optional): Dotlist overrides (`"train.learning_rate=1e-4"`) applied last. With a
      preset, overrides of a config group (`"ablation=frozen"`) select the group option instead.

    ## Returns:
    * `DictConfig`: The typed configuration.
    """
    overrides = list(overrides or [])
    group_overrides = [o for o in overrides if "." not in o.split("=", 1)[0]]
    dotlist = [o for o in overrides if o not in group_overrides]
    base = OmegaConf.structured(Configuration)
    if group_overrides and (source is None or os.path.isfile(source)):
        raise ValueError(f"Config group overrides {group_overrides} need a preset name.")
    if source is None:
        cfg = base
    elif os.path.isfile(source):
        logger.debug(f"Loading configuration file '{source}'")
        if source.endswith((".yaml", ".yml")):
            loaded = OmegaConf.load(source)
            if "defaults" in loaded:
                del loaded["defaults"]
        else:
            loaded = _read_key_value_file(source)
        cfg = OmegaConf.merge(base, loaded)
    else:
        cfg = set_hydra_configuration(config_name=source, overrides=group_overrides)

    if dotlist:
        cfg = OmegaConf.merge(cfg, OmegaConf.from_dotlist(dotlist))
    validate_configuration(cfg)
    return cfg


def adapter_hidden_dim(backbone_cfg: BackboneConfiguration) -> int:
    """The adapter bottleneck width, `round(r * D)`."""
    return int(round(backbone_cfg.bottleneck_ratio * backbone_cfg.embed_dim))


def validate_backbone_configuration(backbone_cfg: BackboneConfiguration):
    if backbone_cfg.image_size % backbone_cfg.patch_size != 0:
        raise ValueError(
            f"Image size {backbone_cfg.image_size} must be divisible by patch size {backbone_cfg.patch_size}."
        )
    if backbone_cfg.embed_dim % backbone_cfg.num_heads != 0:
        raise ValueError(
            f"Embedding dimension {backbone_cfg.embed_dim} must be divisible by {backbone_cfg.num_heads} heads."
        )
    if backbone_cfg.adapter_mode not in ADAPTER_MODES:
        raise ValueError(
            f"Invalid adapter mode '{backbone_cfg.adapter_mode}'. Valid modes are {ADAPTER_MODES}."
        )
    if not 0.0 < backbone_cfg.bottleneck_ratio <= 1.0:
        raise ValueError(
            f"Bottleneck ratio must lie in (0, 1], got {backbone_cfg.bottleneck_ratio}."
        )
    if adapter_hidden_dim(backbone_cfg) < 1:
        raise ValueError("Adapter hidden dimension round(r * D) must be at least 1.")


def validate_configuration(cfg: Configuration):
    """
    Checks the cross-field invariants the dataclass types cannot express.

    ## Raises:
    * `ValueError`: On the first violated invariant.
    """
    validate_backbone_configuration(cfg.models.backbone)
    head_cfg = cfg.models.head
    if head_cfg.global_mode not in GLOBAL_MODES:
        raise ValueError(
            f"Invalid global mode '{head_cfg.global_mode}'. Valid modes are {GLOBAL_MODES}."
        )
    if head_cfg.gem_p < 1.0:
        raise ValueError(f"GeM exponent must be >= 1, got {head_cfg.gem_p}.")
    if head_cfg.mid_channels <= head_cfg.local_dim:
        raise ValueError("The local head must narrow its channels: mid_channels > local_dim.")
    if cfg.loss.margin <= 0 or cfg.loss.weight < 0:
        raise ValueError("Loss margin must be > 0 and weight >= 0.")
    if cfg.mining.positive_radius_m >= cfg.mining.negative_radius_m:
        raise ValueError("positive_radius_m must be smaller than negative_radius_m.")
    if cfg.evaluation.rerank_mode not in RERANK_MODES:
        raise ValueError(
            f"Invalid rerank mode '{cfg.evaluation.rerank_mode}'. Valid modes are {RERANK_MODES}."
        )
    if cfg.evaluation.distance_m <= 0:
        raise ValueError("Evaluation distance threshold must be positive.")
    unknown = set(cfg.train.freeze_policy) - set(PARAMETER_GROUPS)
    if unknown:
        raise ValueError(f"Unknown parameter groups in freeze policy: {sorted(unknown)}.")
    world_cfg = cfg.datasets
    if world_cfg.place_spacing_m <= 2 * cfg.evaluation.distance_m:
        raise ValueError(
            f"Place spacing {world_cfg.place_spacing_m} m must exceed twice the {cfg.evaluation.distance_m} m threshold."
        )
    if world_cfg.aliasing_pairs > world_cfg.num_places // 2:
        raise ValueError("aliasing_pairs must not exceed num_places / 2.")
    if (
        world_cfg.database_variants
        + world_cfg.query_variants
        + world_cfg.train_variants
        > world_cfg.variants_per_place
    ):
        raise ValueError("Split variant counts exceed variants_per_place.")
