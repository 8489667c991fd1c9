"""
Optional MLflow experiment tracking.
"""
from omegaconf import OmegaConf

# mlflow
import mlflow

# vprtk
from vprtk.config import Configuration
from vprtk.utils import get_logger

logger = get_logger(__name__)


def create_run_name(cfg: Configuration, random_state: int, **kwargs) -> str:
    """Create a run name."""
    backbone_cfg = cfg.models.backbone
    train_cfg = cfg.train
    run_name = f"vpr;adapter_mode={backbone_cfg.adapter_mode}"
    run_name += f";r={backbone_cfg.bottleneck_ratio};global_mode={cfg.models.head.global_mode}"
    run_name += f";lr={train_cfg.learning_rate};weight={cfg.loss.weight};margin={cfg.loss.margin}"
    postfix: str = cfg.get("postfix", "")
    run_name = "".join([run_name, f";seed={random_state}", f";{postfix}" if postfix else ""])
    return run_name


def get_params(cfg: Configuration, **kwargs) -> dict:
    """
    Get the parameters of this run, flattened to dotted keys.
    """
    params = dict()
    for section in ("models", "loss", "mining", "train", "evaluation"):
        section_cfg = OmegaConf.to_container(cfg[section], resolve=True)

        def __collect(prefix: str, node):
            if isinstance(node, dict):
                for key, value in node.items():
                    __collect(f"{prefix}.{key}", value)
            else:
                params[prefix] = node

        __collect(section, section_cfg)

    # in case '_target_' somehow wasn't stripped
    params = {k.replace("._target_", ".target"): v for k, v in params.items()}
    params["seed"] = cfg.job.seed
    params["precision"] = cfg.job.precision
    return params


def log_mlflow_params(cfg: Configuration, **kwargs):
    """
    Log the parameters to MLFlow.
    """
    params = get_params(cfg, **kwargs)
    logger.debug("Logged parameters:\n{}".format(OmegaConf.to_yaml(params)))
    mlflow.log_params(params)


def log_epoch_metrics(metrics: dict, epoch: int):
    mlflow.log_metrics({k: float(v) for k, v in metrics.items()}, step=epoch)


def prepare_mlflow(cfg: Configuration) -> dict:
    """
    Points MLflow at the configured tracking URI and experiment.

    ## Returns:
    * `dict`: Keyword arguments for `mlflow.start_run`.
    """
    logger.info("Starting MLflow run...")
    mlflow_cfg = cfg.mlflow
    tracking_uri = mlflow_cfg.get("tracking_uri", "./mlruns")
    mlflow.set_tracking_uri(tracking_uri)
    experiment_name = mlflow_cfg.get("experiment_name", "vprtk")
    experiment = mlflow.set_experiment(experiment_name)
    logger.debug(f"MLflow tracking URI: {tracking_uri}")
    start_run_kwargs: dict = dict(mlflow_cfg.get("start_run", {}))
    start_run_kwargs["experiment_id"] = experiment.experiment_id
    return start_run_kwargs
