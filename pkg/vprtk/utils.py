"""
Logging, tracebacks, object instantiation and seeding shared by every `vprtk` module.
"""

# imports
import logging
import random
from typing import Mapping, Union

import hydra
import numpy as np
import torch
from colorlog import ColoredFormatter
from omegaconf import DictConfig
from rich import pretty, traceback
from rich.console import Console
from rich.logging import RichHandler

__all__ = [
    "LOG_FORMATTER",
    "get_console",
    "get_logger",
    "hydra_instantiate",
    "install",
    "resolve_dtype",
    "set_determinism",
]

LOG_TIME_FORMAT = "[%X]"
LOG_FORMATTER: logging.Formatter = ColoredFormatter(
    fmt="%(log_color)s%(name)s%(reset)s: %(message)s", datefmt=LOG_TIME_FORMAT
)

_PRECISIONS = {"f32": torch.float32, "f64": torch.float64}


def get_console(stderr: bool = True, **kwargs) -> Console:
    """
    A rich console. Diagnostics go to stderr so CSV written to stdout stays clean.
    """
    return Console(stderr=stderr, **kwargs)


def get_logger(name: str = None, level: int = logging.INFO) -> logging.Logger:
    """
    Returns the named logger, attaching a single colour-formatted `RichHandler` on first use.

    ## Args:
    * `name` (`str`, optional): Logger name, usually the module's `__name__`.
    * `level` (`int`, optional): Logging level. Defaults to `logging.INFO`.
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)
    if not any(isinstance(handler, RichHandler) for handler in logger.handlers):
        handler = RichHandler(
            level=level,
            console=get_console(),
            rich_tracebacks=True,
            log_time_format=LOG_TIME_FORMAT,
        )
        handler.setFormatter(LOG_FORMATTER)
        logger.addHandler(handler)
    logger.propagate = False
    return logger


def install(max_depth: int = 3, max_length: int = 7, show_locals: bool = False):
    """Rich pretty-printing and tracebacks for the command line."""
    console = get_console()
    pretty.install(console=console, max_depth=max_depth, max_length=max_length)
    traceback.install(console=console, show_locals=show_locals)


def hydra_instantiate(cfg: Union[DictConfig, Mapping], **kwargs):
    """
    Builds the object named by `cfg._target_`, e.g. the optimizer of a model preset.

    ## Args:
    * `cfg` (`DictConfig`): A node with a `_target_` key.
    * `**kwargs`: Extra constructor arguments, such as `params` and `lr`.
    """
    _logger.debug(f"Instantiating '{cfg['_target_']}'.")
    return hydra.utils.instantiate(cfg, **kwargs)


def set_determinism(seed: int, use_deterministic_algorithms: bool = True):
    """
    Seeds the global `random`, `numpy` and `torch` generators.

    ## Args:
    * `seed` (`int`): The random seed.
    * `use_deterministic_algorithms` (`bool`, optional): Whether to force deterministic torch kernels. Defaults to `True`.
    """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if use_deterministic_algorithms:
        torch.use_deterministic_algorithms(True)
    _logger.debug(f"Determinism set with seed {seed}.")


def resolve_dtype(precision: str) -> torch.dtype:
    """Maps a precision flag (`"f32"` or `"f64"`) to a torch dtype."""
    try:
        return _PRECISIONS[precision]
    except KeyError:
        raise ValueError(
            f"Invalid precision '{precision}'. Valid precisions are {sorted(_PRECISIONS)}."
        ) from None


_logger = get_logger(__name__)
