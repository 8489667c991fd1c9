# imports
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from omegaconf import DictConfig, OmegaConf

# vprtk
from vprtk import tensor
from vprtk.backbone import VisionTransformer
from vprtk.config import (
    BACKBONE_GROUPS,
    PARAMETER_GROUPS,
    ModelConfiguration,
)
from vprtk.heads import GeM, LocalAdaptation, global_feature
from vprtk.index import BadMagicError, ByteReader, VersionMismatchError
from vprtk.utils import get_logger, hydra_instantiate

logger = get_logger(__name__)

CHECKPOINT_MAGIC = b"SVWT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelOutput:
    """
    ## Attributes:
    * `global_features` (`torch.Tensor`): Unit-norm global descriptors `(B, C)`.
    * `local_features` (`torch.Tensor`): Dense local grids `(B, h', w', C_l)`, unit norm per location.
    * `feature_map` (`torch.Tensor`): Backbone feature map `(B, h, w, D)`.
    * `class_token` (`torch.Tensor`): Final class token `(B, D)`.
    """

    global_features: torch.Tensor
    local_features: torch.Tensor
    feature_map: torch.Tensor
    class_token: torch.Tensor
    normalize_eps: float = 1e-12

    @property
    def patch_features(self) -> torch.Tensor:
        """The coarse backbone patch tokens, normalized per location, used as "local" features."""
        return tensor.l2_normalize(self.feature_map, eps=self.normalize_eps)


class PlaceRecognitionModel(nn.Module):
    """
    Backbone plus global and local heads.

    ## Args:
    * `model_cfg` (`ModelConfiguration`): The model configuration.
    """

    def __init__(self, model_cfg: ModelConfiguration):
        super().__init__()
        head_cfg = model_cfg.head
        self.global_mode = head_cfg.global_mode
        self.normalize_eps = head_cfg.normalize_eps
        self.backbone = VisionTransformer(model_cfg.backbone)
        self.gem = GeM(
            p=head_cfg.gem_p, eps=head_cfg.gem_eps, learnable=head_cfg.gem_learnable
        )
        self.local_head = LocalAdaptation(model_cfg.backbone.embed_dim, head_cfg)

    @property
    def local_grid_size(self) -> int:
        return self.local_head.output_size(self.backbone.grid_size)

    def _global(self, out) -> torch.Tensor:
        return global_feature(
            out.feature_map,
            p=self.gem.p.squeeze(),
            mode=self.global_mode,
            class_token=out.class_token,
            gem_eps=self.gem.eps,
            eps=self.normalize_eps,
        )

    def global_features(self, images: torch.Tensor) -> torch.Tensor:
        """Backbone and global head only; the local head is skipped."""
        return self._global(self.backbone(images))

    def forward(self, images: torch.Tensor) -> ModelOutput:
        out = self.backbone(images)
        global_features = self._global(out)
        local_features = self.local_head(out.feature_map)
        return ModelOutput(
            global_features=global_features,
            local_features=local_features,
            feature_map=out.feature_map,
            class_token=out.class_token,
            normalize_eps=self.normalize_eps,
        )


@dataclass
class ParamReport:
    """
    ## Attributes:
    * `total_params` (`int`): Every parameter element.
    * `tunable_params` (`int`): Elements outside the freeze policy.
    * `frozen_params` (`int`): Elements inside the freeze policy.
    * `groups` (`dict`): Element count per parameter group.
    """

    total_params: int
    tunable_params: int
    frozen_params: int
    groups: Dict[str, int] = field(default_factory=dict)

    @property
    def tunable_ratio(self) -> float:
        return self.tunable_params / self.total_params if self.total_params else 0.0

    def to_frame(self, freeze_policy: Iterable[str] = ()) -> pd.DataFrame:
        frozen = set(freeze_policy)
        rows = [
            {"group": name, "params": count, "frozen": name in frozen}
            for name, count in self.groups.items()
        ]
        return pd.DataFrame(rows, columns=["group", "params", "frozen"])


def _as_config(cfg) -> DictConfig:
    return cfg if isinstance(cfg, DictConfig) else OmegaConf.structured(cfg)


def instantiate_model(
    model_cfg: ModelConfiguration,
    dtype: torch.dtype = torch.float64,
    device: torch.device = torch.device("cpu"),
    seed: int = None,
) -> PlaceRecognitionModel:
    """
    Instantiates the place recognition model from a given configuration.

    ## Args:
    * `model_cfg` (`ModelConfiguration`): The model configuration.
    * `dtype` (`torch.dtype`, optional): Parameter precision. Defaults to `torch.float64`.
    * `device` (`torch.device`, optional): The device to build on; `"meta"` builds shapes only. Defaults to `torch.device("cpu")`.
    * `seed` (`int`, optional): Seeds the parameter initialization without touching the global generator.
    """
    logger.info("Instantiating model...")
    device = torch.device(device)
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        with device:
            model = PlaceRecognitionModel(model_cfg)
    return model.to(dtype=dtype)


def parameter_group(name: str) -> str:
    """Maps a parameter name of `PlaceRecognitionModel` to its freeze group."""
    parts = name.split(".")
    if parts[0] == "local_head":
        return "local_head"
    if parts[0] == "gem":
        return "gem"
    if parts[0] == "backbone":
        if parts[1] == "blocks":
            return "adapters" if parts[3].startswith("adapter") else "blocks"
        if parts[1] == "norm":
            return "final_norm"
        if parts[1] in ("patch_embed", "pos_embed", "cls_token"):
            return parts[1]
    raise ValueError(f"Parameter '{name}' belongs to no known group.")


def validate_freeze_policy(model_cfg: ModelConfiguration, freeze_policy: Iterable[str]):
    """
    The backbone must be frozen whenever adapters are present, and the local head and GeM exponent
    are always tunable.
    """
    frozen = set(freeze_policy)
    unknown = frozen - set(PARAMETER_GROUPS)
    if unknown:
        raise ValueError(f"Unknown parameter groups in freeze policy: {sorted(unknown)}.")
    if model_cfg.backbone.adapter_mode != "none" and not set(BACKBONE_GROUPS) <= frozen:
        raise ValueError(
            f"With adapters the freeze policy must contain every backbone group {list(BACKBONE_GROUPS)}."
        )
    if frozen & {"local_head", "gem"}:
        raise ValueError("The local head and the GeM exponent are always tunable.")


def apply_freeze_policy(model: nn.Module, freeze_policy: Iterable[str]) -> List[str]:
    """
    Sets `requires_grad` from the freeze policy.

    ## Returns:
    * `list`: Names of the tunable parameters.
    """
    frozen = set(freeze_policy)
    tunable = []
    for name, param in model.named_parameters():
        param.requires_grad_(parameter_group(name) not in frozen)
        if param.requires_grad:
            tunable.append(name)
    logger.debug(f"{len(tunable)} tunable parameter tensors.")
    return tunable


def count_parameters(model: nn.Module, freeze_policy: Iterable[str] = ()) -> ParamReport:
    """
    Exact parameter counts per group, tunable and frozen under `freeze_policy`.
    """
    frozen = set(freeze_policy)
    groups = OrderedDict((name, 0) for name in PARAMETER_GROUPS)
    for name, param in model.named_parameters():
        groups[parameter_group(name)] += param.numel()
    total = sum(groups.values())
    frozen_count = sum(count for name, count in groups.items() if name in frozen)
    return ParamReport(
        total_params=total,
        tunable_params=total - frozen_count,
        frozen_params=frozen_count,
        groups=dict(groups),
    )


def randomize_adapters(model: nn.Module, std: float = 0.02, seed: int = 0) -> int:
    """
    Replaces the zero-initialized adapter up-projections with small seeded random values, so gradients
    reach every adapter weight.

    ## Returns:
    * `int`: Number of adapter up-projection tensors changed.
    """
    generator = torch.Generator().manual_seed(seed)
    changed = 0
    with torch.no_grad():
        for name, param in model.named_parameters():
            if parameter_group(name) == "adapters" and ".up." in name:
                noise = torch.randn(param.shape, generator=generator, dtype=torch.float64)
                param.copy_((std * noise).to(param.dtype))
                changed += 1
    return changed


def instantiate_optimizer(
    model_cfg: ModelConfiguration, model: nn.Module, learning_rate: float, **kwargs
) -> torch.optim.Optimizer:
    """
    Instantiates the optimizer over the tunable parameters only.

    ## Args:
    * `model_cfg` (`ModelConfiguration`): The model configuration.
    * `model` (`nn.Module`): The model to optimize.
    * `learning_rate` (`float`): The learning rate.
    """
    logger.info("Instantiating optimizer...")
    optimizer: torch.optim.Optimizer = hydra_instantiate(
        cfg=_as_config(model_cfg).optimizer,
        params=(p for p in model.parameters() if p.requires_grad),
        lr=learning_rate,
        **kwargs,
    )
    return optimizer


def save_checkpoint(
    model: PlaceRecognitionModel, model_cfg: ModelConfiguration, path: os.PathLike
):
    """
    Writes the SVWT checkpoint: magic, u32 version, u32 length + UTF-8 YAML model configuration
    (backbone, head and optimizer), u32 array count, then per array: u32 name length, name, u32 rank, u32 dims, little-endian f32 values.
    """
    cfg_yaml = OmegaConf.to_yaml(
        OmegaConf.masked_copy(_as_config(model_cfg), ["backbone", "head", "optimizer"])
    ).encode("utf-8")
    state = model.state_dict()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_yaml)))
        f.write(cfg_yaml)
        f.write(struct.pack("<I", len(state)))
        for name, value in state.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack(f"<I{value.dim()}I", value.dim(), *value.shape))
            f.write(value.detach().cpu().numpy().astype("<f4").tobytes())
    logger.info(f"Checkpoint saved to '{path}'.")


def load_checkpoint(
    path: os.PathLike, dtype: torch.dtype = torch.float64
) -> tuple:
    """
    Reads an SVWT checkpoint.

    ## Returns:
    * `tuple`: The restored `PlaceRecognitionModel` and its `ModelConfiguration`.

    ## Raises:
    * `BadMagicError`, `VersionMismatchError`, `TruncatedFileError`: On a malformed file.
    """
    with open(path, "rb") as f:
        reader = ByteReader(f.read(), f"Checkpoint '{path}'")
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"'{path}' is not an SVWT checkpoint.")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"Checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})."
        )
    (cfg_len,) = reader.unpack("<I")
    loaded_cfg = OmegaConf.create(reader.take(cfg_len).decode("utf-8"))
    model_cfg = OmegaConf.merge(OmegaConf.structured(ModelConfiguration), loaded_cfg)
    if "optimizer" in loaded_cfg:
        # the stored optimizer replaces the default wholesale
        model_cfg.optimizer = loaded_cfg.optimizer

    state = OrderedDict()
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        numel = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(reader.take(4 * numel), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(values.astype(np.float32))

    model = instantiate_model(model_cfg, dtype=dtype)
    model.load_state_dict({k: v.to(dtype) for k, v in state.items()})
    logger.info(f"Checkpoint loaded from '{path}'.")
    return model, model_cfg
