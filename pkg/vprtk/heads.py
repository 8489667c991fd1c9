"""
Global (GeM) and local (up-convolution) feature heads on top of the backbone feature map.
"""
from typing import Union

import torch
import torch.nn as nn

from vprtk import tensor
from vprtk.config import HeadConfiguration
from vprtk.tensor import ConvTransposeSpec
from vprtk.utils import get_logger

logger = get_logger(__name__)


def gem_pool(
    fm: torch.Tensor, p: Union[float, torch.Tensor] = 3.0, eps: float = 1e-6
) -> torch.Tensor:
    """
    Generalized-mean pooling over the spatial dimensions of a channel-last map.

    Per channel: `(mean over locations of max(x, eps) ** p) ** (1 / p)`. Inputs are clamped at `eps`
    because fractional powers of negative activations are undefined.

    ## Args:
    * `fm` (`torch.Tensor`): Map of shape `(..., h, w, C)`.
    * `p` (`float` or `torch.Tensor`): Exponent, at least 1. May be a learnable scalar parameter.
    * `eps` (`float`, optional): Clamp value. Defaults to `1e-6`.

    ## Returns:
    * `torch.Tensor`: Pooled `(..., C)` vector.
    """
    is_meta = isinstance(p, torch.Tensor) and p.is_meta
    if not is_meta and float(p) < 1.0:
        raise ValueError(f"GeM exponent must be >= 1, got {float(p)}.")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}.")
    return fm.clamp(min=eps).pow(p).mean(dim=(-3, -2)).pow(1.0 / p)


def global_feature(
    fm: torch.Tensor,
    p: Union[float, torch.Tensor] = 3.0,
    mode: str = "gem",
    class_token: torch.Tensor = None,
    gem_eps: float = 1e-6,
    eps: float = 1e-12,
) -> torch.Tensor:
    """
    The L2-normalized global descriptor: `L2(GeM(fm))`, or `L2(class token)` in `class_token` mode.
    """
    if mode == "gem":
        pooled = gem_pool(fm, p=p, eps=gem_eps)
    elif mode == "class_token":
        if class_token is None:
            raise ValueError("class_token mode needs the backbone's class token.")
        pooled = class_token
    else:
        raise ValueError(f"Invalid global mode '{mode}'. Valid modes are 'gem' and 'class_token'.")
    return tensor.l2_normalize(pooled, eps=eps)


class GeM(nn.Module):
    """GeM pooling with an optionally learnable exponent."""

    def __init__(self, p: float = 3.0, eps: float = 1e-6, learnable: bool = False):
        super().__init__()
        self.eps = eps
        if learnable:
            self.p = nn.Parameter(torch.ones(1) * p)
        else:
            self.register_buffer("p", torch.tensor(float(p)))

    def forward(self, fm: torch.Tensor) -> torch.Tensor:
        p = self.p.squeeze()
        return gem_pool(fm, p=p, eps=self.eps)


class LocalAdaptation(nn.Module):
    """
    Two transposed convolutions with a ReLU between them, upsampling `(B, h, w, D)` feature maps to
    dense local grids `(B, h', w', C_l)`.

    ## Args:
    * `in_channels` (`int`): Backbone dimension `D`.
    * `head_cfg` (`HeadConfiguration`): The head configuration.
    """

    def __init__(self, in_channels: int, head_cfg: HeadConfiguration):
        super().__init__()
        self.eps = head_cfg.normalize_eps
        self.spec1 = ConvTransposeSpec(
            in_channels,
            head_cfg.mid_channels,
            kernel=head_cfg.kernel_size,
            stride=head_cfg.stride,
            padding=head_cfg.padding,
        )
        self.spec2 = ConvTransposeSpec(
            head_cfg.mid_channels,
            head_cfg.local_dim,
            kernel=head_cfg.kernel_size,
            stride=head_cfg.stride,
            padding=head_cfg.padding,
        )
        self.spec1.validate()
        self.spec2.validate()
        # parameter storage only; the forward pass goes through `tensor.transposed_conv2d`
        self.up_conv1 = nn.ConvTranspose2d(
            in_channels, head_cfg.mid_channels, head_cfg.kernel_size
        )
        self.up_conv2 = nn.ConvTranspose2d(
            head_cfg.mid_channels, head_cfg.local_dim, head_cfg.kernel_size
        )

    def output_size(self, size: int) -> int:
        return self.spec2.output_size(self.spec1.output_size(size))

    def forward(self, fm: torch.Tensor) -> torch.Tensor:
        return local_adaptation(fm, self)


def local_adaptation(fm: torch.Tensor, head: LocalAdaptation) -> torch.Tensor:
    """
    `intraL2(up_conv2(ReLU(up_conv1(fm))))` where intraL2 normalizes every location's channel vector.
    """
    x = tensor.transposed_conv2d(fm, head.spec1, head.up_conv1.weight, head.up_conv1.bias)
    x = torch.relu(x)
    x = tensor.transposed_conv2d(x, head.spec2, head.up_conv2.weight, head.up_conv2.bias)
    return tensor.l2_normalize(x, eps=head.eps)
