"""
Dense numeric kernels shared by the backbone, the feature heads and the matcher.

Every function is a pure function of its inputs. Spatial tensors are channel-last
(`... x H x W x C`) and any number of leading batch dimensions is accepted.
"""
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from einops import rearrange

from vprtk.utils import get_logger

logger = get_logger(__name__)

DEFAULT_DTYPE = torch.float64


class NonFiniteTensorError(ValueError):
    """Raised when a tensor holds NaN or infinite values."""


def check_finite(x: torch.Tensor, name: str = "tensor") -> torch.Tensor:
    """
    Validity check for tensors entering the pipeline.

    ## Raises:
    * `NonFiniteTensorError`: If any value is NaN or infinite.
    """
    if not torch.isfinite(x).all():
        bad = int((~torch.isfinite(x)).sum())
        raise NonFiniteTensorError(f"'{name}' holds {bad} non-finite values.")
    return x


@dataclass(frozen=True)
class ConvTransposeSpec:
    """
    Geometry of a square transposed convolution.

    ## Attributes:
    * `in_channels` (`int`): Input channels.
    * `out_channels` (`int`): Output channels.
    * `kernel` (`int`): Kernel side `k`. Defaults to `3`.
    * `stride` (`int`): Stride, at least 1. Defaults to `2`.
    * `padding` (`int`): Padding, at least 0. Defaults to `1`.
    """

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1

    def output_size(self, size: int) -> int:
        """`(size - 1) * stride - 2 * padding + kernel`."""
        return (size - 1) * self.stride - 2 * self.padding + self.kernel

    def validate(self, size: int = None):
        if self.stride < 1 or self.padding < 0 or self.kernel < 1:
            raise ValueError(
                f"Invalid transposed convolution: kernel={self.kernel}, stride={self.stride}, padding={self.padding}."
            )
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("Transposed convolution channels must be positive.")
        if size is not None and self.output_size(size) < 1:
            raise ValueError(
                f"Transposed convolution maps size {size} to non-positive size {self.output_size(size)}."
            )


@dataclass
class AttentionParams:
    """
    Projections of one multi-head attention layer, each a `D x D` weight (torch `Linear` layout,
    output-by-input) with a `D` bias. Heads split the projected `D` channels evenly.
    """

    q_weight: torch.Tensor
    q_bias: torch.Tensor
    k_weight: torch.Tensor
    k_bias: torch.Tensor
    v_weight: torch.Tensor
    v_bias: torch.Tensor
    o_weight: torch.Tensor
    o_bias: torch.Tensor


def layer_norm(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-6
) -> torch.Tensor:
    """
    Normalizes every last-dimension slice: `gamma * (x - mean) / sqrt(var + eps) + beta`.

    ## Args:
    * `x` (`torch.Tensor`): Input whose last dimension is `D`.
    * `gamma` (`torch.Tensor`): `D` scales.
    * `beta` (`torch.Tensor`): `D` offsets.
    * `eps` (`float`, optional): Variance guard, must be positive. Defaults to `1e-6`.
    """
    dim = x.shape[-1]
    if dim < 1:
        raise ValueError("layer_norm needs a non-empty last dimension.")
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise ValueError(
            f"gamma {tuple(gamma.shape)} and beta {tuple(beta.shape)} must both have shape ({dim},)."
        )
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}.")
    return F.layer_norm(x, (dim,), weight=gamma, bias=beta, eps=eps)


def multi_head_attention(
    x: torch.Tensor, params: AttentionParams, heads: int
) -> torch.Tensor:
    """
    Scaled dot-product attention per head, heads concatenated and output-projected.

    ## Args:
    * `x` (`torch.Tensor`): Tokens of shape `(..., N + 1, D)`.
    * `params` (`AttentionParams`): The Q/K/V/O projections.
    * `heads` (`int`): Number of heads; must divide `D`.

    ## Returns:
    * `torch.Tensor`: Tokens with the shape of `x`.
    """
    dim = x.shape[-1]
    if heads < 1 or dim % heads != 0:
        raise ValueError(f"Token dimension {dim} is not divisible by {heads} heads.")
    head_dim = dim // heads

    q = F.linear(x, params.q_weight, params.q_bias)
    k = F.linear(x, params.k_weight, params.k_bias)
    v = F.linear(x, params.v_weight, params.v_bias)
    q, k, v = (rearrange(t, "... n (h d) -> ... h n d", h=heads) for t in (q, k, v))

    scores = torch.matmul(q, k.transpose(-1, -2)) * head_dim**-0.5
    attn = scores.softmax(dim=-1)
    out = torch.matmul(attn, v)
    out = rearrange(out, "... h n d -> ... n (h d)")
    return F.linear(out, params.o_weight, params.o_bias)


def transposed_conv2d(
    fm: torch.Tensor,
    spec: ConvTransposeSpec,
    weight: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Transposed convolution (the gradient of a strided convolution) on channel-last maps.

    ## Args:
    * `fm` (`torch.Tensor`): Map of shape `(..., H, W, C_in)`.
    * `spec` (`ConvTransposeSpec`): Kernel geometry.
    * `weight` (`torch.Tensor`): Kernel of shape `(C_in, C_out, k, k)`.
    * `bias` (`torch.Tensor`, optional): `C_out` biases.

    ## Returns:
    * `torch.Tensor`: Map of shape `(..., H', W', C_out)` with `H' = (H - 1) * stride - 2 * padding + k`.
    """
    height, width, channels = fm.shape[-3:]
    spec.validate(min(height, width))
    if channels != spec.in_channels:
        raise ValueError(
            f"Feature map has {channels} channels, the kernel geometry expects {spec.in_channels}."
        )
    expected = (spec.in_channels, spec.out_channels, spec.kernel, spec.kernel)
    if tuple(weight.shape) != expected:
        raise ValueError(f"Kernel shape {tuple(weight.shape)} != {expected}.")

    batch_shape = fm.shape[:-3]
    x = rearrange(fm.reshape(-1, height, width, channels), "b h w c -> b c h w")
    out = F.conv_transpose2d(
        x, weight, bias=bias, stride=spec.stride, padding=spec.padding
    )
    out = rearrange(out, "b c h w -> b h w c")
    return out.reshape(*batch_shape, *out.shape[1:])


def l2_normalize(v: torch.Tensor, eps: float = 1e-12, dim: int = -1) -> torch.Tensor:
    """
    `v / max(||v||_2, eps)` along `dim`. Zero vectors stay zero.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}.")
    return v / v.norm(p=2, dim=dim, keepdim=True).clamp_min(eps)
