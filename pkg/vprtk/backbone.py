"""
Adapter-augmented ViT backbone.

Images are channel-last `(B, H, W, 3)` tensors in `[0, 1]`. The backbone returns the final patch
tokens reshaped as a feature map `fm` of shape `(B, h, w, D)` and, separately, the final class token.
"""
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from vprtk import tensor
from vprtk.config import BackboneConfiguration, adapter_hidden_dim, validate_backbone_configuration
from vprtk.utils import get_logger

logger = get_logger(__name__)

_SERIAL_MODES = ("serial_only", "both")
_PARALLEL_MODES = ("parallel_only", "both")


@dataclass
class BackboneOutput:
    """
    ## Attributes:
    * `feature_map` (`torch.Tensor`): Patch tokens reshaped to `(B, h, w, D)`.
    * `class_token` (`torch.Tensor`): The final class token, `(B, D)`.
    """

    feature_map: torch.Tensor
    class_token: torch.Tensor


class LayerNorm(nn.LayerNorm):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return tensor.layer_norm(x, self.weight, self.bias, self.eps)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"Token dimension {dim} is not divisible by {heads} heads.")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    @property
    def params(self) -> tensor.AttentionParams:
        return tensor.AttentionParams(
            q_weight=self.q.weight,
            q_bias=self.q.bias,
            k_weight=self.k.weight,
            k_bias=self.k.bias,
            v_weight=self.v.weight,
            v_bias=self.v.bias,
            o_weight=self.proj.weight,
            o_bias=self.proj.bias,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return tensor.multi_head_attention(x, self.params, self.heads)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Adapter(nn.Module):
    """
    Bottleneck adapter: down-project, ReLU, up-project.

    The serial adapter keeps an internal skip connection, `a(z) = z + up(ReLU(down(z)))`; the parallel
    adapter has none. The up-projection starts at exactly zero, so a fresh adapter contributes nothing.

    ## Args:
    * `dim` (`int`): Token dimension `D`.
    * `hidden_dim` (`int`): Bottleneck width `round(r * D)`.
    * `skip` (`bool`, optional): Whether to add the input back. Defaults to `True`.
    """

    def __init__(self, dim: int, hidden_dim: int, skip: bool = True):
        super().__init__()
        self.skip = skip
        self.down = nn.Linear(dim, hidden_dim)
        self.up = nn.Linear(hidden_dim, dim)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.normal_(self.down.weight, std=1e-2)
        nn.init.zeros_(self.down.bias)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = self.up(F.relu(self.down(z)))
        return z + out if self.skip else out


class Block(nn.Module):
    """
    Standard pre-norm transformer block with an optional serial adapter after the attention layer
    and an optional parallel adapter beside the MLP, scaled by `scale`.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_ratio: float = 4.0,
        adapter_mode: str = "none",
        adapter_dim: int = 1,
        scale: float = 0.2,
        eps: float = 1e-6,
    ):
        super().__init__()
        self.adapter_mode = adapter_mode
        self.scale = scale
        self.norm1 = LayerNorm(dim, eps=eps)
        self.attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim, eps=eps)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.adapter1: Optional[Adapter] = (
            Adapter(dim, adapter_dim, skip=True) if adapter_mode in _SERIAL_MODES else None
        )
        self.adapter2: Optional[Adapter] = (
            Adapter(dim, adapter_dim, skip=False)
            if adapter_mode in _PARALLEL_MODES
            else None
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.adapter_mode == "none":
            return block_forward(x, self)
        return adapted_block_forward(x, self)


def block_forward(x: torch.Tensor, block: Block) -> torch.Tensor:
    """
    The unadapted block: `x' = MHA(LN(x)) + x`, `out = MLP(LN(x')) + x'`. Adapters on `block`, if any,
    are ignored.
    """
    x = block.attn(block.norm1(x)) + x
    return block.mlp(block.norm2(x)) + x


def adapted_block_forward(
    x: torch.Tensor, block: Block, s: float = None, mode: str = None
) -> torch.Tensor:
    """
    The adapted block: `x' = Adapter1(MHA(LN(x))) + x`, `out = MLP(LN(x')) + s * Adapter2(LN(x')) + x'`.

    `serial_only` drops the parallel term and `parallel_only` drops the serial adapter, reverting that
    path to the unadapted form.

    ## Args:
    * `x` (`torch.Tensor`): Tokens `(..., N + 1, D)`.
    * `block` (`Block`): The block whose parameters are used.
    * `s` (`float`, optional): Parallel adapter scale. Defaults to `block.scale`.
    * `mode` (`str`, optional): Adapter mode. Defaults to `block.adapter_mode`.
    """
    s = block.scale if s is None else s
    mode = block.adapter_mode if mode is None else mode
    if mode == "none":
        raise ValueError("adapted_block_forward needs an adapter mode other than 'none'.")
    use_serial, use_parallel = mode in _SERIAL_MODES, mode in _PARALLEL_MODES
    if (use_serial and block.adapter1 is None) or (use_parallel and block.adapter2 is None):
        raise ValueError(
            f"Mode '{mode}' needs adapters the block (built with '{block.adapter_mode}') does not have."
        )

    h = block.attn(block.norm1(x))
    if use_serial:
        h = block.adapter1(h)
    x = h + x
    z = block.norm2(x)
    out = block.mlp(z) + x
    if use_parallel:
        out = out + s * block.adapter2(z)
    return out


class VisionTransformer(nn.Module):
    """
    ViT with learned positional embeddings and a prepended class token.

    ## Args:
    * `backbone_cfg` (`BackboneConfiguration`): The backbone configuration.
    """

    def __init__(self, backbone_cfg: BackboneConfiguration):
        super().__init__()
        validate_backbone_configuration(backbone_cfg)
        self.image_size = backbone_cfg.image_size
        self.patch_size = backbone_cfg.patch_size
        self.embed_dim = backbone_cfg.embed_dim
        self.grid_size = backbone_cfg.image_size // backbone_cfg.patch_size
        self.num_patches = self.grid_size**2
        self.adapter_mode = backbone_cfg.adapter_mode

        dim = backbone_cfg.embed_dim
        self.patch_embed = nn.Linear(3 * backbone_cfg.patch_size**2, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, self.num_patches + 1, dim))
        self.blocks = nn.ModuleList(
            [
                Block(
                    dim,
                    backbone_cfg.num_heads,
                    mlp_ratio=backbone_cfg.mlp_ratio,
                    adapter_mode=backbone_cfg.adapter_mode,
                    adapter_dim=adapter_hidden_dim(backbone_cfg),
                    scale=backbone_cfg.scale,
                    eps=backbone_cfg.layer_norm_eps,
                )
                for _ in range(backbone_cfg.num_blocks)
            ]
        )
        self.norm = LayerNorm(dim, eps=backbone_cfg.layer_norm_eps)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for name, module in self.named_modules():
            if isinstance(module, nn.Linear) and ".adapter" not in f".{name}":
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def forward(self, images: torch.Tensor) -> BackboneOutput:
        return backbone_forward(images, self)


def patch_embed(images: torch.Tensor, vit: VisionTransformer) -> torch.Tensor:
    """
    Splits images into non-overlapping patches, projects them linearly, prepends the class token
    and adds positional embeddings.

    ## Args:
    * `images` (`torch.Tensor`): `(B, H, W, 3)` images matching the configured size.
    * `vit` (`VisionTransformer`): The backbone holding the embedding parameters.

    ## Returns:
    * `torch.Tensor`: Tokens `(B, N + 1, D)`; position 0 is the class token.
    """
    if images.ndim != 4 or tuple(images.shape[1:]) != (vit.image_size, vit.image_size, 3):
        raise ValueError(
            f"Expected images of shape (B, {vit.image_size}, {vit.image_size}, 3), got {tuple(images.shape)}."
        )
    patches = rearrange(
        images,
        "b (h p1) (w p2) c -> b (h w) (p1 p2 c)",
        p1=vit.patch_size,
        p2=vit.patch_size,
    )
    tokens = vit.patch_embed(patches)
    cls = vit.cls_token.expand(tokens.shape[0], -1, -1)
    return torch.cat([cls, tokens], dim=1) + vit.pos_embed


def backbone_forward(images: torch.Tensor, vit: VisionTransformer) -> BackboneOutput:
    """
    Runs the block stack, the final LayerNorm, drops the class token and reshapes patch tokens.
    """
    x = patch_embed(images, vit)
    for block in vit.blocks:
        x = block(x)
    x = vit.norm(x)
    feature_map = rearrange(x[:, 1:], "b (h w) d -> b h w d", h=vit.grid_size)
    return BackboneOutput(feature_map=feature_map, class_token=x[:, 0])
