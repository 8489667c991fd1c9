"""
Tests for the `vprtk.tensor` module.
"""
import pytest

import torch
import torch.nn.functional as F

from vprtk import tensor
from vprtk.tensor import AttentionParams, ConvTransposeSpec, NonFiniteTensorError


def _attention_params(dim: int, generator: torch.Generator) -> AttentionParams:
    def rand(*shape):
        return torch.randn(*shape, generator=generator, dtype=torch.float64) * 0.3

    return AttentionParams(
        q_weight=rand(dim, dim),
        q_bias=rand(dim),
        k_weight=rand(dim, dim),
        k_bias=rand(dim),
        v_weight=rand(dim, dim),
        v_bias=rand(dim),
        o_weight=rand(dim, dim),
        o_bias=rand(dim),
    )


class TestTensor:
    def test_check_finite(self):
        """Tests the `vprtk.tensor.check_finite` function."""
        x = torch.ones(3)
        assert tensor.check_finite(x) is x
        with pytest.raises(NonFiniteTensorError):
            tensor.check_finite(torch.tensor([1.0, float("nan")]))
        with pytest.raises(ValueError):
            tensor.check_finite(torch.tensor([float("inf")]))

    def test_layer_norm(self):
        """Tests the `vprtk.tensor.layer_norm` function."""
        x = torch.randn(2, 5, 8, dtype=torch.float64)
        out = tensor.layer_norm(
            x, torch.ones(8, dtype=torch.float64), torch.zeros(8, dtype=torch.float64)
        )
        torch.testing.assert_close(out.mean(-1), torch.zeros(2, 5, dtype=torch.float64))
        # a constant row normalizes to beta
        beta = torch.arange(4, dtype=torch.float64)
        constant = torch.full((1, 4), 3.0, dtype=torch.float64)
        torch.testing.assert_close(
            tensor.layer_norm(constant, torch.ones(4, dtype=torch.float64), beta), beta[None]
        )
        with pytest.raises(ValueError):
            tensor.layer_norm(x, torch.ones(7), torch.zeros(8))
        with pytest.raises(ValueError):
            tensor.layer_norm(x, torch.ones(8), torch.zeros(8), eps=0.0)

    def test_multi_head_attention_single_head_reference(self):
        """Tests the `vprtk.tensor.multi_head_attention` function against a direct computation."""
        generator = torch.Generator().manual_seed(0)
        dim = 6
        params = _attention_params(dim, generator)
        x = torch.randn(2, 5, dim, generator=generator, dtype=torch.float64)
        q = x @ params.q_weight.T + params.q_bias
        k = x @ params.k_weight.T + params.k_bias
        v = x @ params.v_weight.T + params.v_bias
        attn = torch.softmax(q @ k.transpose(-1, -2) / dim**0.5, dim=-1)
        expected = (attn @ v) @ params.o_weight.T + params.o_bias
        torch.testing.assert_close(tensor.multi_head_attention(x, params, heads=1), expected)

    def test_multi_head_attention_permutation_equivariance(self):
        generator = torch.Generator().manual_seed(1)
        params = _attention_params(8, generator)
        x = torch.randn(7, 8, generator=generator, dtype=torch.float64)
        perm = torch.randperm(7, generator=generator)
        out = tensor.multi_head_attention(x, params, heads=2)
        torch.testing.assert_close(tensor.multi_head_attention(x[perm], params, heads=2), out[perm])

    def test_multi_head_attention_rejects_bad_heads(self):
        params = _attention_params(6, torch.Generator().manual_seed(0))
        with pytest.raises(ValueError):
            tensor.multi_head_attention(torch.zeros(3, 6, dtype=torch.float64), params, heads=4)

    def test_transposed_conv2d(self):
        """Tests the `vprtk.tensor.transposed_conv2d` function."""
        generator = torch.Generator().manual_seed(0)
        spec = ConvTransposeSpec(4, 3, kernel=3, stride=2, padding=1)
        fm = torch.randn(2, 5, 5, 4, generator=generator, dtype=torch.float64)
        weight = torch.randn(4, 3, 3, 3, generator=generator, dtype=torch.float64)
        bias = torch.randn(3, generator=generator, dtype=torch.float64)
        out = tensor.transposed_conv2d(fm, spec, weight, bias)
        assert out.shape == (2, 9, 9, 3)
        expected = F.conv_transpose2d(
            fm.permute(0, 3, 1, 2), weight, bias, stride=2, padding=1
        ).permute(0, 2, 3, 1)
        torch.testing.assert_close(out, expected)

    def test_transposed_conv2d_single_pixel(self):
        """A 1 x 1 map with stride 1 and no padding places the kernel itself."""
        spec = ConvTransposeSpec(1, 1, kernel=3, stride=1, padding=0)
        weight = torch.arange(9, dtype=torch.float64).reshape(1, 1, 3, 3)
        out = tensor.transposed_conv2d(torch.ones(1, 1, 1, dtype=torch.float64), spec, weight)
        torch.testing.assert_close(out[..., 0], weight[0, 0])

    def test_conv_transpose_spec(self):
        spec = ConvTransposeSpec(8, 4)
        assert spec.output_size(16) == 31
        assert spec.output_size(31) == 61
        with pytest.raises(ValueError):
            ConvTransposeSpec(8, 4, stride=0).validate()
        with pytest.raises(ValueError):
            tensor.transposed_conv2d(
                torch.zeros(2, 2, 5, dtype=torch.float64), spec, torch.zeros(8, 4, 3, 3)
            )

    def test_l2_normalize(self):
        """Tests the `vprtk.tensor.l2_normalize` function."""
        v = torch.tensor([[3.0, 4.0], [0.0, 0.0]], dtype=torch.float64)
        out = tensor.l2_normalize(v)
        torch.testing.assert_close(out[0], torch.tensor([0.6, 0.8], dtype=torch.float64))
        torch.testing.assert_close(out[1], torch.zeros(2, dtype=torch.float64))
        with pytest.raises(ValueError):
            tensor.l2_normalize(v, eps=0.0)

    @pytest.mark.parametrize("shape", [(1, 1), (3, 4), (2, 5, 16), (2, 3, 7, 9)])
    def test_layer_norm_moments(self, shape: tuple):
        generator = torch.Generator().manual_seed(len(shape))
        x = 3.0 * torch.randn(*shape, generator=generator, dtype=torch.float64) + 1.5
        dim = shape[-1]
        gamma = torch.randn(dim, generator=generator, dtype=torch.float64)
        beta = torch.randn(dim, generator=generator, dtype=torch.float64)
        mean = x.mean(-1, keepdim=True)
        var = ((x - mean) ** 2).mean(-1, keepdim=True)
        expected = gamma * (x - mean) / torch.sqrt(var + 1e-6) + beta
        torch.testing.assert_close(tensor.layer_norm(x, gamma, beta, eps=1e-6), expected)

    @pytest.mark.parametrize("heads", [2, 4, 8])
    @pytest.mark.parametrize("tokens", [1, 3, 8])
    def test_multi_head_attention_per_head_loop(self, heads: int, tokens: int):
        generator = torch.Generator().manual_seed(heads * 10 + tokens)
        dim = 16
        head_dim = dim // heads
        params = _attention_params(dim, generator)
        x = torch.randn(tokens, dim, generator=generator, dtype=torch.float64)
        q = x @ params.q_weight.T + params.q_bias
        k = x @ params.k_weight.T + params.k_bias
        v = x @ params.v_weight.T + params.v_bias
        outputs = []
        for h in range(heads):
            cols = slice(h * head_dim, (h + 1) * head_dim)
            attn = torch.softmax(q[:, cols] @ k[:, cols].T / head_dim**0.5, dim=-1)
            outputs.append(attn @ v[:, cols])
        expected = torch.cat(outputs, dim=-1) @ params.o_weight.T + params.o_bias
        torch.testing.assert_close(tensor.multi_head_attention(x, params, heads=heads), expected)

    @pytest.mark.parametrize("seed", range(20))
    def test_conv_transpose_spec_output_size(self, seed: int):
        generator = torch.Generator().manual_seed(seed)

        def draw(low: int, high: int) -> int:
            return int(torch.randint(low, high + 1, (1,), generator=generator))

        kernel = draw(1, 5)
        spec = ConvTransposeSpec(
            draw(1, 3), draw(1, 3), kernel=kernel, stride=draw(1, 3), padding=draw(0, kernel - 1)
        )
        size = draw(1, 8)
        if spec.output_size(size) < 1:
            with pytest.raises(ValueError):
                spec.validate(size)
            return
        x = torch.zeros(1, spec.in_channels, size, size, dtype=torch.float64)
        weight = torch.zeros(spec.in_channels, spec.out_channels, kernel, kernel, dtype=torch.float64)
        out = F.conv_transpose2d(x, weight, stride=spec.stride, padding=spec.padding)
        assert out.shape[-1] == spec.output_size(size)

    @pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e4])
    def test_l2_normalize_scale_invariant_and_idempotent(self, scale: float):
        v = torch.randn(5, 6, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        once = tensor.l2_normalize(v)
        torch.testing.assert_close(tensor.l2_normalize(scale * v), once)
        torch.testing.assert_close(tensor.l2_normalize(once), once)
        torch.testing.assert_close(once.norm(dim=-1), torch.ones(5, dtype=torch.float64))
