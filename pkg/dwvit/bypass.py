"""
Depth-wise convolution shortcuts around groups of Transformer blocks.

The patch tokens entering a group are laid back out on their 2D grid, passed
through GELU, BatchNorm and a depth-wise convolution, flattened again and added
to the group's output. The class token never enters the branch; its slot in
the residual is zero.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from more_itertools import chunked

from dwvit.config import BypassSpec
from dwvit.errors import ConfigurationError, DimensionError
from dwvit.layers import BatchNorm2d, Module, TokenSequence, TransformerBlock
from dwvit.tensor import (
    DEFAULT_DTYPE,
    Function,
    Tensor,
    concat,
    gelu,
    parameter,
    reshape,
    transpose,
    trunc_normal,
    zeros,
)

logger = logging.getLogger(__name__)


@dataclass
class FeatureMap2D:
    """Patch tokens as ``[batch, dim, grid_h, grid_w]``, class token carried alongside."""

    data: Tensor
    class_token: Optional[Tensor] = None

    @property
    def grid(self):
        return self.data.shape[2], self.data.shape[3]


def reshape_1d_to_2d(x: TokenSequence) -> FeatureMap2D:
    """Token ``i`` of the row-major grid lands at ``(i // grid_w, i % grid_w)``."""
    class_token, patches = x.split()
    batch, count, dim = patches.shape
    if count != x.grid_h * x.grid_w:
        raise ConfigurationError(f"{count} patch tokens do not fill a {x.grid_h}x{x.grid_w} grid")
    data = reshape(transpose(patches, (0, 2, 1)), (batch, dim, x.grid_h, x.grid_w))
    return FeatureMap2D(data, class_token)


def reshape_2d_to_1d(x: FeatureMap2D) -> TokenSequence:
    batch, dim, grid_h, grid_w = x.data.shape
    patches = transpose(reshape(x.data, (batch, dim, grid_h * grid_w)), (0, 2, 1))
    if x.class_token is None:
        return TokenSequence(patches, False, grid_h, grid_w)
    return TokenSequence(concat([x.class_token, patches], axis=1), True, grid_h, grid_w)


class DepthwiseConv2dFunction(Function):
    """Per-channel cross-correlation, stride 1, zero padding ``(k - 1) / 2``."""

    def forward(self, x, weight, bias):
        kernel = weight.shape[-1]
        self.pad = (kernel - 1) // 2
        _, _, height, width = x.shape
        self.padded = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        out = np.zeros_like(x)
        for i in range(kernel):
            for j in range(kernel):
                tap = weight[:, i, j][None, :, None, None]
                out += tap * self.padded[:, :, i : i + height, j : j + width]
        return out + bias[None, :, None, None]

    def backward(self, grad):
        weight = self.inputs[1].data
        kernel = weight.shape[-1]
        _, _, height, width = grad.shape
        grad_padded = np.zeros_like(self.padded)
        grad_weight = np.empty_like(weight)
        for i in range(kernel):
            for j in range(kernel):
                window = self.padded[:, :, i : i + height, j : j + width]
                grad_weight[:, i, j] = (grad * window).sum(axis=(0, 2, 3))
                tap = weight[:, i, j][None, :, None, None]
                grad_padded[:, :, i : i + height, j : j + width] += grad * tap
        p = self.pad
        grad_x = grad_padded[:, :, p : p + height, p : p + width]
        return grad_x, grad_weight, grad.sum(axis=(0, 2, 3))


def dwconv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depth-wise convolution of ``x[batch, C, H, W]`` with ``weight[C, k, k]``."""
    channels, kernel, kernel_w = weight.shape
    if kernel != kernel_w:
        raise ConfigurationError(f"depth-wise kernel must be square, got {kernel}x{kernel_w}")
    if kernel % 2 == 0:
        raise ConfigurationError(f"depth-wise kernel size must be odd, got {kernel}")
    if x.ndim != 4 or x.shape[1] != channels:
        raise DimensionError(f"dwconv2d: input {x.shape} does not have {channels} channels")
    return DepthwiseConv2dFunction.apply(x, weight, bias)


class DWBranch(Module):
    """GELU -> BatchNorm -> DWConv over the patch grid; one ``k x k`` filter per channel."""

    def __init__(
        self,
        dim: int,
        kernel_size: int,
        rng: np.random.Generator,
        dtype: np.dtype = DEFAULT_DTYPE,
    ):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd and positive, got {kernel_size}")
        self.kernel_size = kernel_size
        self.bn = BatchNorm2d(dim, dtype=dtype)
        self.weight = parameter(trunc_normal(rng, (dim, kernel_size, kernel_size)), dtype)
        self.bias = parameter(np.zeros(dim), dtype)

    @property
    def conv_param_count(self) -> int:
        return self.weight.size + self.bias.size

    def forward(self, x: TokenSequence) -> TokenSequence:
        fmap = reshape_1d_to_2d(x)
        hidden = FeatureMap2D(self.bn(gelu(fmap.data)))
        out = depthwise_conv2d(hidden, self)
        if fmap.class_token is not None:
            out.class_token = zeros(fmap.class_token.shape, fmap.class_token.dtype)
        return reshape_2d_to_1d(out)


def depthwise_conv2d(x: FeatureMap2D, params: DWBranch) -> FeatureMap2D:
    return FeatureMap2D(dwconv2d(x.data, params.weight, params.bias), x.class_token)


def dw_branch_forward(x: TokenSequence, params: DWBranch) -> TokenSequence:
    return params(x)


class BypassGroup(Module):
    """
    ``N`` Transformer blocks spanned by one shortcut.

    Every branch reads the activation entering the group; the residuals are
    summed unweighted onto the output of the last block.
    """

    def __init__(
        self,
        blocks: List[TransformerBlock],
        kind: str,
        branches: Optional[List[DWBranch]] = None,
    ):
        if kind == "dwconv" and not branches:
            raise ConfigurationError("a dwconv bypass needs at least one branch")
        self.blocks = list(blocks)
        self.kind = kind
        self.branches = list(branches or []) if kind == "dwconv" else []

    def residual(self, x: TokenSequence) -> Optional[Tensor]:
        if self.kind == "identity":
            class_token, patches = x.split()
            if class_token is None:
                return patches
            return concat([zeros(class_token.shape, class_token.dtype), patches], axis=1)
        residual = None
        for branch in self.branches:
            tokens = dw_branch_forward(x, branch).tokens
            residual = tokens if residual is None else residual + tokens
        return residual

    def forward(self, x: TokenSequence) -> TokenSequence:
        out = x
        for block in self.blocks:
            out = block(out)
        if self.kind == "none":
            return out
        return out.with_tokens(out.tokens + self.residual(x))


def bypass_group_forward(x: TokenSequence, group: BypassGroup) -> TokenSequence:
    return group(x)


def group_layout(depth: int, group_size: int) -> List[List[int]]:
    """Block indices per group; a trailing remainder forms a smaller last group."""
    if depth < 1 or group_size < 1:
        raise ConfigurationError(f"depth {depth} and group_size {group_size} must be positive")
    return [list(indices) for indices in chunked(range(depth), group_size)]


def num_groups(depth: int, group_size: int) -> int:
    return math.ceil(depth / group_size)


def extra_params(spec: BypassSpec, dim: int, depth: int, include_batchnorm: bool = False) -> int:
    """Parameters the shortcuts add: ``dim * (k*k + 1)`` per branch, BatchNorm affine optional."""
    if spec.kind != "dwconv":
        return 0
    per_group = sum(dim * (k * k + 1) for k in spec.kernel_sizes)
    if include_batchnorm:
        per_group += 2 * dim * len(spec.kernel_sizes)
    return num_groups(depth, spec.group_size) * per_group


def extra_flops(spec: BypassSpec, dim: int, depth: int, grid_h: int, grid_w: int) -> int:
    """Multiply-accumulates of the depth-wise convolutions; BatchNorm, GELU and bias excluded."""
    if spec.kind != "dwconv":
        return 0
    per_group = sum(dim * grid_h * grid_w * k * k for k in spec.kernel_sizes)
    return num_groups(depth, spec.group_size) * per_group
