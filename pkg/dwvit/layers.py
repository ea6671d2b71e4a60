"""
Vision Transformer layers.

Every layer is a ``Module``: tensors with ``requires_grad`` set are its
parameters, other tensors are buffers (BatchNorm running statistics) and
nested modules, or lists of modules, are walked recursively in attribute order.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from dwvit.errors import (
    CheckpointError,
    ConfigurationError,
    DegenerateStatisticsError,
    DimensionError,
)
from dwvit.tensor import (
    DEFAULT_DTYPE,
    Function,
    Tensor,
    concat,
    embedding,
    gelu,
    parameter,
    repeat_leading,
    reshape,
    softmax,
    split,
    swapaxes,
    transpose,
    trunc_normal,
)

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-6
BATCHNORM_EPS = 1e-5
BATCHNORM_MOMENTUM = 0.1
INIT_STD = 0.02


class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _slots(self, prefix: str = "") -> Iterator[Tuple[str, "Module", str, Tensor]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, self, attr, value
            elif isinstance(value, Module):
                yield from value._slots(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._slots(f"{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for name, _, _, tensor in self._slots():
            if tensor.requires_grad:
                yield name, tensor

    def named_buffers(self) -> Iterator[Tuple[str, Tensor]]:
        for name, _, _, tensor in self._slots():
            if not tensor.requires_grad:
                yield name, tensor

    def parameters(self):
        return [tensor for _, tensor in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.zero_grad()

    def to(self, dtype: np.dtype) -> "Module":
        for _, module, attr, tensor in list(self._slots()):
            setattr(module, attr, tensor.astype(dtype))
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, _, _, tensor in self._slots()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        slots = {name: (module, attr, tensor) for name, module, attr, tensor in self._slots()}
        missing = sorted(set(slots) - set(state))
        unexpected = sorted(set(state) - set(slots))
        if missing or unexpected:
            raise CheckpointError(
                f"state does not match model: missing {missing}, unexpected {unexpected}"
            )
        for name, (module, attr, tensor) in slots.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise CheckpointError(
                    f"{name}: shape {value.shape} does not match model shape {tensor.shape}"
                )
            setattr(
                module,
                attr,
                Tensor(value.copy(), requires_grad=tensor.requires_grad, dtype=tensor.dtype),
            )


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        dtype: np.dtype = DEFAULT_DTYPE,
    ):
        self.weight = parameter(trunc_normal(rng, (out_features, in_features), INIT_STD), dtype)
        self.bias = parameter(np.zeros(out_features), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x @ transpose(self.weight) + self.bias


class LayerNormFunction(Function):
    def forward(self, x, gamma, beta, eps: float):
        mean = x.mean(axis=-1, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.inv_std
        return self.xhat * gamma + beta

    def backward(self, grad):
        gamma = self.inputs[1].data
        lead = tuple(range(grad.ndim - 1))
        dxhat = grad * gamma
        n = grad.shape[-1]
        dx = (self.inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (grad * self.xhat).sum(axis=lead), grad.sum(axis=lead)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis; eps sits inside the square root."""
    if x.shape[-1:] != gamma.shape:
        raise DimensionError(f"layer_norm: input {x.shape} does not end in {gamma.shape}")
    return LayerNormFunction.apply(x, gamma, beta, eps=eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LAYERNORM_EPS, dtype: np.dtype = DEFAULT_DTYPE):
        self.gamma = parameter(np.ones(dim), dtype)
        self.beta = parameter(np.zeros(dim), dtype)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm2dFunction(Function):
    def forward(self, x, gamma, beta, mean, var, eps: float, training: bool):
        self.training = training
        self.inv_std = (1.0 / np.sqrt(var + eps))[None, :, None, None]
        self.xhat = (x - mean[None, :, None, None]) * self.inv_std
        return self.xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def backward(self, grad):
        gamma = self.inputs[1].data[None, :, None, None]
        axes = (0, 2, 3)
        dxhat = grad * gamma
        if self.training:
            n = grad.shape[0] * grad.shape[2] * grad.shape[3]
            dx = (self.inv_std / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - self.xhat * (dxhat * self.xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * self.inv_std
        return dx, (grad * self.xhat).sum(axis=axes), grad.sum(axis=axes)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mean: Tensor,
    var: Tensor,
    eps: float = BATCHNORM_EPS,
    training: bool = True,
) -> Tensor:
    """
    Per-channel normalization of ``x[batch, C, H, W]``.

    ``mean`` and ``var`` are the statistics to normalize with: the batch
    statistics in training mode, the running ones in eval mode.
    """
    return BatchNorm2dFunction.apply(x, gamma, beta, mean, var, eps=eps, training=training)


class BatchNorm2d(Module):
    def __init__(
        self,
        channels: int,
        eps: float = BATCHNORM_EPS,
        momentum: float = BATCHNORM_MOMENTUM,
        dtype: np.dtype = DEFAULT_DTYPE,
    ):
        self.gamma = parameter(np.ones(channels), dtype)
        self.beta = parameter(np.zeros(channels), dtype)
        self.running_mean = Tensor(np.zeros(channels), dtype=dtype)
        self.running_var = Tensor(np.ones(channels), dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.gamma.shape[0]:
            raise DimensionError(
                f"batchnorm2d: expected [batch, {self.gamma.shape[0]}, H, W], got {x.shape}"
            )
        if not self.training:
            return batch_norm2d(
                x, self.gamma, self.beta, self.running_mean, self.running_var,
                self.eps, training=False,
            )

        batch, _, height, width = x.shape
        count = batch * height * width
        if count == 1:
            raise DegenerateStatisticsError(
                "batchnorm2d needs more than one value per channel in training mode"
            )
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = self.momentum
        self.running_mean = Tensor(
            (1.0 - m) * self.running_mean.data + m * mean, dtype=x.dtype
        )
        self.running_var = Tensor(
            (1.0 - m) * self.running_var.data + m * var * (count / (count - 1)),
            dtype=x.dtype,
        )
        return batch_norm2d(
            x, self.gamma, self.beta, Tensor(mean), Tensor(var), self.eps, training=True
        )


@dataclass
class TokenSequence:
    """
    Tokens ``[batch, L(+1), dim]`` laid out on a ``grid_h x grid_w`` patch grid.

    When ``has_class_token`` is set the class token sits at index 0.
    """

    tokens: Tensor
    has_class_token: bool
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise DimensionError(f"tokens must be [batch, count, dim], got {self.tokens.shape}")
        expected = self.grid_h * self.grid_w + int(self.has_class_token)
        if self.tokens.shape[1] != expected:
            raise ConfigurationError(
                f"{self.tokens.shape[1]} tokens do not fit a {self.grid_h}x{self.grid_w} grid"
                f"{' plus class token' if self.has_class_token else ''}"
            )

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    def split(self) -> Tuple[Optional[Tensor], Tensor]:
        """Return ``(class_token [batch, 1, dim] or None, patch tokens [batch, L, dim])``."""
        if not self.has_class_token:
            return None, self.tokens
        class_token, patches = split(self.tokens, [1, self.num_patches], axis=1)
        return class_token, patches

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)


class PatchEmbed(Module):
    """
    Patch projection, class token and positional embedding.

    Each token is the projection of its patch flattened channel-major
    ``(c, row, col)``; patches are ordered row-major over the grid.
    """

    def __init__(
        self,
        image_size: int,
        patch_size: int,
        in_channels: int,
        dim: int,
        rng: np.random.Generator,
        use_class_token: bool = True,
        use_pos_embed: bool = True,
        dtype: np.dtype = DEFAULT_DTYPE,
    ):
        if image_size % patch_size:
            raise ConfigurationError(
                f"image_size {image_size} is not divisible by patch_size {patch_size}"
            )
        self.image_size = image_size
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.grid = image_size // patch_size
        self.proj = Linear(in_channels * patch_size * patch_size, dim, rng, dtype)
        tokens = self.grid * self.grid + int(use_class_token)
        if use_class_token:
            self.cls_token = parameter(trunc_normal(rng, (dim,), INIT_STD), dtype)
        if use_pos_embed:
            self.pos_embed = parameter(trunc_normal(rng, (tokens, dim), INIT_STD), dtype)

    @property
    def has_class_token(self) -> bool:
        return hasattr(self, "cls_token")

    @property
    def has_pos_embed(self) -> bool:
        return hasattr(self, "pos_embed")

    def forward(self, images: Tensor) -> TokenSequence:
        batch, channels, height, width = images.shape
        p = self.patch_size
        if height % p or width % p:
            raise ConfigurationError(f"image {height}x{width} is not divisible by patch size {p}")
        if channels != self.in_channels:
            raise DimensionError(f"expected {self.in_channels} channels, got {channels}")
        grid_h, grid_w = height // p, width // p
        patches = reshape(images, (batch, channels, grid_h, p, grid_w, p))
        patches = transpose(patches, (0, 2, 4, 1, 3, 5))
        patches = reshape(patches, (batch, grid_h * grid_w, channels * p * p))
        tokens = self.proj(patches)
        if self.has_class_token:
            dim = self.cls_token.shape[0]
            cls = repeat_leading(reshape(self.cls_token, (1, dim)), batch)
            tokens = concat([cls, tokens], axis=1)
        if self.has_pos_embed:
            count = tokens.shape[1]
            if count != self.pos_embed.shape[0]:
                raise DimensionError(
                    f"{count} tokens but positional embedding has {self.pos_embed.shape[0]} rows"
                )
            tokens = tokens + embedding(self.pos_embed, np.arange(count))
        return TokenSequence(tokens, self.has_class_token, grid_h, grid_w)


class Attention(Module):
    def __init__(
        self, dim: int, heads: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE
    ):
        if dim % heads:
            raise ConfigurationError(f"dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, count, dim = x.shape
        x = reshape(x, (batch, count, self.heads, dim // self.heads))
        return transpose(x, (0, 2, 1, 3))

    def forward(self, x: Tensor) -> Tensor:
        batch, count, dim = x.shape
        scale = 1.0 / math.sqrt(dim // self.heads)
        q = self._split_heads(self.q(x))
        k = self._split_heads(self.k(x))
        v = self._split_heads(self.v(x))
        weights = softmax((q @ swapaxes(k, -1, -2)) * scale, axis=-1)
        out = transpose(weights @ v, (0, 2, 1, 3))
        return self.proj(reshape(out, (batch, count, dim)))


class AttentionBlock(Module):
    """``x + MHSA(LayerNorm(x))``; every token attends to every token."""

    def __init__(
        self, dim: int, heads: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE
    ):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.attn = Attention(dim, heads, rng, dtype)

    def forward(self, x: TokenSequence) -> TokenSequence:
        return x.with_tokens(x.tokens + self.attn(self.norm(x.tokens)))


class FeedForward(Module):
    def __init__(
        self, dim: int, hidden: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE
    ):
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class FeedForwardBlock(Module):
    """``x + FF(LayerNorm(x))``."""

    def __init__(
        self, dim: int, hidden: int, rng: np.random.Generator, dtype: np.dtype = DEFAULT_DTYPE
    ):
        self.norm = LayerNorm(dim, dtype=dtype)
        self.ff = FeedForward(dim, hidden, rng, dtype)

    def forward(self, x: TokenSequence) -> TokenSequence:
        return x.with_tokens(x.tokens + self.ff(self.norm(x.tokens)))


class TransformerBlock(Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_dim: int,
        rng: np.random.Generator,
        dtype: np.dtype = DEFAULT_DTYPE,
    ):
        self.mhsa = AttentionBlock(dim, heads, rng, dtype)
        self.ffn = FeedForwardBlock(dim, mlp_dim, rng, dtype)

    def forward(self, x: TokenSequence) -> TokenSequence:
        return ffn_block(mhsa_block(x, self.mhsa), self.ffn)


def mhsa_block(x: TokenSequence, block: AttentionBlock) -> TokenSequence:
    return block(x)


def ffn_block(x: TokenSequence, block: FeedForwardBlock) -> TokenSequence:
    return block(x)
