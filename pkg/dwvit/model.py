"""
Classifier assembly: patch embedding, bypass groups, final LayerNorm, head.
"""

import logging
from typing import List

import numpy as np

from dwvit.bypass import BypassGroup, DWBranch, bypass_group_forward, group_layout
from dwvit.config import ModelConfig
from dwvit.layers import LayerNorm, Linear, Module, PatchEmbed, TransformerBlock
from dwvit.tensor import DEFAULT_DTYPE, Tensor, make_rng, reduce_mean, reshape, split

logger = logging.getLogger(__name__)

# child stream of the seed reserved for shortcut branches
BRANCH_STREAM = 1


class Model(Module):
    """
    Vision Transformer classifier with optional shortcuts over block groups.

    Backbone parameters and branch parameters come from separate random
    streams of ``config.seed``, so every bypass variant built with the same
    seed shares its backbone weights with the vanilla model.
    """

    def __init__(self, config: ModelConfig, dtype: np.dtype = DEFAULT_DTYPE):
        self.config = config
        rng = make_rng(config.seed)
        branch_rng = make_rng(config.seed, BRANCH_STREAM)
        bypass = config.bypass

        self.patch_embed = PatchEmbed(
            config.image_size,
            config.patch_size,
            config.in_channels,
            config.dim,
            rng,
            use_class_token=config.use_class_token,
            use_pos_embed=config.use_pos_embed,
            dtype=dtype,
        )
        self.groups = []
        for indices in group_layout(config.depth, bypass.group_size):
            blocks = [
                TransformerBlock(config.dim, config.heads, config.mlp_dim, rng, dtype)
                for _ in indices
            ]
            branches = []
            if bypass.kind == "dwconv":
                branches = [
                    DWBranch(config.dim, k, branch_rng, dtype) for k in bypass.kernel_sizes
                ]
            self.groups.append(BypassGroup(blocks, bypass.kind, branches))
        self.norm = LayerNorm(config.dim, dtype=dtype)
        self.head = Linear(config.dim, config.num_classes, rng, dtype)

    @property
    def blocks(self) -> List[TransformerBlock]:
        return [block for group in self.groups for block in group.blocks]

    @property
    def branches(self) -> List[DWBranch]:
        return [branch for group in self.groups for branch in group.branches]

    def forward(self, images: Tensor) -> Tensor:
        x = self.patch_embed(images)
        for group in self.groups:
            x = bypass_group_forward(x, group)
        tokens = self.norm(x.tokens)
        batch, count, dim = tokens.shape
        if self.config.pooling == "class_token":
            class_token, _ = split(tokens, [1, count - 1], axis=1)
            pooled = reshape(class_token, (batch, dim))
        else:
            if x.has_class_token:
                _, tokens = split(tokens, [1, count - 1], axis=1)
            pooled = reduce_mean(tokens, axis=1)
        return self.head(pooled)


def build_model(config: ModelConfig, dtype: np.dtype = DEFAULT_DTYPE) -> Model:
    model = Model(config, dtype)
    total = sum(p.size for p in model.parameters())
    logger.debug(
        f"built model dim={config.dim} depth={config.depth} bypass={config.bypass.kind} "
        f"with {total} parameters"
    )
    return model
