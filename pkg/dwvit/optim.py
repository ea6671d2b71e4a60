"""
AdamW with decoupled weight decay and the warmup-cosine learning rate schedule.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from dwvit.config import TrainConfig
from dwvit.tensor import Tensor

logger = logging.getLogger(__name__)

NO_DECAY_NAMES = ("pos_embed", "cls_token")


def lr_at(epoch_fraction: float, config: TrainConfig) -> float:
    """
    Linear warmup from ``warmup_start_factor * base_lr`` to ``base_lr`` over
    ``warmup_epochs``, then a cosine from ``base_lr`` down to ``min_lr`` at
    ``epochs``.
    """
    epoch_fraction = max(epoch_fraction, 0.0)
    warmup = config.warmup_epochs
    if epoch_fraction < warmup:
        start = config.warmup_start_factor * config.base_lr
        return start + (config.base_lr - start) * epoch_fraction / warmup
    progress = min((epoch_fraction - warmup) / (config.epochs - warmup), 1.0)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.min_lr + (config.base_lr - config.min_lr) * cosine


def decay_mask(named_parameters: Iterable[Tuple[str, Tensor]]) -> List[bool]:
    """Norm gains, biases, positional embedding and class token are not decayed."""
    return [
        tensor.ndim > 1 and name.rsplit(".", 1)[-1] not in NO_DECAY_NAMES
        for name, tensor in named_parameters
    ]


@dataclass
class Moments:
    m: np.ndarray
    v: np.ndarray


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: List[Moments],
    t: int,
    lr: float,
    config: TrainConfig,
    decay: Optional[Sequence[bool]] = None,
) -> None:
    """
    One in-place update at step ``t`` (counted from 1).

    The decay ``p -= lr * wd * p`` is applied before the Adam update and does
    not pass through the moments. ``state`` is filled on the first call.
    """
    if not state:
        state.extend(Moments(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params)
    if decay is None:
        decay = [True] * len(params)
    beta1, beta2 = config.beta1, config.beta2
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t

    for param, grad, moments, decayed in zip(params, grads, state, decay):
        if grad is None:
            continue
        if config.weight_decay and decayed:
            param.data -= (lr * config.weight_decay) * param.data
        moments.m *= beta1
        moments.m += (1.0 - beta1) * grad
        moments.v *= beta2
        moments.v += (1.0 - beta2) * (grad * grad)
        m_hat = moments.m / correction1
        v_hat = moments.v / correction2
        param.data -= lr * m_hat / (np.sqrt(v_hat) + config.eps)


class AdamW:
    """Optimizer state for a model's named parameters."""

    def __init__(self, named_parameters: Iterable[Tuple[str, Tensor]], config: TrainConfig):
        named = list(named_parameters)
        self.names = [name for name, _ in named]
        self.params = [tensor for _, tensor in named]
        self.decay = decay_mask(named)
        self.config = config
        self.state: List[Moments] = []
        self.t = 0
        logger.debug(
            f"AdamW over {len(self.params)} tensors, {sum(self.decay)} with weight decay"
        )

    def step(self, lr: float) -> None:
        self.t += 1
        adamw_step(
            self.params,
            [p.grad for p in self.params],
            self.state,
            self.t,
            lr,
            self.config,
            self.decay,
        )

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None
