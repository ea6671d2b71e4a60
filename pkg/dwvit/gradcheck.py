"""
Central finite-difference checks of every backward rule.

Each case is a closure over float64 leaf tensors. The checked scalar is the
case output projected onto a fixed random direction, so every output element
contributes to the comparison.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np

from dwvit.bypass import dwconv2d
from dwvit.errors import ConfigurationError
from dwvit.layers import batch_norm2d, layer_norm
from dwvit.model import build_model
from dwvit.presets import model_preset
from dwvit.tensor import (
    Tape,
    Tensor,
    add,
    concat,
    embedding,
    gelu,
    make_rng,
    matmul,
    mul,
    neg,
    reduce_mean,
    reduce_sum,
    repeat_leading,
    reshape,
    softmax,
    split,
    sub,
    transpose,
)
from dwvit.train import cross_entropy

logger = logging.getLogger(__name__)

TOLERANCE = 1e-3
STEP = 1e-4
ERROR_FLOOR = 1e-6

Scope = Literal["ops", "model", "all"]
Case = Tuple[str, Callable[[], Tensor], Sequence[Tensor]]


@dataclass
class GradcheckResult:
    name: str
    max_error: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), ERROR_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(
    fn: Callable[[], Tensor], leaf: Tensor, projection: np.ndarray, h: float = STEP
) -> np.ndarray:
    """d(sum(fn() * projection)) / d(leaf) by central differences, perturbing ``leaf`` in place."""
    grad = np.zeros_like(leaf.data)
    flat = leaf.data.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = float((fn().data * projection).sum())
        flat[i] = original - h
        minus = float((fn().data * projection).sum())
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2.0 * h)
    return grad


def check_gradients(
    name: str,
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = STEP,
    tolerance: float = TOLERANCE,
    seed: int = 0,
) -> GradcheckResult:
    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        out = fn()
        projection = make_rng(seed).standard_normal(out.shape)
        loss = reduce_sum(mul(out, Tensor(projection, dtype=out.dtype)))
    tape.backward(loss)

    errors = []
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        errors.append(relative_error(analytic, numerical_gradient(fn, leaf, projection, h)))
    result = GradcheckResult(name, max(errors), tolerance)
    logger.debug(f"gradcheck {name}: max relative error {result.max_error:.3g}")
    return result


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0, offset: float = 0.0) -> Tensor:
    data = offset + scale * rng.standard_normal(shape)
    return Tensor(data, requires_grad=True, dtype=np.float64)


def op_cases(seed: int = 0) -> List[Case]:
    """One case per primitive, including both BatchNorm modes and the loss."""
    rng = make_rng(seed, 1)
    cases: List[Case] = []

    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    cases.append(("add", lambda: add(a, b), [a, b]))
    a2, b2 = _leaf(rng, 2, 3, 4), _leaf(rng, 4)
    cases.append(("add_broadcast", lambda: add(a2, b2), [a2, b2]))
    a3, b3 = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 4)
    cases.append(("sub", lambda: sub(a3, b3), [a3, b3]))
    cases.append(("mul", lambda: mul(a3, b3), [a3, b3]))
    c = _leaf(rng, 3, 4)
    cases.append(("neg", lambda: neg(c), [c]))
    cases.append(("add_scalar", lambda: c + 2.5, [c]))
    cases.append(("mul_scalar", lambda: c * -1.5, [c]))

    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    cases.append(("matmul", lambda: matmul(m1, m2), [m1, m2]))
    m3 = _leaf(rng, 2, 4, 5)
    cases.append(("matmul_batched", lambda: matmul(m1, m3), [m1, m3]))

    t = _leaf(rng, 2, 3, 4)
    cases.append(("transpose", lambda: transpose(t, (2, 0, 1)), [t]))
    cases.append(("reshape", lambda: reshape(t, (6, 4)), [t]))
    cases.append(("sum", lambda: reduce_sum(t, axis=1), [t]))
    cases.append(("mean", lambda: reduce_mean(t, axis=(0, 2), keepdims=True), [t]))

    p, q = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    cases.append(("concat", lambda: concat([p, q], axis=1), [p, q]))
    s = _leaf(rng, 2, 5)
    cases.append(("split", lambda: concat(split(s, [2, 3], axis=1)[::-1], axis=1), [s]))
    r = _leaf(rng, 3, 4)
    cases.append(("repeat_leading", lambda: repeat_leading(r, 2), [r]))
    table = _leaf(rng, 5, 3)
    cases.append(("embedding", lambda: embedding(table, [0, 2, 2, 4]), [table]))

    logits = _leaf(rng, 2, 5)
    cases.append(("softmax", lambda: softmax(logits, axis=-1), [logits]))
    g = _leaf(rng, 3, 4, scale=2.0)
    cases.append(("gelu", lambda: gelu(g), [g]))

    x, gamma, beta = _leaf(rng, 2, 3, 6), _leaf(rng, 6, offset=1.0, scale=0.5), _leaf(rng, 6)
    cases.append(("layer_norm", lambda: layer_norm(x, gamma, beta), [x, gamma, beta]))

    fmap = _leaf(rng, 2, 3, 2, 2)
    bn_gamma, bn_beta = _leaf(rng, 3, offset=1.0, scale=0.5), _leaf(rng, 3)

    def batch_norm_train() -> Tensor:
        mean = Tensor(fmap.data.mean(axis=(0, 2, 3)), dtype=np.float64)
        var = Tensor(fmap.data.var(axis=(0, 2, 3)), dtype=np.float64)
        return batch_norm2d(fmap, bn_gamma, bn_beta, mean, var, training=True)

    running_mean = Tensor(rng.standard_normal(3), dtype=np.float64)
    running_var = Tensor(1.0 + rng.random(3), dtype=np.float64)
    cases.append(("batch_norm2d_train", batch_norm_train, [fmap, bn_gamma, bn_beta]))
    cases.append(
        (
            "batch_norm2d_eval",
            lambda: batch_norm2d(
                fmap, bn_gamma, bn_beta, running_mean, running_var, training=False
            ),
            [fmap, bn_gamma, bn_beta],
        )
    )

    image = _leaf(rng, 2, 3, 4, 4)
    for kernel in (3, 5):
        weight, bias = _leaf(rng, 3, kernel, kernel), _leaf(rng, 3)
        cases.append(
            (
                f"dwconv2d_k{kernel}",
                lambda weight=weight, bias=bias: dwconv2d(image, weight, bias),
                [image, weight, bias],
            )
        )

    scores = _leaf(rng, 4, 5)
    labels = np.array([0, 3, 4, 1])
    cases.append(("cross_entropy", lambda: cross_entropy(scores, labels), [scores]))
    cases.append(
        (
            "cross_entropy_smoothed",
            lambda: cross_entropy(scores, labels, label_smoothing=0.1),
            [scores],
        )
    )
    return cases


def model_case(variant: str = "kernel3", seed: int = 0) -> Case:
    """The ``gradcheck`` preset (dim 8, depth 2, 2x2 patch grid) in float64, train mode."""
    model = build_model(model_preset("gradcheck", variant, seed=seed)).to(np.float64)
    rng = make_rng(seed, 2)
    config = model.config
    images = Tensor(
        rng.standard_normal((2, config.in_channels, config.image_size, config.image_size)),
        requires_grad=True,
        dtype=np.float64,
    )
    labels = rng.integers(0, config.num_classes, size=2)
    return (
        f"model_{variant}",
        lambda: cross_entropy(model(images), labels),
        [images, *model.parameters()],
    )


def run_gradcheck(
    scope: Scope = "all", cases: Optional[Sequence[Case]] = None, tolerance: float = TOLERANCE
) -> List[GradcheckResult]:
    if scope not in ("ops", "model", "all"):
        raise ConfigurationError(f"Unknown gradcheck scope: {scope}\n    Supported scopes: ops, model, all")
    if cases is None:
        cases = []
        if scope in ("ops", "all"):
            cases += op_cases()
        if scope in ("model", "all"):
            cases.append(model_case())
    results = [check_gradients(name, fn, leaves, tolerance=tolerance) for name, fn, leaves in cases]
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning(f"gradcheck failed for {', '.join(failed)}")
    return results
