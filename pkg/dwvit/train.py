"""
Loss, training loop and evaluation.
"""

import csv
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field
from threadpoolctl import threadpool_limits

from dwvit.checkpoint import save_checkpoint
from dwvit.config import RunConfig, dump_run_config
from dwvit.data import ImageDataset, batches, load_dataset, normalization_for, prefetch
from dwvit.errors import ContractError, DimensionError, NonFiniteLossError
from dwvit.model import Model, build_model
from dwvit.optim import AdamW, lr_at
from dwvit.tensor import Function, Tape, Tensor

logger = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "val_top1", "lr", "seconds"]
EVAL_BATCH_SIZE = 256


class CrossEntropy(Function):
    def forward(self, logits, labels: np.ndarray, smoothing: float):
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise DimensionError(
                f"cross_entropy: logits {logits.shape} and labels {labels.shape} do not pair up"
            )
        batch, classes = logits.shape
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise ContractError(f"cross_entropy: labels must lie in [0, {classes})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        target = np.full_like(logits, smoothing / classes)
        target[np.arange(batch), labels] += 1.0 - smoothing
        self.probs = np.exp(log_probs)
        self.target = target
        return np.asarray(-(target * log_probs).sum() / batch, dtype=logits.dtype)

    def backward(self, grad):
        batch = self.target.shape[0]
        return (grad * (self.probs - self.target) / batch,)


def cross_entropy(logits: Tensor, labels: Sequence[int], label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    return CrossEntropy.apply(
        logits, labels=np.asarray(labels, dtype=np.int64), smoothing=label_smoothing
    )


class MetricsRecord(BaseModel):
    epoch: int = Field(ge=1)
    train_loss: float
    val_top1: float = Field(ge=0, le=1)
    lr: float = Field(ge=0)
    seconds: float = Field(ge=0)

    def row(self) -> List[str]:
        return [
            str(self.epoch),
            repr(self.train_loss),
            repr(self.val_top1),
            repr(self.lr),
            repr(self.seconds),
        ]


@dataclass
class TrainResult:
    model: Model
    metrics: List[MetricsRecord]
    metrics_path: Path
    best_checkpoint: Path
    last_checkpoint: Path


def evaluate(
    model: Model,
    dataset: ImageDataset,
    batch_size: int = EVAL_BATCH_SIZE,
    mean: Optional[Sequence[float]] = None,
    std: Optional[Sequence[float]] = None,
) -> float:
    """Top-1 accuracy with BatchNorm on running statistics."""
    if not len(dataset):
        raise ContractError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    try:
        for images, labels in batches(dataset, batch_size, 0, mean=mean, std=std, shuffle=False):
            predictions = model(images).numpy().argmax(axis=1)
            correct += int((predictions == labels).sum())
    finally:
        model.train(was_training)
    return correct / len(dataset)


def with_data_root(run: RunConfig, root: Union[str, Path]) -> RunConfig:
    """Point the run at CIFAR-10 binary batches under ``root``."""
    fields = run.model_dump()
    fields["data"].update(kind="cifar10_binary", root=str(root))
    return RunConfig.model_validate(fields)


def train(
    run: RunConfig,
    out_dir: Union[str, Path],
    data_root: Optional[Union[str, Path]] = None,
    deterministic: bool = False,
) -> TrainResult:
    """
    Train ``run.model`` and write into ``out_dir``:

    * ``metrics.csv``, one row per epoch, ``lr`` being the rate at the start
      of the epoch
    * ``last.ckpt`` after every epoch and ``best.ckpt`` at the best val top-1
    * ``config.yaml`` with the run configuration

    ``deterministic`` pins the BLAS pools to one thread, turns off prefetch
    and writes ``0.0`` seconds, so two runs produce identical files.
    """
    if data_root is not None:
        run = with_data_root(run, data_root)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(dump_run_config(run))

    config = run.train
    train_set, val_set = load_dataset(run.data)
    mean, std = normalization_for(run.data)
    model = build_model(run.model)
    optimizer = AdamW(model.named_parameters(), config)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    logger.info(
        f"training on {len(train_set)} samples, validating on {len(val_set)}, "
        f"{config.epochs} epochs of {steps_per_epoch} steps"
    )

    metrics_path = out_dir / "metrics.csv"
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    with metrics_path.open("w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerow(METRICS_HEADER)

    metrics: List[MetricsRecord] = []
    best_top1 = -1.0
    limits = threadpool_limits(limits=1) if deterministic else nullcontext()
    with limits:
        for epoch in range(config.epochs):
            start = time.perf_counter()
            model.train()
            stream = batches(
                train_set, config.batch_size, config.seed, run.data.augmentation, epoch, mean, std
            )
            if not deterministic:
                stream = prefetch(stream)

            losses = []
            for step, (images, labels) in enumerate(stream):
                lr = lr_at(epoch + step / steps_per_epoch, config)
                optimizer.zero_grad()
                with Tape() as tape:
                    loss = cross_entropy(model(images), labels, config.label_smoothing)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(
                        f"loss is {value} at epoch {epoch + 1}, step {step + 1} (lr {lr:.3g})"
                    )
                tape.backward(loss)
                optimizer.step(lr)
                losses.append(value)
                if (step + 1) % config.log_every == 0:
                    logger.debug(f"epoch {epoch + 1} step {step + 1}: loss {value:.4f} lr {lr:.3g}")

            record = MetricsRecord(
                epoch=epoch + 1,
                train_loss=float(np.mean(losses)),
                val_top1=evaluate(model, val_set, EVAL_BATCH_SIZE, mean, std),
                lr=lr_at(epoch, config),
                seconds=0.0 if deterministic else time.perf_counter() - start,
            )
            metrics.append(record)
            with metrics_path.open("a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(record.row())

            save_checkpoint(model, last_path, (mean, std))
            if record.val_top1 > best_top1:
                best_top1 = record.val_top1
                save_checkpoint(model, best_path, (mean, std))
            logger.info(
                f"epoch {record.epoch}/{config.epochs}: loss {record.train_loss:.4f} "
                f"val top-1 {record.val_top1:.4f} lr {record.lr:.3g} {record.seconds:.1f}s"
            )

    return TrainResult(model, metrics, metrics_path, best_path, last_path)
