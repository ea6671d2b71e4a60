import logging
from pathlib import Path
from typing import Optional

import typer

from dwvit.checkpoint import read_checkpoint
from dwvit.cli.common import reported_errors
from dwvit.config import DatasetSpec, load_run_config
from dwvit.data import load_split, normalization_for
from dwvit.train import EVAL_BATCH_SIZE, evaluate, train as run_training

logger = logging.getLogger(__name__)


def train(
    config: Path = typer.Option(
        ...,
        "--config",
        "-c",
        help="YAML run file with model, train and data sections",
    ),
    out: Path = typer.Option(
        ...,
        "--out",
        "-o",
        help="directory for metrics.csv, best.ckpt, last.ckpt and config.yaml",
    ),
    data: Optional[Path] = typer.Option(
        None,
        "--data",
        "-d",
        help="directory with the CIFAR-10 binary batches, overrides the data section",
    ),
    deterministic: bool = typer.Option(
        False,
        "--deterministic",
        help="single-thread run with byte-identical outputs",
    ),
):
    """Train a classifier"""
    with reported_errors():
        run = load_run_config(config)
        result = run_training(run, out, data, deterministic)
    last = result.metrics[-1]
    best = max(record.val_top1 for record in result.metrics)
    typer.echo(
        f"trained {last.epoch} epochs: final loss {last.train_loss:.4f}, "
        f"val top-1 {last.val_top1:.4f} (best {best:.4f})"
    )
    typer.echo(f"wrote {result.metrics_path}, {result.best_checkpoint}, {result.last_checkpoint}")


def evaluate_checkpoint(
    checkpoint: Path = typer.Option(..., "--checkpoint", "-k", help="checkpoint file"),
    data: Optional[Path] = typer.Option(
        None,
        "--data",
        "-d",
        help="directory with the CIFAR-10 binary batches",
    ),
    config: Optional[Path] = typer.Option(
        None,
        "--config",
        "-c",
        help="run file whose data section to evaluate on, defaults to config.yaml beside the checkpoint",
    ),
    batch_size: int = typer.Option(EVAL_BATCH_SIZE, "--batch-size", "-b"),
):
    """Top-1 accuracy of a checkpoint on the test split"""
    with reported_errors():
        saved = read_checkpoint(checkpoint)
        if data is not None:
            spec = DatasetSpec(kind="cifar10_binary", root=data, split="test")
        else:
            config = config or checkpoint.parent / "config.yaml"
            logger.info(f"evaluating on the data section of {config}")
            spec = load_run_config(config).data.model_copy(update={"split": "test"})
        dataset = load_split(spec)
        mean, std = saved.normalization or normalization_for(spec)
        top1 = evaluate(saved.model, dataset, batch_size, mean, std)
    typer.echo(f"top-1 {top1:.4f} on {len(dataset)} {spec.kind} test samples")
