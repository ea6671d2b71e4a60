from enum import Enum
from pathlib import Path
from typing import Optional

import typer

from dwvit import presets
from dwvit.cli.common import csv_text, fail, reported_errors
from dwvit.complexity import complexity_report
from dwvit.config import ModelConfig, load_run_config
from dwvit.templates import render


class ReportFormat(str, Enum):
    text = "text"
    csv = "csv"


def _with_overrides(
    config: ModelConfig, num_classes: Optional[int], no_pos_embed: bool
) -> ModelConfig:
    fields = config.model_dump()
    if num_classes is not None:
        fields["num_classes"] = num_classes
    if no_pos_embed:
        fields["use_pos_embed"] = False
    return ModelConfig.model_validate(fields)


def analyze(
    config: Optional[Path] = typer.Option(
        None,
        "--config",
        "-c",
        help="YAML run file whose model section to analyze",
    ),
    preset: Optional[str] = typer.Option(
        None,
        "--preset",
        "-p",
        help="named model preset, see `dwvit presets list`",
    ),
    variant: str = typer.Option(
        "kernel3",
        "--variant",
        help="named bypass variant, used with --preset",
    ),
    num_classes: Optional[int] = typer.Option(None, "--num-classes", "-n"),
    no_pos_embed: bool = typer.Option(False, "--no-pos-embed"),
    paper_convention: bool = typer.Option(
        False,
        "--paper-convention",
        "--exclude-branch-bn",
        help="leave BatchNorm of the shortcut branches out of the parameter count",
    ),
    format: ReportFormat = typer.Option(ReportFormat.text, "--format", "-f"),
):
    """Parameter and FLOP counts of a model"""
    if (config is None) == (preset is None):
        fail("Error: give exactly one of --config or --preset")
    with reported_errors():
        if config is not None:
            model = load_run_config(config).model
            title = str(config)
        else:
            model = presets.model_preset(preset, variant)
            title = f"{preset} / {variant}"
        model = _with_overrides(model, num_classes, no_pos_embed)
        report = complexity_report(model, paper_convention)

    if format == ReportFormat.csv:
        typer.echo(csv_text(["section", "term", "value"], report.rows()), nl=False)
    else:
        typer.echo(render("report.txt", title=title, report=report), nl=False)


def analyze_sweep(
    preset: str = typer.Option("vit-tiny", "--preset", "-p", help="named model preset"),
    num_classes: Optional[int] = typer.Option(None, "--num-classes", "-n"),
    paper_convention: bool = typer.Option(
        False,
        "--paper-convention",
        "--exclude-branch-bn",
        help="leave BatchNorm of the shortcut branches out of the parameter count",
    ),
    format: ReportFormat = typer.Option(ReportFormat.text, "--format", "-f"),
):
    """Complexity of every bypass variant on one backbone"""
    with reported_errors():
        rows = [
            (
                variant,
                complexity_report(
                    _with_overrides(presets.model_preset(preset, variant), num_classes, False),
                    paper_convention,
                ),
            )
            for variant in presets.variants
        ]

    if format == ReportFormat.csv:
        typer.echo(
            csv_text(
                ["variant", "dw_params", "dw_flops", "total_params", "total_flops"],
                [
                    (variant, r.dw_params, r.dw_flops, r.total_params, r.total_flops)
                    for variant, r in rows
                ],
            ),
            nl=False,
        )
    else:
        typer.echo(render("sweep.txt", title=f"{preset} bypass variants", rows=rows), nl=False)
