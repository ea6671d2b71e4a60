import logging

import typer
from typer import Typer

from dwvit import __version__
from dwvit.cli.analyze import analyze, analyze_sweep
from dwvit.cli.gradcheck import gradcheck
from dwvit.cli.presets import app as presets_app
from dwvit.cli.train import evaluate_checkpoint, train

logging.basicConfig(level=logging.WARNING)

app = Typer()


@app.callback()
def callback(
    verbose: int = typer.Option(
        0,
        "--verbose",
        "-v",
        count=True,
        help="-v for progress, -vv for per-step detail",
    ),
):
    """Vision Transformers with depth-wise convolution shortcuts"""
    if verbose:
        logging.getLogger().setLevel(logging.INFO if verbose == 1 else logging.DEBUG)


app.add_typer(presets_app, name="presets", no_args_is_help=True)
app.command(name="train")(train)
app.command(name="eval")(evaluate_checkpoint)
app.command(name="analyze")(analyze)
app.command(name="analyze-sweep")(analyze_sweep)
app.command(name="gradcheck")(gradcheck)


@app.command()
def version():
    typer.echo(__version__)


def main():
    app()
