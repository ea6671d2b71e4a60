from enum import Enum

import typer

from dwvit.gradcheck import TOLERANCE, run_gradcheck
from dwvit.templates import render


class Scope(str, Enum):
    ops = "ops"
    model = "model"
    all = "all"


def gradcheck(
    scope: Scope = typer.Option(
        Scope.all,
        "--scope",
        "-s",
        help="primitive ops, the tiny full model, or both",
    ),
):
    """Compare every backward rule with central finite differences"""
    results = run_gradcheck(scope.value)
    typer.echo(render("gradcheck.txt", results=results, tolerance=TOLERANCE), nl=False)
    if not all(result.passed for result in results):
        raise typer.Exit(1)
