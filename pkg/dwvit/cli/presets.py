import typer

from dwvit import presets

app = typer.Typer()


@app.command()
def list(
    verbose: bool = typer.Option(
        False,
        "--verbose",
        "-v",
        help="Verbose output",
    ),
):
    """List model presets, bypass variants and schedules"""
    for title, table in (
        ("models", presets.models),
        ("variants", presets.variants),
        ("schedules", presets.schedules),
    ):
        typer.echo(f"Available {title}:")
        for name, fields in table.items():
            typer.echo(f"  {name}")
            if verbose:
                for key, value in fields.items():
                    typer.echo(f"    - {key}: {value}")
