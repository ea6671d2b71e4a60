import csv
import io
import logging
from contextlib import contextmanager
from typing import Iterable, NoReturn, Sequence

import typer
from pydantic import ValidationError

from dwvit.errors import DwvitError

logger = logging.getLogger(__name__)


def fail(message: str) -> NoReturn:
    typer.secho(message, fg=typer.colors.RED, err=True)
    raise typer.Exit(1)


@contextmanager
def reported_errors():
    """Turn dwvit and validation errors into a red message and exit code 1."""
    try:
        yield
    except (DwvitError, ValidationError) as e:
        logger.debug("command failed", exc_info=True)
        fail(f"Error: {e}")


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()
