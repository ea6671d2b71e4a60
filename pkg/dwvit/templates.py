from pathlib import Path

from jinja2 import Environment, FileSystemLoader

# packaged templates first, user overrides in ~/.config/dwvit/templates
template_dirs = [
    Path(__file__).resolve().parents[0] / "templates",
    Path.home() / ".config" / "dwvit" / "templates",
]


def millions(value: int, digits: int = 1) -> str:
    return f"{value / 1e6:.{digits}f}M"


def giga(value: int, digits: int = 2) -> str:
    return f"{value / 1e9:.{digits}f}G"


def grouped(value: int) -> str:
    return f"{value:,}"


env = Environment(
    loader=FileSystemLoader([str(path) for path in template_dirs]),
    keep_trailing_newline=True,
)
env.filters["millions"] = millions
env.filters["giga"] = giga
env.filters["grouped"] = grouped


def render(template_name: str, **context) -> str:
    return env.get_template(template_name).render(**context)
