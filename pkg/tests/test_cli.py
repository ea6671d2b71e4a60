import csv
import io

import pytest
import yaml
from typer.testing import CliRunner

from dwvit import __version__
from dwvit.cli import app
from dwvit.config import dump_run_config

runner = CliRunner()


@pytest.fixture
def run_file(tmp_path, small_run):
    path = tmp_path / "run.yaml"
    path.write_text(dump_run_config(small_run))
    return path


def test_version():
    result = runner.invoke(app, ["version"])
    assert result.exit_code == 0
    assert result.output.strip() == __version__


def test_presets_list():
    result = runner.invoke(app, ["presets", "list"])
    assert result.exit_code == 0
    for line in ("Available models:", "  vit-tiny", "Available variants:", "  kernel3+5", "Available schedules:"):
        assert line in result.output.splitlines()


def test_presets_list_verbose():
    result = runner.invoke(app, ["presets", "list", "--verbose"])
    assert "    - dim: 192" in result.output


def test_analyze_tiny_shortcut():
    result = runner.invoke(app, ["analyze", "--preset", "vit-tiny", "--paper-convention"])
    assert result.exit_code == 0, result.output
    assert "23,040" in result.output
    assert "4,064,256" in result.output
    assert "5,526,346" in result.output


def test_analyze_exclude_branch_bn_is_an_alias():
    args = ["analyze", "--preset", "vit-tiny", "--variant", "kernel3"]
    canonical = runner.invoke(app, [*args, "--paper-convention"])
    alias = runner.invoke(app, [*args, "--exclude-branch-bn"])
    assert alias.exit_code == 0, alias.output
    assert alias.output == canonical.output
    assert "(shortcut BatchNorm excluded)" in alias.output


def test_analyze_counts_branch_bn_by_default():
    result = runner.invoke(app, ["analyze", "--preset", "vit-tiny", "--variant", "kernel3", "-f", "csv"])
    assert result.exit_code == 0, result.output
    rows = list(csv.reader(io.StringIO(result.output)))
    values = {(section, term): int(value) for section, term, value in rows[1:]}
    assert values[("params", "dw")] == 23_040 + 12 * 2 * 192
    assert values[("flops", "dw")] == 4_064_256


def test_analyze_csv():
    result = runner.invoke(app, ["analyze", "-p", "vit-tiny", "--variant", "vanilla", "-f", "csv"])
    assert result.exit_code == 0, result.output
    rows = list(csv.reader(io.StringIO(result.output)))
    assert rows[0] == ["section", "term", "value"]
    values = {(section, term): int(value) for section, term, value in rows[1:]}
    assert values[("params", "dw")] == 0
    assert values[("flops", "backbone")] == 1_253_493_120


def test_analyze_config_file(run_file):
    result = runner.invoke(app, ["analyze", "--config", str(run_file), "--no-pos-embed"])
    assert result.exit_code == 0, result.output
    assert str(run_file) in result.output


@pytest.mark.parametrize("args", [[], ["--preset", "desk", "--config", "run.yaml"]])
def test_analyze_needs_exactly_one_source(args):
    result = runner.invoke(app, ["analyze", *args])
    assert result.exit_code == 1
    assert "exactly one" in result.output


def test_analyze_unknown_preset():
    result = runner.invoke(app, ["analyze", "--preset", "vit-huge"])
    assert result.exit_code == 1
    assert "Unknown model preset" in result.output


def test_analyze_sweep():
    result = runner.invoke(app, ["analyze-sweep", "--paper-convention", "-f", "csv"])
    assert result.exit_code == 0, result.output
    rows = {row[0]: row for row in csv.reader(io.StringIO(result.output))}
    assert rows["kernel3"][1:3] == ["23040", "4064256"]
    assert rows["vanilla"][1:3] == ["0", "0"]
    assert len(rows) == 1 + 11


def test_gradcheck_ops():
    result = runner.invoke(app, ["gradcheck", "--scope", "ops"])
    assert result.exit_code == 0, result.output
    assert "passed (tolerance" in result.output
    assert "FAIL" not in result.output


def test_train_and_eval(tmp_path, run_file):
    out = tmp_path / "out"
    result = runner.invoke(app, ["train", "-c", str(run_file), "-o", str(out), "--deterministic"])
    assert result.exit_code == 0, result.output
    assert "trained 3 epochs" in result.output
    assert (out / "metrics.csv").read_text().startswith("epoch,train_loss,val_top1,lr,seconds\n")

    result = runner.invoke(app, ["eval", "--checkpoint", str(out / "best.ckpt")])
    assert result.exit_code == 0, result.output
    assert "on 48 synthetic test samples" in result.output


def test_train_with_invalid_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"train": {"epochs": 5, "warmup_epochs": 5}}))
    result = runner.invoke(app, ["train", "-c", str(path), "-o", str(tmp_path / "out")])
    assert result.exit_code == 1
    assert "Error" in result.output
    assert not (tmp_path / "out").exists()


def test_eval_missing_checkpoint(tmp_path):
    result = runner.invoke(app, ["eval", "-k", str(tmp_path / "absent.ckpt")])
    assert result.exit_code == 1
    assert "not found" in result.output
