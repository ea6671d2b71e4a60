import numpy as np
import pytest

from dwvit.errors import ConfigurationError
from dwvit.gradcheck import (
    ERROR_FLOOR,
    TOLERANCE,
    check_gradients,
    model_case,
    op_cases,
    relative_error,
    run_gradcheck,
)
from dwvit.tensor import Gelu


@pytest.mark.parametrize("case", op_cases(), ids=lambda case: case[0])
def test_op_backward_matches_finite_differences(case):
    name, fn, leaves = case
    result = check_gradients(name, fn, leaves)
    assert result.passed, f"{name}: {result.max_error:.3g}"


@pytest.mark.parametrize("variant", ["kernel3", "kernel3+5", "shortcut", "vanilla"])
def test_model_backward_matches_finite_differences(variant):
    name, fn, leaves = model_case(variant)
    result = check_gradients(name, fn, leaves)
    assert result.passed, f"{name}: {result.max_error:.3g}"


def test_broken_backward_is_caught(monkeypatch):
    monkeypatch.setattr(Gelu, "backward", lambda self, grad: (grad,))
    cases = [case for case in op_cases() if case[0] in ("gelu", "add")]
    results = {r.name: r for r in run_gradcheck(cases=cases)}
    assert not results["gelu"].passed
    assert results["add"].passed


def test_relative_error_floor():
    zeros = np.zeros(3)
    assert relative_error(zeros, zeros) == 0.0
    assert relative_error(zeros, np.full(3, 1e-9)) == pytest.approx(np.sqrt(3) * 1e-9 / ERROR_FLOOR)


def test_relative_error_is_scale_free():
    a = np.array([1.0, 2.0, 3.0])
    assert relative_error(a, a * (1 + 1e-5)) == pytest.approx(relative_error(a * 1e4, a * 1e4 * (1 + 1e-5)))


def test_op_scope_runs_only_ops():
    results = run_gradcheck("ops")
    assert {r.name for r in results} == {name for name, _, _ in op_cases()}
    assert all(r.tolerance == TOLERANCE for r in results)


def test_unknown_scope():
    with pytest.raises(ConfigurationError, match="scope"):
        run_gradcheck("everything")
