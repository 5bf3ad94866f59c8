"""The finite-difference checker must pass correct gradients and flag wrong ones."""

import numpy as np
import pytest

from stlink.gradcheck import grad_check
from stlink.tensor import Tensor, accumulate_grad, active_tape, dtype_scope, tensor_sum


def test_passes_on_correct_composite():
    with dtype_scope(np.float64):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        y = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        report = grad_check(lambda: tensor_sum((x @ y) * (x @ y)), {"x": x, "y": y})
    assert report.passed
    assert set(report.per_param) == {"x", "y"}
    assert report.max_rel_err < 1e-6


def _buggy_double(x: Tensor) -> Tensor:
    out = Tensor(x.data * 2.0)
    tape = active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True
        # deliberately wrong scale: true derivative is 2.0
        tape.record(out, lambda g: accumulate_grad(x, g * 1.8))
    return out


def test_flags_planted_backward_bug():
    with dtype_scope(np.float64):
        x = Tensor([1.5, -0.5], requires_grad=True)
        report = grad_check(lambda: tensor_sum(_buggy_double(x)), {"x": x})
    assert not report.passed
    assert abs(report.max_rel_err - 0.1) < 1e-3


def test_skips_non_trainable_params():
    with dtype_scope(np.float64):
        x = Tensor([1.0], requires_grad=True)
        frozen = Tensor([2.0], requires_grad=False)
        report = grad_check(lambda: tensor_sum(x * frozen), {"x": x, "frozen": frozen})
    assert "frozen" not in report.per_param
    assert report.passed


def test_param_unused_by_loss_still_passes():
    with dtype_scope(np.float64):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([3.0], requires_grad=True)
        report = grad_check(lambda: tensor_sum(x * x), {"x": x, "unused": unused})
    assert report.passed
    assert report.per_param["unused"] < 1e-6


def test_subsampling_bounds_evaluations():
    calls = {"n": 0}

    def f():
        calls["n"] += 1
        return tensor_sum(x * x)

    with dtype_scope(np.float64):
        x = Tensor(np.arange(1, 101, dtype=np.float64), requires_grad=True)
        report = grad_check(f, {"x": x}, max_entries_per_param=5,
                            rng=np.random.default_rng(0))
    assert report.passed
    assert calls["n"] == 1 + 2 * 5


def test_non_finite_base_point_raises():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="non-finite at the base point"):
        grad_check(lambda: Tensor(np.nan), {"x": x})


def test_non_finite_perturbation_raises():
    with dtype_scope(np.float64):
        x = Tensor([0.5e-5], requires_grad=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            with pytest.raises(ValueError, match="non-finite loss while perturbing"):
                grad_check(lambda: Tensor(np.log(x.data).sum()), {"x": x}, h=1e-5)


def test_report_repr_carries_verdict():
    with dtype_scope(np.float64):
        x = Tensor([2.0], requires_grad=True)
        report = grad_check(lambda: tensor_sum(x * x), {"x": x})
    assert "pass" in repr(report)
    assert f"tol={report.tol:g}" in repr(report)
