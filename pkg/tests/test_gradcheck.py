"""Tests of the finite-difference checking facility itself."""

import numpy as np

from lgcn import ops
from lgcn.checksuite import run_suite
from lgcn.gradcheck import grad_check


def quadratic(p):
    x = p["x"]
    return float((x ** 2).sum()), {"x": 2 * x}


def test_quadratic_passes_tightly():
    x = np.random.default_rng(0).normal(size=(3, 4)) * 0.5
    rep = grad_check(quadratic, {"x": x}, eps=1e-5, tol=1e-4, name="quadratic")
    assert rep.passed
    assert rep.max_rel_error < 1e-10


def test_wrong_gradient_fails(rng):
    def doubled(p):
        loss, grads = quadratic(p)
        return loss, {"x": 2 * grads["x"]}

    rep = grad_check(doubled, {"x": rng.normal(size=(2, 2))}, eps=1e-5, tol=1e-4)
    assert not rep.passed


def test_nonfinite_gradient_reported_not_raised(rng):
    def nan_grad(p):
        return float(p["x"].sum()), {"x": np.full_like(p["x"], np.nan)}

    rep = grad_check(nan_grad, {"x": rng.normal(size=3)}, eps=1e-5, tol=1e-4)
    assert not rep.passed
    assert rep.max_rel_error == float("inf")
    assert "non-finite" in rep.detail


def test_missing_gradient_fails(rng):
    def forgetful(p):
        return float(p["x"].sum() + p["y"].sum()), {"x": np.ones_like(p["x"])}

    rep = grad_check(forgetful, {"x": rng.normal(size=2), "y": rng.normal(size=2)},
                     eps=1e-5, tol=1e-4)
    assert not rep.passed
    assert "missing" in rep.detail


def test_per_parameter_errors_recorded(rng):
    rep = grad_check(quadratic, {"x": rng.normal(size=5)}, eps=1e-5, tol=1e-4)
    assert set(rep.per_param_errors) == {"x"}
    assert rep.passed == (rep.max_rel_error <= rep.tol)


def test_coordinate_sampling_deterministic(rng):
    x = rng.normal(size=100)
    reps = [grad_check(quadratic, {"x": x}, eps=1e-5, tol=1e-4, max_coords_per_param=7,
                       rng=np.random.default_rng(3)) for _ in range(2)]
    assert reps[0].max_rel_error == reps[1].max_rel_error


def test_suite_scope_filter():
    names = [r.op_name for r in run_suite("dfm")]
    assert names and all(n.startswith("dfm.") for n in names)


def test_suite_negative_control():
    ops.INJECT_GRADIENT_BUG = True
    try:
        reports = run_suite("cnn")
    finally:
        ops.INJECT_GRADIENT_BUG = False
    assert any(not r.passed for r in reports)
