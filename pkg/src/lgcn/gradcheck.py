"""Finite-difference verification of the hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    """Outcome of checking one scalar function's analytic gradients."""

    op_name: str
    max_rel_error: float
    per_param_errors: dict = field(default_factory=dict)
    passed: bool = False
    tol: float = 0.0
    detail: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.op_name:<36s} max_rel_err={self.max_rel_error:.3e} (tol {self.tol:g})"


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(fn, params: dict, eps: float = 1e-4, tol: float = 1e-4,
               name: str = "fn", max_coords_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare fn's analytic gradients with central differences.

    fn maps a dict of named float64 arrays to (scalar_loss, grads_dict).
    Every coordinate is checked unless max_coords_per_param caps the count,
    in which case a seeded subset is sampled per parameter. Non-finite
    values are reported as failures rather than raised.
    """
    rng = rng or np.random.default_rng(0)
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    try:
        loss, grads = fn(work)
    except FloatingPointError as exc:
        return GradCheckReport(name, float("inf"), {}, False, tol, f"forward raised: {exc}")
    if not np.isfinite(loss):
        return GradCheckReport(name, float("inf"), {}, False, tol, "non-finite loss")

    per_param: dict = {}
    max_err = 0.0
    detail = ""
    for pname, value in work.items():
        grad = grads.get(pname)
        if grad is None:
            per_param[pname] = float("inf")
            max_err = float("inf")
            detail = f"missing gradient for {pname!r}"
            continue
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != value.shape:
            per_param[pname] = float("inf")
            max_err = float("inf")
            detail = f"gradient shape {grad.shape} != param shape {value.shape} for {pname!r}"
            continue
        if not np.all(np.isfinite(grad)):
            per_param[pname] = float("inf")
            max_err = float("inf")
            detail = f"non-finite gradient for {pname!r}"
            continue
        n_coords = value.size
        if max_coords_per_param is not None and n_coords > max_coords_per_param:
            coords = rng.choice(n_coords, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n_coords)
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            plus, _ = fn(work)
            flat[c] = orig - eps
            minus, _ = fn(work)
            flat[c] = orig
            numeric = (plus - minus) / (2.0 * eps)
            if not np.isfinite(numeric):
                worst = float("inf")
                detail = f"non-finite numeric gradient for {pname!r}[{c}]"
                break
            worst = max(worst, _rel_error(gflat[c], numeric))
        per_param[pname] = worst
        max_err = max(max_err, worst)

    return GradCheckReport(name, max_err, per_param, bool(max_err <= tol), tol, detail)


def weighted_sum_loss(output: np.ndarray, weights: np.ndarray):
    """Scalar probe loss sum(w * y) and its output gradient (= w)."""
    return float((weights * output).sum()), weights


def probe_weights(shape, seed=123) -> np.ndarray:
    """Fixed pseudo-random loss weights; not all-ones so sign errors surface."""
    return np.random.default_rng(seed).normal(size=shape)
