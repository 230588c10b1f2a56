"""
Central finite-difference check of analytic gradients.

Works on anything exposing `parameters()` (name -> mutable array) and
`loss_and_grads(batch)` / `loss(batch)`, which covers every model variant.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Tuple

import numpy as np

from ml.embeddings import SparseGrad

logger = logging.getLogger("[LAB]")


@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    worst_relative_error: float
    worst_parameter: Optional[str]
    worst_index: Optional[Tuple[int, ...]]
    analytic: float
    numeric: float
    checked: int

    def summary(self) -> str:
        status = "pass" if self.passed else "fail"
        return (
            f"{status} worst_rel_err={self.worst_relative_error:.3e} tolerance={self.tolerance:.0e} "
            f"parameter={self.worst_parameter} index={self.worst_index} "
            f"analytic={self.analytic:.6e} numeric={self.numeric:.6e} checked={self.checked}"
        )


def relative_error(analytic, numeric, floor: float = 1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _candidates(param: np.ndarray, grad) -> np.ndarray:
    """Flat indices to perturb; embedding tables only contribute touched rows."""
    if isinstance(grad, SparseGrad):
        cols = param.shape[1]
        return (grad.rows[:, None] * cols + np.arange(cols)[None, :]).ravel()
    return np.arange(param.size)


def grad_check(
    model,
    batch,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    analytic: Optional[Mapping[str, object]] = None,
    max_coordinates: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare analytic gradients against (L(w+h) - L(w-h)) / 2h coordinate by
    coordinate. `analytic` overrides the model's own gradients (used to
    inject faults). `max_coordinates` samples that many coordinates per
    parameter instead of sweeping all of them.
    """
    params = model.parameters()
    for name, value in params.items():
        if value.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 parameters, {name} is {value.dtype}")
    if analytic is None:
        _, analytic = model.loss_and_grads(batch)

    rng = np.random.default_rng(seed)
    worst = (-1.0, None, None, 0.0, 0.0)
    checked = 0
    for name, param in params.items():
        grad = analytic.get(name)
        if grad is None:
            continue
        dense = grad.dense(param.shape) if isinstance(grad, SparseGrad) else np.asarray(grad, dtype=np.float64)
        indices = _candidates(param, grad)
        if max_coordinates is not None and indices.size > max_coordinates:
            indices = np.sort(rng.choice(indices, size=max_coordinates, replace=False))

        flat = param.reshape(-1)
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + step
            plus = model.loss(batch).total
            flat[idx] = original - step
            minus = model.loss(batch).total
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            a = float(dense.reshape(-1)[idx])
            err = float(relative_error(a, numeric))
            checked += 1
            if err > worst[0]:
                worst = (err, name, tuple(int(i) for i in np.unravel_index(idx, param.shape)), a, numeric)

    err, name, index, a, numeric = worst
    report = GradCheckReport(
        passed=bool(err <= tolerance),
        tolerance=tolerance,
        worst_relative_error=max(err, 0.0),
        worst_parameter=name,
        worst_index=index,
        analytic=a,
        numeric=numeric,
        checked=checked,
    )
    logger.info(f"grad_check {report.summary()}")
    return report
