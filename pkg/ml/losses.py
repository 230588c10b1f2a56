from __future__ import annotations

from typing import Tuple

import numpy as np

from errors import DivergenceError

PROB_EPS = 1e-7


def cross_entropy(p, label, eps: float = PROB_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """
    Elementwise binary cross-entropy on a clamped probability.

    Returns (loss, dloss/dp). Inside the clamp the derivative is
    -label/p + (1-label)/(1-p); where the clamp is active it is zero.
    """
    p = np.asarray(p)
    label = np.asarray(label, dtype=p.dtype if p.dtype.kind == "f" else np.float64)
    if not np.all(np.isfinite(p)):
        raise DivergenceError("non-finite probability in cross_entropy")
    clamped = np.clip(p, eps, 1.0 - eps)
    loss = -(label * np.log(clamped) + (1.0 - label) * np.log(1.0 - clamped))
    grad = -label / clamped + (1.0 - label) / (1.0 - clamped)
    grad = np.where((p > eps) & (p < 1.0 - eps), grad, 0.0)
    return loss, grad
