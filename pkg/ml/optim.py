"""
Adam with lazy row updates for embedding tables.

Dense parameters get the textbook bias-corrected update. A SparseGrad only
touches its rows: parameters and both moments of other rows keep their
exact bits. Bias correction uses the global step for every row.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Union

import numpy as np

from errors import DivergenceError, ShapeMismatchError
from ml.embeddings import SparseGrad

Gradient = Union[np.ndarray, SparseGrad]


@dataclass
class AdamState:
    learning_rate: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_parameters(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        state = cls(**hyper)
        for name, value in params.items():
            state.first_moment[name] = np.zeros_like(value)
            state.second_moment[name] = np.zeros_like(value)
        return state


def _check(name: str, param: np.ndarray, grad: Gradient) -> None:
    values = grad.values if isinstance(grad, SparseGrad) else grad
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0].tolist()
        raise DivergenceError(f"non-finite gradient parameter={name} index={bad}")
    if isinstance(grad, SparseGrad):
        if grad.values.shape[1:] != param.shape[1:]:
            raise ShapeMismatchError(f"sparse gradient for {name} has row shape {grad.values.shape[1:]}")
        if grad.rows.size and (grad.rows.min() < 0 or grad.rows.max() >= param.shape[0]):
            raise ShapeMismatchError(f"sparse gradient for {name} addresses rows outside the table")
    elif grad.shape != param.shape:
        raise ShapeMismatchError(f"gradient for {name} has shape {grad.shape}, parameter has {param.shape}")


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, Gradient], state: AdamState) -> AdamState:
    """Update params in place and return the advanced state."""
    for name, grad in grads.items():
        if name not in params:
            raise ShapeMismatchError(f"gradient for unknown parameter {name}")
        _check(name, params[name], grad)

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for name, grad in grads.items():
        param = params[name]
        m = state.first_moment.setdefault(name, np.zeros_like(param))
        v = state.second_moment.setdefault(name, np.zeros_like(param))
        if isinstance(grad, SparseGrad):
            rows, g = grad.rows, grad.values
            m[rows] = b1 * m[rows] + (1.0 - b1) * g
            v[rows] = b2 * v[rows] + (1.0 - b2) * g * g
            m_hat = m[rows] / correction1
            v_hat = v[rows] / correction2
            param[rows] -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype)
        else:
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            m_hat = m / correction1
            v_hat = v / correction2
            param -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype)
    return state
