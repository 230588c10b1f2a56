"""Fully connected prediction head: ReLU hidden layers, logistic scalar output."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import expit

from errors import DivergenceError, ShapeMismatchError


@dataclass
class HeadCache:
    inputs: List[np.ndarray]       # input to each layer
    pre_activations: List[np.ndarray]


class MlpHead:
    def __init__(self, input_dim: int, hidden_widths: Sequence[int], rng: np.random.Generator,
                 dtype=np.float32, name: str = "head"):
        self.name = name
        self.widths = [int(input_dim), *(int(w) for w in hidden_widths), 1]
        if any(w < 1 for w in self.widths):
            raise ValueError(f"invalid head widths {self.widths}")
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        last = len(self.widths) - 2
        for layer, (w_in, w_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if layer < last:
                bound = np.sqrt(6.0 / w_in)               # He-uniform for ReLU
            else:
                bound = np.sqrt(6.0 / (w_in + w_out))     # Glorot for the logistic output
            self.weights.append(rng.uniform(-bound, bound, size=(w_in, w_out)).astype(dtype))
            self.biases.append(np.zeros(w_out, dtype=dtype))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    def parameter_count(self) -> int:
        return sum((w_in + 1) * w_out for w_in, w_out in zip(self.widths[:-1], self.widths[1:]))

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, HeadCache]:
        """Returns (probability, logit, cache); probability and logit are (n,)."""
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatchError(f"{self.name} expects (n, {self.input_dim}) input, got {x.shape}")
        cache = HeadCache(inputs=[], pre_activations=[])
        h = x
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.inputs.append(h)
            z = h @ w + b
            cache.pre_activations.append(z)
            h = np.maximum(z, 0) if layer < len(self.weights) - 1 else z
        logit = h[:, 0]
        if not np.all(np.isfinite(logit)):
            raise DivergenceError(f"non-finite activation in {self.name}")
        return expit(logit), logit, cache

    def backward(self, cache: HeadCache, d_logit: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        """Gradients for every weight and bias, plus dL/dx for the head input."""
        if len(cache.inputs) != len(self.weights):
            raise ShapeMismatchError(f"cache for {len(cache.inputs)} layers, head has {len(self.weights)}")
        n = cache.inputs[0].shape[0]
        if d_logit.shape != (n,):
            raise ShapeMismatchError(f"{self.name} upstream shape {d_logit.shape} does not match ({n},)")
        grads: Dict[str, np.ndarray] = {}
        delta = d_logit.reshape(-1, 1).astype(self.weights[-1].dtype, copy=False)
        for layer in range(len(self.weights) - 1, -1, -1):
            grads[f"{self.name}.w{layer}"] = cache.inputs[layer].T @ delta
            grads[f"{self.name}.b{layer}"] = delta.sum(axis=0)
            delta = delta @ self.weights[layer].T
            if layer > 0:
                delta = delta * (cache.pre_activations[layer - 1] > 0)
        return grads, delta

    def parameters(self) -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{self.name}.w{layer}"] = w
            params[f"{self.name}.b{layer}"] = b
        return params

    def set_output_bias(self, value: float) -> None:
        self.biases[-1][...] = value
