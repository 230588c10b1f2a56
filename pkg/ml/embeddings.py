"""
Embedding tables and the shared feature embedding module (FEM).

Gradients for a table are sparse: only rows looked up in the batch carry a
value, which is what lets the optimizer leave untouched rows bit-unchanged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from errors import ShapeMismatchError

logger = logging.getLogger("[LAB]")

FIELDS = ("user", "item", "category")


@dataclass
class SparseGrad:
    """Row-sparse gradient: unique sorted row ids and their summed values."""

    rows: np.ndarray     # (k,) int64, sorted unique
    values: np.ndarray   # (k, dim)

    def dense(self, shape: Tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=self.values.dtype)
        out[self.rows] = self.values
        return out


class EmbeddingTable:
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        if vocab_size < 1 or dim < 1:
            raise ValueError(f"invalid embedding shape vocab={vocab_size} dim={dim}")
        self.vocab_size = int(vocab_size)
        self.dim = int(dim)
        bound = np.sqrt(6.0 / (vocab_size + dim))
        self.weight = rng.uniform(-bound, bound, size=(vocab_size, dim)).astype(dtype)

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"embedding index out of range [0, {self.vocab_size})")
        return self.weight[ids]

    def backward(self, ids: np.ndarray, upstream: np.ndarray) -> SparseGrad:
        ids = np.asarray(ids, dtype=np.int64)
        if upstream.shape != (ids.shape[0], self.dim):
            raise ShapeMismatchError(
                f"embedding upstream shape {upstream.shape} does not match ({ids.shape[0]}, {self.dim})"
            )
        rows, inverse = np.unique(ids, return_inverse=True)
        values = np.zeros((rows.shape[0], self.dim), dtype=self.weight.dtype)
        np.add.at(values, inverse, upstream)
        return SparseGrad(rows=rows, values=values)


class FeatureEmbedding:
    """One table per categorical field; output is the concatenation."""

    def __init__(self, vocab_sizes: Sequence[int], dims: Sequence[int], rng: np.random.Generator,
                 dtype=np.float32, name: str = "fem"):
        if len(vocab_sizes) != len(FIELDS) or len(dims) != len(FIELDS):
            raise ValueError(f"expected {len(FIELDS)} fields, got vocab={list(vocab_sizes)} dims={list(dims)}")
        self.name = name
        self.tables: Dict[str, EmbeddingTable] = {
            field: EmbeddingTable(v, d, rng, dtype) for field, v, d in zip(FIELDS, vocab_sizes, dims)
        }
        self.output_dim = int(sum(dims))

    def forward(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.int64)
        if features.ndim != 2 or features.shape[1] != len(FIELDS):
            raise ShapeMismatchError(f"features must be (n, {len(FIELDS)}), got {features.shape}")
        return np.concatenate(
            [self.tables[field].lookup(features[:, j]) for j, field in enumerate(FIELDS)], axis=1
        )

    def backward(self, features: np.ndarray, upstream: np.ndarray) -> Dict[str, SparseGrad]:
        features = np.asarray(features, dtype=np.int64)
        grads: Dict[str, SparseGrad] = {}
        start = 0
        for j, field in enumerate(FIELDS):
            table = self.tables[field]
            grads[f"{self.name}.{field}"] = table.backward(features[:, j], upstream[:, start:start + table.dim])
            start += table.dim
        return grads

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{self.name}.{field}": table.weight for field, table in self.tables.items()}

    def parameter_count(self) -> int:
        return sum(t.vocab_size * t.dim for t in self.tables.values())
