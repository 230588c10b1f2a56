"""
The five model variants.

HM3, HM3R, ESM2 and ESMM share one feature embedding module across their
heads and are trained on the entire impression space through the variant's
composition. BASE is two independent networks: a CTR net on impressions and
a CVR net on clicked impressions only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy.special import logit as log_odds

from behavior_graph import CompositeTargets, GraphVariant, HeadProbabilities, backprop_targets, compose
from config import ExperimentConfig, LossWeights
from errors import DomainError, ShapeMismatchError
from ingest import ImpressionLog
from ml.checkpoint import load_tensors, save_tensors
from ml.embeddings import FeatureEmbedding, SparseGrad
from ml.losses import cross_entropy
from ml.mlp import HeadCache, MlpHead

logger = logging.getLogger("[LAB]")

CHECKPOINT_FORMAT = "cvrlab-model"

# task -> label column of TaskTargets
TASK_LABELS = {"ctr": "click", "dmi": "dmi", "dma": "dma", "ctcvr": "purchase", "cvr": "purchase"}

# Which prior rate seeds each head's output bias.
PRIOR_RATES: Dict[GraphVariant, Dict[str, str]] = {
    GraphVariant.HM3: {"y1": "click", "y2": "dmi", "y3": "dma", "y5": "dma", "y4": "purchase", "y6": "purchase"},
    GraphVariant.HM3R: {"y1": "click", "y2": "dma", "y3": "dmi", "y5": "dmi", "y4": "purchase", "y6": "purchase"},
    GraphVariant.ESM2: {"y1": "click", "y3": "dma", "y4": "purchase", "y6": "purchase"},
    GraphVariant.ESMM: {"y1": "click", "y4": "purchase"},
    GraphVariant.BASE: {"y1": "click", "y4": "purchase"},
}


class ModelSpec(BaseModel):
    variant: GraphVariant
    vocab_sizes: List[int]
    embedding_dims: List[int] = Field(default_factory=lambda: [16, 16, 16])
    head_widths: List[int] = Field(default_factory=lambda: [128, 64, 32])
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    seed: int = 0
    dtype: Literal["float32", "float64"] = "float32"

    @field_validator("vocab_sizes", "embedding_dims")
    @classmethod
    def _three_positive(cls, values: List[int]) -> List[int]:
        if len(values) != 3 or any(v < 1 for v in values):
            raise ValueError("need three positive sizes (user, item, category)")
        return values

    @field_validator("head_widths")
    @classmethod
    def _positive_widths(cls, widths: List[int]) -> List[int]:
        if any(w < 1 for w in widths):
            raise ValueError("head widths must be positive")
        return widths

    @classmethod
    def from_config(cls, config: ExperimentConfig, variant: GraphVariant, seed: int) -> "ModelSpec":
        training = config.training
        return cls(
            variant=variant,
            vocab_sizes=config.vocab_sizes,
            embedding_dims=[training.embedding_dim] * 3,
            head_widths=list(training.head_widths),
            loss_weights=training.loss_weights,
            seed=seed,
            dtype=training.dtype,
        )

    def task_weights(self) -> Dict[str, float]:
        """Weights of the tasks this variant trains; other tasks are never evaluated."""
        return {task: getattr(self.loss_weights, task) for task in self.variant.tasks}


@dataclass
class TaskTargets:
    click: np.ndarray
    dmi: np.ndarray
    dma: np.ndarray
    purchase: np.ndarray

    def label(self, task: str) -> np.ndarray:
        if task not in TASK_LABELS:
            raise DomainError(f"unknown task {task}")
        return getattr(self, TASK_LABELS[task])

    def take(self, index) -> "TaskTargets":
        return TaskTargets(self.click[index], self.dmi[index], self.dma[index], self.purchase[index])


@dataclass
class Batch:
    features: np.ndarray   # (n, 3) int64: user, item, category
    targets: TaskTargets

    def __len__(self) -> int:
        return int(self.features.shape[0])

    @classmethod
    def from_log(cls, log: ImpressionLog, dtype=np.float64) -> "Batch":
        return cls(
            features=log.features(),
            targets=TaskTargets(
                click=log.click.astype(dtype),
                dmi=log.dmi.astype(dtype),
                dma=log.dma.astype(dtype),
                purchase=log.purchase.astype(dtype),
            ),
        )

    def take(self, index) -> "Batch":
        return Batch(self.features[index], self.targets.take(index))


@dataclass
class LossBreakdown:
    total: float
    tasks: Dict[str, float]
    weights: Dict[str, float]
    counts: Dict[str, int]


Gradients = Dict[str, Union[np.ndarray, SparseGrad]]


def _weighted_total(tasks: Dict[str, float], weights: Dict[str, float]) -> float:
    total = 0.0
    for task, value in tasks.items():
        total += weights[task] * value
    return total


class _Tower:
    """FEM plus one MLP head per slot, all heads reading the same embedding."""

    def __init__(self, spec: ModelSpec, slots: Sequence[str], rng: np.random.Generator, prefix: str = ""):
        dtype = np.dtype(spec.dtype)
        self.prefix = prefix
        self.fem = FeatureEmbedding(spec.vocab_sizes, spec.embedding_dims, rng, dtype, name=f"{prefix}fem")
        self.heads: Dict[str, MlpHead] = {
            slot: MlpHead(self.fem.output_dim, spec.head_widths, rng, dtype, name=f"{prefix}{slot}")
            for slot in slots
        }

    def forward(self, features: np.ndarray) -> Tuple[Dict[str, np.ndarray], Dict[str, HeadCache]]:
        try:
            embedded = self.fem.forward(features)
        except IndexError as e:
            raise DomainError(str(e)) from e
        probs: Dict[str, np.ndarray] = {}
        caches: Dict[str, HeadCache] = {}
        for slot, head in self.heads.items():
            probs[slot], _, caches[slot] = head.forward(embedded)
        return probs, caches

    def backward(self, features: np.ndarray, probs: Dict[str, np.ndarray], caches: Dict[str, HeadCache],
                 d_probs: Dict[str, np.ndarray]) -> Gradients:
        grads: Gradients = {}
        d_embedded = None
        for slot, head in self.heads.items():
            y = probs[slot]
            upstream = d_probs.get(slot)
            if upstream is None:
                upstream = np.zeros_like(y)
            # logistic derivative
            d_logit = np.asarray(upstream * (y * (1.0 - y)), dtype=y.dtype)
            head_grads, dx = head.backward(caches[slot], d_logit)
            grads.update(head_grads)
            d_embedded = dx if d_embedded is None else d_embedded + dx
        grads.update(self.fem.backward(features, d_embedded))
        return grads

    def parameters(self) -> Dict[str, np.ndarray]:
        params = self.fem.parameters()
        for head in self.heads.values():
            params.update(head.parameters())
        return params


class _Model:
    spec: ModelSpec

    @property
    def variant(self) -> GraphVariant:
        return self.spec.variant

    def parameters(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def loss_and_grads(self, batch: Batch) -> Tuple[LossBreakdown, Gradients]:
        raise NotImplementedError

    def loss(self, batch: Batch) -> LossBreakdown:
        breakdown, _ = self._evaluate(batch, with_grads=False)
        return breakdown

    def _evaluate(self, batch: Batch, with_grads: bool):
        raise NotImplementedError

    def predict(self, features: np.ndarray) -> CompositeTargets:
        raise NotImplementedError

    def load_parameters(self, tensors: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        if missing or extra:
            raise ShapeMismatchError(f"checkpoint tensors differ from model missing={missing} extra={extra}")
        for name, param in params.items():
            if tensors[name].shape != param.shape:
                raise ShapeMismatchError(f"tensor {name} shape {tensors[name].shape} != {param.shape}")
            param[...] = tensors[name]


class MultiTaskModel(_Model):
    """Shared-FEM entire-space model for HM3, HM3R, ESM2 and ESMM."""

    def __init__(self, spec: ModelSpec):
        if spec.variant is GraphVariant.BASE:
            raise DomainError("BASE is built as IndependentModel")
        self.spec = spec
        self.tower = _Tower(spec, spec.variant.head_slots, np.random.default_rng(spec.seed))

    def forward(self, features: np.ndarray) -> Tuple[HeadProbabilities, Dict[str, HeadCache]]:
        probs, caches = self.tower.forward(features)
        return HeadProbabilities(**probs), caches

    def predict(self, features: np.ndarray) -> CompositeTargets:
        heads, _ = self.forward(features)
        return compose(heads, self.variant)

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.tower.parameters()

    def loss_and_grads(self, batch: Batch) -> Tuple[LossBreakdown, Gradients]:
        return self._evaluate(batch, with_grads=True)

    def _evaluate(self, batch: Batch, with_grads: bool):
        n = len(batch)
        if n == 0:
            raise ShapeMismatchError("empty batch")
        probs, caches = self.tower.forward(batch.features)
        heads = HeadProbabilities(**probs)
        composed = compose(heads, self.variant)
        weights = self.spec.task_weights()

        tasks: Dict[str, float] = {}
        upstream: Dict[str, np.ndarray] = {}
        for task, weight in weights.items():
            loss, d_p = cross_entropy(composed.get(f"p_{task}"), batch.targets.label(task))
            tasks[task] = float(np.mean(loss))
            upstream[f"p_{task}"] = weight * d_p / n

        breakdown = LossBreakdown(
            total=_weighted_total(tasks, weights),
            tasks=tasks,
            weights=dict(weights),
            counts={task: n for task in tasks},
        )
        if not with_grads:
            return breakdown, None
        d_heads = backprop_targets(heads, self.variant, upstream)
        return breakdown, self.tower.backward(batch.features, probs, caches, d_heads)

    def initialize_output_bias(self, rates: Dict[str, float]) -> None:
        """Start each head at the log-odds of its prior rate."""
        for slot, rate_name in PRIOR_RATES[self.variant].items():
            self.tower.heads[slot].set_output_bias(float(log_odds(rates[rate_name])))


class IndependentModel(_Model):
    """BASE: a CTR network and a CVR network with no shared parameters."""

    def __init__(self, spec: ModelSpec):
        if spec.variant is not GraphVariant.BASE:
            raise DomainError(f"IndependentModel only builds BASE, got {spec.variant.value}")
        self.spec = spec
        self.ctr = _Tower(spec, ("y1",), np.random.default_rng([spec.seed, 0]), prefix="ctr.")
        self.cvr = _Tower(spec, ("y4",), np.random.default_rng([spec.seed, 1]), prefix="cvr.")

    def forward(self, features: np.ndarray) -> Tuple[HeadProbabilities, Dict[str, HeadCache]]:
        ctr_probs, ctr_caches = self.ctr.forward(features)
        cvr_probs, cvr_caches = self.cvr.forward(features)
        return HeadProbabilities(y1=ctr_probs["y1"], y4=cvr_probs["y4"]), {**ctr_caches, **cvr_caches}

    def predict(self, features: np.ndarray) -> CompositeTargets:
        heads, _ = self.forward(features)
        return compose(heads, GraphVariant.BASE)

    def parameters(self) -> Dict[str, np.ndarray]:
        return {**self.ctr.parameters(), **self.cvr.parameters()}

    def loss_and_grads(self, batch: Batch) -> Tuple[LossBreakdown, Gradients]:
        return self._evaluate(batch, with_grads=True)

    def _evaluate(self, batch: Batch, with_grads: bool):
        n = len(batch)
        if n == 0:
            raise ShapeMismatchError("empty batch")
        weights = self.spec.task_weights()
        grads: Gradients = {}

        ctr_probs, ctr_caches = self.ctr.forward(batch.features)
        loss, d_p = cross_entropy(ctr_probs["y1"], batch.targets.click)
        tasks = {"ctr": float(np.mean(loss))}
        if with_grads:
            grads.update(self.ctr.backward(batch.features, ctr_probs, ctr_caches,
                                           {"y1": weights["ctr"] * d_p / n}))

        clicked = np.flatnonzero(batch.targets.click > 0)
        if clicked.size:
            features = batch.features[clicked]
            cvr_probs, cvr_caches = self.cvr.forward(features)
            loss, d_p = cross_entropy(cvr_probs["y4"], batch.targets.purchase[clicked])
            tasks["cvr"] = float(np.mean(loss))
            if with_grads:
                grads.update(self.cvr.backward(features, cvr_probs, cvr_caches,
                                               {"y4": weights["cvr"] * d_p / clicked.size}))
        else:
            tasks["cvr"] = 0.0
            if with_grads:
                grads.update(_zero_grads(self.cvr.parameters()))

        breakdown = LossBreakdown(
            total=_weighted_total(tasks, weights),
            tasks=tasks,
            weights=dict(weights),
            counts={"ctr": n, "cvr": int(clicked.size)},
        )
        return breakdown, (grads if with_grads else None)

    def initialize_output_bias(self, rates: Dict[str, float]) -> None:
        self.ctr.heads["y1"].set_output_bias(float(log_odds(rates["click"])))
        self.cvr.heads["y4"].set_output_bias(float(log_odds(rates["purchase"])))


def _zero_grads(params: Dict[str, np.ndarray]) -> Gradients:
    grads: Gradients = {}
    for name, value in params.items():
        if name.split(".")[-1] in ("user", "item", "category"):
            grads[name] = SparseGrad(rows=np.empty(0, dtype=np.int64), values=np.zeros((0, value.shape[1]), value.dtype))
        else:
            grads[name] = np.zeros_like(value)
    return grads


Model = Union[MultiTaskModel, IndependentModel]


def build(spec: ModelSpec) -> Model:
    model: Model = IndependentModel(spec) if spec.variant is GraphVariant.BASE else MultiTaskModel(spec)
    logger.info(
        f"model_built variant={spec.variant.value} heads={len(spec.variant.head_slots)} "
        f"parameters={model.parameter_count()} seed={spec.seed} dtype={spec.dtype}"
    )
    return model


def save_model(model: Model, path: Path, step: int = 0, extra: Optional[Dict[str, object]] = None) -> Dict[str, str]:
    header = {
        "format": CHECKPOINT_FORMAT,
        "variant": model.variant.value,
        "spec": model.spec.model_dump(mode="json"),
        "seed": model.spec.seed,
        "step": int(step),
    }
    if extra:
        header.update(extra)
    return save_tensors(path, header, model.parameters())


def load_model(path: Path, dtype: Optional[str] = None) -> Tuple[Model, Dict[str, object]]:
    """Rebuild a model from a checkpoint. Returns (model, header)."""
    header, tensors = load_tensors(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ShapeMismatchError(f"{path} is not a model checkpoint")
    spec_data = dict(header["spec"])
    if dtype is not None:
        spec_data["dtype"] = dtype
    spec = ModelSpec.model_validate(spec_data)
    model = IndependentModel(spec) if spec.variant is GraphVariant.BASE else MultiTaskModel(spec)
    model.load_parameters(tensors)
    return model, header
