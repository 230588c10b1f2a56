"""
Synthetic behavior-log generator with known ground truth.

Each (user, item) pair has six hidden path probabilities
    y_j(u, v) = logistic(a_j . phi(u, v) + b_j),  phi = [u, v, u * v]
and an impression walks the behavior graph by Bernoulli draws on them.
Models only ever see the categorical ids; latents stay inside this module.

Randomness is keyed by (seed, stream, block) where a block is a fixed run of
RECORD_BLOCK impression ids, so the log does not depend on generation order
or on the number of workers.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from behavior_graph import CompositeTargets, HeadProbabilities, SLOTS, compose_hm3
from config import GeneratorSettings, RateTargets
from errors import CalibrationError, DomainError
from ingest import ImpressionLog, ImpressionRecord

logger = logging.getLogger("[LAB]")
gen_logger = logging.getLogger("[LAB][GEN]")

RECORD_BLOCK = 4096
MAX_BISECTION_ITER = 60
BIAS_BOUND = 30.0

STREAM_MODEL = 0
STREAM_CALIBRATION = 1
STREAM_IMPRESSIONS = 2


@dataclass
class GenerativeModel:
    n_users: int
    n_items: int
    n_categories: int
    latent_dim: int
    user_latent: np.ndarray      # (n_users, d)
    item_latent: np.ndarray      # (n_items, d)
    item_category: np.ndarray    # (n_items,)
    head_weights: np.ndarray     # (6, 3d)
    head_bias: np.ndarray        # (6,)
    seed: int
    omi_shift: float = -1.5
    oma_shift: float = -3.0

    def _check_ids(self, users: np.ndarray, items: np.ndarray) -> None:
        if np.any(users < 0) or np.any(users >= self.n_users):
            raise DomainError(f"user id out of range [0, {self.n_users})")
        if np.any(items < 0) or np.any(items >= self.n_items):
            raise DomainError(f"item id out of range [0, {self.n_items})")

    def features(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        u = self.user_latent[users]
        v = self.item_latent[items]
        return np.concatenate([u, v, u * v], axis=-1)

    def head_logits(self, users, items, with_bias: bool = True) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self._check_ids(users, items)
        logits = self.features(users, items) @ self.head_weights.T
        if with_bias:
            logits = logits + self.head_bias
        return logits

    def heads(self, users, items) -> HeadProbabilities:
        y = expit(self.head_logits(users, items))
        return HeadProbabilities.from_vector(y)

    def categories(self, items) -> np.ndarray:
        return self.item_category[np.asarray(items, dtype=np.int64)]


def build_generative_model(settings: GeneratorSettings) -> GenerativeModel:
    """Sample latents and head weights; biases start at zero (uncalibrated)."""
    rng = np.random.default_rng([settings.seed, STREAM_MODEL])
    d = settings.latent_dim

    category_latent = rng.standard_normal((settings.n_categories, d))
    item_category = rng.integers(0, settings.n_categories, size=settings.n_items)
    share = settings.category_share
    item_latent = (np.sqrt(share) * category_latent[item_category]
                   + np.sqrt(1.0 - share) * rng.standard_normal((settings.n_items, d)))
    user_latent = rng.standard_normal((settings.n_users, d))

    # heads mix one shared direction with their own; O-Mi and O-Ma reuse
    # the direction of their D-set partner so D-Ma drives purchase
    rho = settings.head_correlation
    shared = rng.standard_normal(3 * d)
    own = rng.standard_normal((6, 3 * d))
    own[4], own[5] = own[2], own[3]
    scales = np.asarray(settings.head_scales, dtype=float)[:, None]
    weights = (np.sqrt(rho) * shared + np.sqrt(1.0 - rho) * own) * scales * (settings.weight_scale / np.sqrt(3 * d))

    model = GenerativeModel(
        n_users=settings.n_users,
        n_items=settings.n_items,
        n_categories=settings.n_categories,
        latent_dim=d,
        user_latent=user_latent,
        item_latent=item_latent,
        item_category=item_category.astype(np.int64),
        head_weights=weights,
        head_bias=np.zeros(6),
        seed=settings.seed,
        omi_shift=settings.omi_shift,
        oma_shift=settings.oma_shift,
    )
    gen_logger.info(
        f"generative_model_built users={model.n_users} items={model.n_items} "
        f"categories={model.n_categories} latent_dim={d} seed={model.seed}"
    )
    return model


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

def expected_rates(targets: CompositeTargets) -> Dict[str, float]:
    """Click rate and post-click conditional rates averaged over pairs."""
    clicks = float(np.mean(targets.p_ctr))
    return {
        "click": clicks,
        "dmi": float(np.mean(targets.p_dmi)) / clicks,
        "dma": float(np.mean(targets.p_dma)) / clicks,
        "purchase": float(np.mean(targets.p_ctcvr)) / clicks,
    }


def _bisect(rate_fn: Callable[[float], float], target: float, head: str, tolerance: float) -> Tuple[float, float, int]:
    lo, hi = -BIAS_BOUND, BIAS_BOUND
    for iteration in range(1, MAX_BISECTION_ITER + 1):
        mid = 0.5 * (lo + hi)
        rate = rate_fn(mid)
        if abs(rate - target) <= tolerance * target:
            return mid, rate, iteration
        if rate < target:
            lo = mid
        else:
            hi = mid
    raise CalibrationError(
        head, f"bisection did not converge in {MAX_BISECTION_ITER} iterations target={target} last_rate={rate}"
    )


def calibrate_biases(
    model: GenerativeModel,
    targets: RateTargets,
    n_pairs: int = 200_000,
    tolerance: float = 0.005,
) -> GenerativeModel:
    """
    Set head biases so Monte-Carlo rates over n_pairs sampled (user, item)
    pairs hit the targets. Heads are solved in dependency order; the O-Mi and
    O-Ma biases follow their D-set counterparts at fixed logit shifts.
    """
    rng = np.random.default_rng([model.seed, STREAM_CALIBRATION])
    users = rng.integers(0, model.n_users, size=n_pairs)
    items = rng.integers(0, model.n_items, size=n_pairs)
    logits = model.head_logits(users, items, with_bias=False)
    bias = np.zeros(6)

    # (leading head, target rate, tied head, tied shift)
    plan = [
        ("y1", "click", None, 0.0),
        ("y2", "dmi", None, 0.0),
        ("y3", "dma", "y5", model.omi_shift),
        ("y4", "purchase", "y6", model.oma_shift),
    ]

    for head, rate_name, tied, shift in plan:
        j = SLOTS.index(head)
        k = SLOTS.index(tied) if tied else None

        def rate_fn(b: float) -> float:
            bias[j] = b
            if k is not None:
                bias[k] = b + shift
            composed = compose_hm3(HeadProbabilities.from_vector(expit(logits + bias)))
            return expected_rates(composed)[rate_name]

        target = getattr(targets, rate_name)
        value, rate, iterations = _bisect(rate_fn, target, head, tolerance)
        bias[j] = value
        if k is not None:
            bias[k] = value + shift
        gen_logger.info(
            f"calibrate_head head={head} bias={value:.5f} rate={rate:.5f} target={target:.5f} iterations={iterations}"
        )

    return replace(model, head_bias=bias.copy())


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _walk_graph(y: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Labels from head probabilities y (n, 6) and uniforms u (n, 4)."""
    click = u[:, 0] < y[:, 0]
    dmi = click & (u[:, 1] < y[:, 1])
    # O-Mi is the full complement of D-Mi given click
    p_macro = np.where(dmi, y[:, 2], y[:, 4])
    dma = click & (u[:, 2] < p_macro)
    p_pay = np.where(dma, y[:, 3], y[:, 5])
    pay = click & (u[:, 3] < p_pay)
    return click, dmi, dma, pay


def sample_impression(model: GenerativeModel, rng: np.random.Generator, impression_id: int = 0) -> ImpressionRecord:
    user = int(rng.integers(0, model.n_users))
    item = int(rng.integers(0, model.n_items))
    u = rng.random((1, 4))
    y = expit(model.head_logits([user], [item]))
    click, dmi, dma, pay = _walk_graph(y, u)
    return ImpressionRecord(
        impression_id=int(impression_id),
        user_id=user,
        item_id=item,
        category_id=int(model.item_category[item]),
        label_click=int(click[0]),
        label_dmi=int(dmi[0]),
        label_dma=int(dma[0]),
        label_purchase=int(pay[0]),
    )


def generate_block(model: GenerativeModel, block_index: int) -> ImpressionLog:
    """All RECORD_BLOCK impressions of one id block."""
    rng = np.random.default_rng([model.seed, STREAM_IMPRESSIONS, int(block_index)])
    users = rng.integers(0, model.n_users, size=RECORD_BLOCK)
    items = rng.integers(0, model.n_items, size=RECORD_BLOCK)
    u = rng.random((RECORD_BLOCK, 4))
    y = expit(model.head_logits(users, items))
    click, dmi, dma, pay = _walk_graph(y, u)
    start = int(block_index) * RECORD_BLOCK
    return ImpressionLog(
        impression_id=np.arange(start, start + RECORD_BLOCK),
        user_id=users,
        item_id=items,
        category_id=model.item_category[items],
        click=click,
        dmi=dmi,
        dma=dma,
        purchase=pay,
    )


def generate_impressions(model: GenerativeModel, start_id: int, count: int, workers: int = 1) -> ImpressionLog:
    """Impressions with ids [start_id, start_id + count), in id order."""
    if count <= 0:
        return ImpressionLog.empty()
    first = start_id // RECORD_BLOCK
    last = (start_id + count - 1) // RECORD_BLOCK
    blocks = range(first, last + 1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts: List[ImpressionLog] = list(pool.map(lambda b: generate_block(model, b), blocks))
    else:
        parts = [generate_block(model, b) for b in blocks]

    log = ImpressionLog.concat(parts)
    offset = start_id - first * RECORD_BLOCK
    log = log.take(slice(offset, offset + count))
    gen_logger.info(
        f"impressions_generated start={start_id} count={count} blocks={len(blocks)} "
        f"workers={workers} clicks={int(log.click.sum())} pays={int(log.purchase.sum())}"
    )
    return log


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

def ground_truth_targets(model: GenerativeModel, user_id, item_id) -> CompositeTargets:
    return compose_hm3(model.heads(user_id, item_id))


class GroundTruthScorer:
    """Scores feature rows with the generator's exact targets (AUC ceiling)."""

    def __init__(self, model: GenerativeModel):
        self.model = model

    def predict(self, features: np.ndarray) -> CompositeTargets:
        features = np.asarray(features, dtype=np.int64)
        return ground_truth_targets(self.model, features[:, 0], features[:, 1])


def save_generative_model(model: GenerativeModel, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(
            f,
            sizes=np.array([model.n_users, model.n_items, model.n_categories, model.latent_dim, model.seed]),
            shifts=np.array([model.omi_shift, model.oma_shift]),
            user_latent=model.user_latent,
            item_latent=model.item_latent,
            item_category=model.item_category,
            head_weights=model.head_weights,
            head_bias=model.head_bias,
        )


def load_generative_model(path: Path) -> GenerativeModel:
    with np.load(Path(path)) as data:
        n_users, n_items, n_categories, latent_dim, seed = (int(v) for v in data["sizes"])
        omi_shift, oma_shift = (float(v) for v in data["shifts"])
        return GenerativeModel(
            n_users=n_users,
            n_items=n_items,
            n_categories=n_categories,
            latent_dim=latent_dim,
            user_latent=data["user_latent"],
            item_latent=data["item_latent"],
            item_category=data["item_category"],
            head_weights=data["head_weights"],
            head_bias=data["head_bias"],
            seed=seed,
            omi_shift=omi_shift,
            oma_shift=oma_shift,
        )


def mean_ground_truth(model: GenerativeModel, users: Optional[np.ndarray] = None,
                      items: Optional[np.ndarray] = None) -> Dict[str, float]:
    """Exhaustive expected rates over the users x items grid (defaults: all)."""
    users = np.arange(model.n_users) if users is None else np.asarray(users)
    items = np.arange(model.n_items) if items is None else np.asarray(items)
    uu, vv = np.meshgrid(users, items, indexing="ij")
    return expected_rates(ground_truth_targets(model, uu.ravel(), vv.ravel()))
