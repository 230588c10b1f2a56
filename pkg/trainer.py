"""
Minibatch training loop.

Batches are drawn from a per-epoch permutation keyed by (seed, epoch), and in
deterministic mode BLAS runs single-threaded, so (data, config, seed) fixes
the whole trajectory. adam_step validates gradients before touching any
parameter, so when a step diverges the in-memory weights are still the last
good ones and are what gets checkpointed.
"""
from __future__ import annotations

import json
import logging
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from config import ExperimentConfig, TrainingSettings, config_hash
from errors import DivergenceError
from ingest import ImpressionLog
from ml.checkpoint import checkpoint_digest
from ml.optim import AdamState, adam_step
from models import Batch, Model, ModelSpec, build, save_model

logger = logging.getLogger("[LAB]")
train_logger = logging.getLogger("[LAB][TRAIN]")

PROBE_SIZE = 8192

CHECKPOINT_FILE = "checkpoint.bin"
CURVE_FILE = "curve.csv"
SUMMARY_FILE = "train.json"


@dataclass
class TrainResult:
    variant: str
    seed: int
    epochs: int
    steps: int
    initial_loss: float
    final_loss: float
    checkpoint: str
    checkpoint_sha256: str
    config_hash: str
    wall_clock_seconds: float


def _valid_priors(rates: Optional[Dict[str, Optional[float]]]) -> bool:
    return bool(rates) and all(r is not None and 0.0 < r < 1.0 for r in rates.values())


def fit(model: Model, data: Batch, settings: TrainingSettings, seed: int,
        checkpoint_path: Optional[Path] = None) -> pd.DataFrame:
    """Train in place; returns the per-step loss curve."""
    state = AdamState.for_parameters(
        model.parameters(),
        learning_rate=settings.learning_rate,
        beta1=settings.beta1,
        beta2=settings.beta2,
        epsilon=settings.epsilon,
    )
    n = len(data)
    rows: List[Dict[str, float]] = []
    limiter = threadpool_limits(limits=1) if settings.deterministic else nullcontext()
    with limiter:
        for epoch in range(settings.epochs):
            order = np.random.default_rng([seed, epoch]).permutation(n)
            for start in range(0, n, settings.batch_size):
                batch = data.take(order[start:start + settings.batch_size])
                try:
                    breakdown, grads = model.loss_and_grads(batch)
                    if not np.isfinite(breakdown.total):
                        raise DivergenceError(f"non-finite loss at step {state.step + 1}")
                    adam_step(model.parameters(), grads, state)
                except DivergenceError as e:
                    train_logger.error(f"training_diverged step={state.step} epoch={epoch} error={type(e).__name__}")
                    if checkpoint_path is not None:
                        save_model(model, checkpoint_path, step=state.step, extra={"diverged": True})
                    raise

                rows.append({"epoch": epoch, "step": state.step, "total": breakdown.total, **breakdown.tasks})
                if state.step % settings.log_every == 0:
                    tasks = " ".join(f"{k}={v:.5f}" for k, v in breakdown.tasks.items())
                    train_logger.info(f"train_step step={state.step} epoch={epoch} total={breakdown.total:.5f} {tasks}")
    return pd.DataFrame(rows)


def train_run(config: ExperimentConfig, spec: ModelSpec, train_log: ImpressionLog, run_dir: Path,
              prior_rates: Optional[Dict[str, Optional[float]]] = None) -> TrainResult:
    """Build, train and persist one (variant, seed) run under run_dir."""
    started = time.perf_counter()
    settings = config.training
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = run_dir / CHECKPOINT_FILE

    model = build(spec)
    if settings.prior_bias_init and _valid_priors(prior_rates):
        model.initialize_output_bias(prior_rates)

    data = Batch.from_log(train_log, dtype=np.dtype(spec.dtype))
    probe = data.take(slice(0, min(len(data), PROBE_SIZE)))
    initial = model.loss(probe).total

    curve = fit(model, data, settings, spec.seed, checkpoint_path=checkpoint_path)
    final = model.loss(probe).total
    steps = int(curve["step"].iloc[-1]) if len(curve) else 0

    save_model(model, checkpoint_path, step=steps)
    curve.to_csv(run_dir / CURVE_FILE, index=False, lineterminator="\n")

    result = TrainResult(
        variant=spec.variant.value,
        seed=spec.seed,
        epochs=settings.epochs,
        steps=steps,
        initial_loss=float(initial),
        final_loss=float(final),
        checkpoint=str(checkpoint_path),
        checkpoint_sha256=checkpoint_digest(checkpoint_path),
        config_hash=config_hash(config),
        wall_clock_seconds=round(time.perf_counter() - started, 3),
    )
    with open(run_dir / SUMMARY_FILE, "w", encoding="utf-8") as f:
        json.dump(asdict(result), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(
        f"train_done variant={result.variant} seed={result.seed} steps={steps} "
        f"initial_loss={initial:.5f} final_loss={final:.5f}"
    )
    return result
