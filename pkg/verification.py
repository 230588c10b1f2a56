"""
Self-checks behind the oracle-check and gradcheck subcommands.

The oracle suite compares the closed-form compositions with path
enumeration, checks the CTCVR factorization bit-for-bit, sweeps the
composition gradients against central differences, and checks that the
variants agree where their graphs coincide. Failing checks carry a head
vector that reproduces the failure.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from behavior_graph import (
    CompositeTargets,
    GraphVariant,
    HeadProbabilities,
    SLOTS,
    compose,
    composition_gradients,
    enumerate_paths_oracle,
)
from config import GeneratorSettings
from ml.gradcheck import GradCheckReport, grad_check, relative_error
from models import Batch, ModelSpec, build
from simulator import build_generative_model, generate_impressions

logger = logging.getLogger("[LAB]")

Composer = Callable[[HeadProbabilities, GraphVariant], CompositeTargets]

ORACLE_TOLERANCE = 1e-12
GRADIENT_STEP = 1e-6
GRADIENT_TOLERANCE = 1e-6
GRADIENT_DRAWS = 1000


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    counterexample: Optional[List[float]] = field(default=None)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name} {self.detail}".rstrip()
        if self.counterexample is not None:
            text += f" h={self.counterexample}"
        return text


def _heads(values: np.ndarray, variant: GraphVariant) -> HeadProbabilities:
    used = set(GraphVariant(variant).head_slots)
    return HeadProbabilities(**{s: values[:, j] for j, s in enumerate(SLOTS) if s in used})


def _row(values: np.ndarray, index: int) -> List[float]:
    return [float(v) for v in values[index]]


def check_oracle_equivalence(variant: GraphVariant, values: np.ndarray, composer: Composer) -> CheckResult:
    h = _heads(values, variant)
    closed, oracle = composer(h, variant), enumerate_paths_oracle(h, variant)
    worst, worst_row, worst_target = 0.0, 0, None
    for target in GraphVariant(variant).targets:
        a, b = closed.get(target), oracle.get(target)
        if a is None:
            return CheckResult(f"oracle/{variant.value}", False, f"target {target} missing from closed form")
        diff = np.abs(np.asarray(a) - np.asarray(b))
        i = int(np.argmax(diff))
        if diff[i] > worst:
            worst, worst_row, worst_target = float(diff[i]), i, target
    passed = worst <= ORACLE_TOLERANCE
    return CheckResult(
        f"oracle/{variant.value}", passed,
        f"max_abs_diff={worst:.3e} target={worst_target}",
        None if passed else _row(values, worst_row),
    )


def check_factorization(variant: GraphVariant, values: np.ndarray, composer: Composer) -> CheckResult:
    t = composer(_heads(values, variant), variant)
    product = np.asarray(t.p_ctr) * np.asarray(t.p_cvr)
    mismatch = np.flatnonzero(np.asarray(t.p_ctcvr) != product)
    passed = mismatch.size == 0
    return CheckResult(
        f"factorization/{variant.value}", passed,
        f"mismatches={mismatch.size}",
        None if passed else _row(values, int(mismatch[0])),
    )


def check_composition_gradients(variant: GraphVariant, values: np.ndarray, composer: Composer) -> CheckResult:
    variant = GraphVariant(variant)
    analytic = composition_gradients(_heads(values, variant), variant)
    worst, worst_row, where = 0.0, 0, ""
    for j, slot in enumerate(SLOTS):
        if slot not in variant.head_slots:
            continue
        plus, minus = values.copy(), values.copy()
        plus[:, j] += GRADIENT_STEP
        minus[:, j] -= GRADIENT_STEP
        up, down = composer(_heads(plus, variant), variant), composer(_heads(minus, variant), variant)
        for target in variant.targets:
            numeric = (np.asarray(up.get(target)) - np.asarray(down.get(target))) / (2.0 * GRADIENT_STEP)
            exact = analytic.get(target, {}).get(slot, 0.0)
            err = relative_error(np.broadcast_to(exact, numeric.shape), numeric)
            i = int(np.argmax(err))
            if err[i] > worst:
                worst, worst_row, where = float(err[i]), i, f"d{target}/d{slot}"
    passed = worst <= GRADIENT_TOLERANCE
    return CheckResult(
        f"gradients/{variant.value}", passed,
        f"worst_rel_err={worst:.3e} at={where}",
        None if passed else _row(values, worst_row),
    )


def check_cross_variant(values: np.ndarray, composer: Composer) -> List[CheckResult]:
    """Variants must agree where their graphs coincide."""
    results: List[CheckResult] = []
    hm3 = composer(_heads(values, GraphVariant.HM3), GraphVariant.HM3)
    y = {s: values[:, j] for j, s in enumerate(SLOTS)}

    # ESM2 with its D-Ma head set to HM3's reach probability is HM3 without the micro level
    pi = y["y2"] * y["y3"] + (1.0 - y["y2"]) * y["y5"]
    esm2 = composer(HeadProbabilities(y1=y["y1"], y3=pi, y4=y["y4"], y6=y["y6"]), GraphVariant.ESM2)
    bad = np.flatnonzero((np.asarray(esm2.p_cvr) != np.asarray(hm3.p_cvr))
                         | (np.asarray(esm2.p_dma) != np.asarray(hm3.p_dma)))
    results.append(CheckResult("cross/esm2-as-hm3", bad.size == 0, f"mismatches={bad.size}",
                               None if bad.size == 0 else _row(values, int(bad[0]))))

    # equal purchase heads on both macro branches collapse HM3 to ESMM
    collapsed = values.copy()
    collapsed[:, 5] = collapsed[:, 3]
    hm3_flat = composer(_heads(collapsed, GraphVariant.HM3), GraphVariant.HM3)
    esmm = composer(HeadProbabilities(y1=collapsed[:, 0], y4=collapsed[:, 3]), GraphVariant.ESMM)
    diff = np.abs(np.asarray(hm3_flat.p_ctcvr) - np.asarray(esmm.p_ctcvr))
    i = int(np.argmax(diff))
    results.append(CheckResult("cross/esmm-as-hm3", diff[i] <= ORACLE_TOLERANCE, f"max_abs_diff={diff[i]:.3e}",
                               None if diff[i] <= ORACLE_TOLERANCE else _row(collapsed, i)))

    # HM3R is HM3 with the two post-click levels relabelled
    rev = composer(_heads(values, GraphVariant.HM3R), GraphVariant.HM3R)
    bad = np.flatnonzero((np.asarray(rev.p_dma) != np.asarray(hm3.p_dmi))
                         | (np.asarray(rev.p_dmi) != np.asarray(hm3.p_dma))
                         | (np.asarray(rev.p_ctcvr) != np.asarray(hm3.p_ctcvr)))
    results.append(CheckResult("cross/hm3r-relabel", bad.size == 0, f"mismatches={bad.size}",
                               None if bad.size == 0 else _row(values, int(bad[0]))))
    return results


def run_oracle_suite(composer: Composer = compose, n_draws: int = 10_000, seed: int = 0,
                     variants: Sequence[GraphVariant] = tuple(GraphVariant)) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    values = rng.random((n_draws, 6))
    # keep finite differences inside [0, 1]
    interior = 0.01 + 0.98 * rng.random((min(n_draws, GRADIENT_DRAWS), 6))

    results: List[CheckResult] = []
    for variant in variants:
        variant = GraphVariant(variant)
        results.append(check_oracle_equivalence(variant, values, composer))
        results.append(check_factorization(variant, values, composer))
        results.append(check_composition_gradients(variant, interior, composer))
    results.extend(check_cross_variant(values, composer))

    for result in results:
        (logger.info if result.passed else logger.error)(f"oracle_check {result.line()}")
    return results


def gradcheck_batch(n_examples: int = 32, seed: int = 0) -> Batch:
    """A small uncalibrated world: zero biases keep every label class populated."""
    settings = GeneratorSettings(
        n_users=40, n_items=30, n_categories=5, latent_dim=4,
        train_impressions=n_examples, test_impressions=1, seed=seed,
    )
    world = build_generative_model(settings)
    return Batch.from_log(generate_impressions(world, 0, n_examples))


def run_gradcheck(
    variant: GraphVariant,
    n_examples: int = 32,
    head_widths: Sequence[int] = (16, 8),
    embedding_dim: int = 4,
    tolerance: float = 1e-4,
    max_coordinates: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    spec = ModelSpec(
        variant=GraphVariant(variant),
        vocab_sizes=[40, 30, 5],
        embedding_dims=[embedding_dim] * 3,
        head_widths=list(head_widths),
        seed=seed,
        dtype="float64",
    )
    model = build(spec)
    report = grad_check(model, gradcheck_batch(n_examples, seed), tolerance=tolerance,
                        max_coordinates=max_coordinates, seed=seed)
    logger.info(f"gradcheck variant={spec.variant.value} {report.summary()}")
    return report
