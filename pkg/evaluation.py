"""
Evaluation protocol and per-run report files.

CVR AUC is measured on clicked impressions (purchase label, p_cvr score);
CTCVR and CTR AUC on every impression. All AUCs are global, not per user.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Protocol, Union

import numpy as np
import pandas as pd

from behavior_graph import CompositeTargets
from errors import DegenerateLabelsError, DomainError
from ingest import ImpressionLog
from metrics import (
    auc,
    auc_null_std,
    calibration_table,
    expected_calibration_error,
    log_loss,
    relative_gap,
)

logger = logging.getLogger("[LAB]")

PREDICT_CHUNK = 65_536
METRICS_FILE = "metrics.json"
REPORT_FILE = "report.txt"
CALIBRATION_FILE = "calibration.csv"

Value = Union[float, int, str, None]


class Predictor(Protocol):
    def predict(self, features: np.ndarray) -> CompositeTargets: ...


@dataclass
class EvalReport:
    metadata: Dict[str, Value]
    metrics: Dict[str, Value]
    calibration: Dict[str, pd.DataFrame] = field(default_factory=dict)

    def flat(self) -> Dict[str, Value]:
        return {**self.metadata, **self.metrics}


def predict_log(predictor: Predictor, log: ImpressionLog, chunk: int = PREDICT_CHUNK) -> Dict[str, np.ndarray]:
    """p_ctr, p_cvr and p_ctcvr for every impression, scored in fixed-size chunks."""
    features = log.features()
    parts: Dict[str, list] = {"p_ctr": [], "p_cvr": [], "p_ctcvr": []}
    for start in range(0, len(log), chunk):
        targets = predictor.predict(features[start:start + chunk])
        for name in parts:
            parts[name].append(np.atleast_1d(np.asarray(targets.get(name), dtype=np.float64)))
    return {name: np.concatenate(values) if values else np.zeros(0) for name, values in parts.items()}


def _auc_or_reason(scores: np.ndarray, labels: np.ndarray):
    try:
        return auc(scores, labels), None
    except DegenerateLabelsError as e:
        return None, str(e)


def eval_protocol(
    predictor: Predictor,
    log: ImpressionLog,
    model_name: str,
    dataset: str = "",
    seed: Optional[int] = None,
    variant: Optional[str] = None,
) -> EvalReport:
    if len(log) == 0:
        raise DomainError("cannot evaluate an empty log")
    scores = predict_log(predictor, log)
    click = log.click.astype(bool)
    purchase = log.purchase.astype(np.int64)
    n, n_clicks, n_pay = len(log), int(click.sum()), int(purchase.sum())

    metrics: Dict[str, Value] = {
        "n_impressions": n,
        "n_clicks": n_clicks,
        "n_purchases": n_pay,
    }

    cvr_auc, reason = _auc_or_reason(scores["p_cvr"][click], purchase[click])
    metrics["cvr_auc"] = cvr_auc
    if reason is not None:
        metrics["cvr_auc_absent_reason"] = reason
        logger.warning(f"cvr_auc_absent model={model_name} reason={reason}")
    else:
        n_pos = int(purchase[click].sum())
        metrics["cvr_auc_null_std"] = auc_null_std(n_pos, n_clicks - n_pos)

    ctcvr_auc, reason = _auc_or_reason(scores["p_ctcvr"], purchase)
    metrics["ctcvr_auc"] = ctcvr_auc
    if reason is not None:
        metrics["ctcvr_auc_absent_reason"] = reason

    ctr_auc, reason = _auc_or_reason(scores["p_ctr"], log.click)
    metrics["ctr_auc"] = ctr_auc
    if reason is not None:
        metrics["ctr_auc_absent_reason"] = reason

    metrics["ctr_logloss"] = log_loss(scores["p_ctr"], log.click)
    metrics["ctcvr_logloss"] = log_loss(scores["p_ctcvr"], purchase)
    metrics["cvr_logloss"] = log_loss(scores["p_cvr"][click], purchase[click]) if n_clicks else None

    metrics["mean_p_ctr"] = float(scores["p_ctr"].mean())
    metrics["empirical_ctr"] = n_clicks / n
    metrics["ctr_relative_gap"] = relative_gap(metrics["mean_p_ctr"], metrics["empirical_ctr"])
    metrics["mean_p_ctcvr"] = float(scores["p_ctcvr"].mean())
    metrics["empirical_purchase_rate"] = n_pay / n
    metrics["ctcvr_relative_gap"] = relative_gap(metrics["mean_p_ctcvr"], metrics["empirical_purchase_rate"])

    calibration = {
        "p_ctr": calibration_table(scores["p_ctr"], log.click),
        "p_ctcvr": calibration_table(scores["p_ctcvr"], purchase),
    }
    if n_clicks:
        calibration["p_cvr"] = calibration_table(scores["p_cvr"][click], purchase[click])
    for name, table in calibration.items():
        metrics[f"{name}_calibration_error"] = expected_calibration_error(table)

    metadata: Dict[str, Value] = {
        "model": model_name,
        "variant": variant or model_name,
        "dataset": dataset,
        "seed": seed,
        "cvr_population": "clicked",
        "auc_kind": "global",
    }
    logger.info(
        f"eval_done model={model_name} seed={seed} cvr_auc={cvr_auc} ctcvr_auc={ctcvr_auc} "
        f"mean_p_ctr={metrics['mean_p_ctr']:.5f} empirical_ctr={metrics['empirical_ctr']:.5f}"
    )
    return EvalReport(metadata=metadata, metrics=metrics, calibration=calibration)


def _fmt(value: Value) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def render_report(report: EvalReport) -> str:
    rows = list(report.flat().items())
    width = max(len(k) for k, _ in rows)
    lines = [f"{key.ljust(width)}  {_fmt(value)}" for key, value in rows]
    for name, table in report.calibration.items():
        lines.append("")
        lines.append(f"calibration {name}")
        lines.append(table.to_string(index=False, float_format=lambda v: f"{v:.6f}"))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / METRICS_FILE, "w", encoding="utf-8") as f:
        json.dump(report.flat(), f, indent=2, sort_keys=True)
        f.write("\n")
    (out_dir / REPORT_FILE).write_text(render_report(report), encoding="utf-8")
    frames = [table.assign(target=name) for name, table in report.calibration.items()]
    if frames:
        pd.concat(frames, ignore_index=True).to_csv(out_dir / CALIBRATION_FILE, index=False, lineterminator="\n")
    logger.info(f"report_written dir={out_dir}")
    return out_dir / METRICS_FILE


def load_metrics(path: Path) -> Dict[str, Value]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
