"""
Multi-seed comparison across variants.

Every number in comparison.txt / comparison.json is recomputed from the
per-run metrics.json files; wall-clock times only go to run_index.json so the
comparison files are byte-stable across repeated runs.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from itertools import permutations
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from behavior_graph import GraphVariant
from errors import MissingRunsError
from evaluation import METRICS_FILE, load_metrics

logger = logging.getLogger("[LAB]")

RUNS_DIR = "runs"
ORACLE_DIR = "oracle"
COMPARED_METRICS = ("cvr_auc", "ctcvr_auc")
ABSENT = "n/a"


@dataclass
class RunRecord:
    variant: str
    seed: int
    metrics_path: str
    checkpoint_path: Optional[str]
    config_hash: Optional[str]
    wall_clock_seconds: Optional[float]
    metrics: Dict[str, object]


def run_dir(dataset_dir: Path, variant: GraphVariant, seed: int) -> Path:
    return Path(dataset_dir) / RUNS_DIR / GraphVariant(variant).value / f"seed-{seed}"


def collect_runs(dataset_dir: Path, variants: Sequence[GraphVariant], seeds: Sequence[int]) -> List[RunRecord]:
    records: List[RunRecord] = []
    missing: List[str] = []
    for variant in variants:
        for seed in seeds:
            directory = run_dir(dataset_dir, variant, seed)
            metrics_path = directory / METRICS_FILE
            if not metrics_path.exists():
                missing.append(f"{GraphVariant(variant).value}/seed-{seed}")
                continue
            summary: Dict[str, object] = {}
            if (directory / "train.json").exists():
                summary = json.loads((directory / "train.json").read_text(encoding="utf-8"))
            records.append(RunRecord(
                variant=GraphVariant(variant).value,
                seed=int(seed),
                metrics_path=str(metrics_path),
                checkpoint_path=summary.get("checkpoint"),
                config_hash=summary.get("config_hash"),
                wall_clock_seconds=summary.get("wall_clock_seconds"),
                metrics=load_metrics(metrics_path),
            ))
    if missing:
        raise MissingRunsError(missing)
    return records


def _frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    rows = [{"variant": r.variant, "seed": r.seed, **{m: r.metrics.get(m) for m in COMPARED_METRICS}}
            for r in records]
    frame = pd.DataFrame(rows, columns=["variant", "seed", *COMPARED_METRICS])
    for metric in COMPARED_METRICS:
        frame[metric] = pd.to_numeric(frame[metric], errors="coerce")
    return frame


def _clean(value) -> Optional[float]:
    return None if value is None or pd.isna(value) else float(value)


def summarize(records: Sequence[RunRecord], variants: Sequence[GraphVariant]) -> List[Dict[str, object]]:
    """Mean and sample std (ddof=1) per variant; std is None when n < 2."""
    frame = _frame(records)
    rows: List[Dict[str, object]] = []
    for variant in variants:
        name = GraphVariant(variant).value
        sub = frame[frame["variant"] == name]
        row: Dict[str, object] = {"variant": name, "n": int(len(sub))}
        for metric in COMPARED_METRICS:
            values = sub[metric].dropna()
            row[f"{metric}_mean"] = _clean(values.mean()) if len(values) else None
            row[f"{metric}_std"] = _clean(values.std(ddof=1)) if len(values) > 1 else None
        rows.append(row)
    return rows


def pairwise_wins(records: Sequence[RunRecord], variants: Sequence[GraphVariant]) -> List[Dict[str, object]]:
    """For each ordered pair (a, b): seeds where a strictly beats b, per metric."""
    frame = _frame(records)
    names = [GraphVariant(v).value for v in variants]
    out: List[Dict[str, object]] = []
    for a, b in permutations(names, 2):
        left = frame[frame["variant"] == a].set_index("seed")
        right = frame[frame["variant"] == b].set_index("seed")
        common = left.index.intersection(right.index)
        entry: Dict[str, object] = {"variant": a, "versus": b, "seeds": int(len(common))}
        for metric in COMPARED_METRICS:
            pair = pd.DataFrame({"a": left.loc[common, metric], "b": right.loc[common, metric]}).dropna()
            entry[f"{metric}_wins"] = int((pair["a"] > pair["b"]).sum())
        out.append(entry)
    return out


def _fmt(mean: Optional[float], std: Optional[float]) -> str:
    if mean is None:
        return ABSENT
    return f"{mean:.6f} ± {std:.6f}" if std is not None else f"{mean:.6f} ± {ABSENT}"


def _single(value: Optional[float]) -> str:
    return ABSENT if value is None else f"{value:.6f}"


def render_comparison(comparison: Dict[str, object]) -> str:
    header = ["variant", "preset", "n", "CVR AUC", "CTCVR AUC"]
    table = [header]
    for row in comparison["rows"]:
        table.append([
            row["variant"], comparison["preset"], str(row["n"]),
            _fmt(row["cvr_auc_mean"], row["cvr_auc_std"]),
            _fmt(row["ctcvr_auc_mean"], row["ctcvr_auc_std"]),
        ])
    oracle = comparison.get("oracle")
    if oracle:
        table.append([
            "oracle", comparison["preset"], "-",
            _single(oracle.get("cvr_auc")),
            _single(oracle.get("ctcvr_auc")),
        ])
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))

    lines.append("")
    lines.append("seed-matched wins (a beats b)")
    for entry in comparison["wins"]:
        lines.append(
            f"{entry['variant']:>5} vs {entry['versus']:<5} "
            f"cvr {entry['cvr_auc_wins']}/{entry['seeds']}  ctcvr {entry['ctcvr_auc_wins']}/{entry['seeds']}"
        )
    return "\n".join(lines) + "\n"


def build_comparison(dataset_dir: Path, variants: Sequence[GraphVariant], seeds: Sequence[int],
                     preset: str, config_digest: Optional[str] = None) -> Dict[str, object]:
    records = collect_runs(dataset_dir, variants, seeds)
    oracle_path = Path(dataset_dir) / ORACLE_DIR / METRICS_FILE
    oracle = None
    if oracle_path.exists():
        metrics = load_metrics(oracle_path)
        oracle = {m: metrics.get(m) for m in COMPARED_METRICS}
    return {
        "config_hash": config_digest,
        "preset": preset,
        "seeds": [int(s) for s in seeds],
        "rows": summarize(records, variants),
        "wins": pairwise_wins(records, variants),
        "oracle": oracle,
        "records": records,
    }


def write_comparison(dataset_dir: Path, variants: Sequence[GraphVariant], seeds: Sequence[int],
                     preset: str, config_digest: Optional[str] = None) -> Dict[str, object]:
    """Write comparison.txt, comparison.json and run_index.json under dataset_dir."""
    dataset_dir = Path(dataset_dir)
    comparison = build_comparison(dataset_dir, variants, seeds, preset, config_digest)
    records: List[RunRecord] = comparison.pop("records")

    (dataset_dir / "comparison.txt").write_text(render_comparison(comparison), encoding="utf-8")
    with open(dataset_dir / "comparison.json", "w", encoding="utf-8") as f:
        json.dump(comparison, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(dataset_dir / "run_index.json", "w", encoding="utf-8") as f:
        json.dump([asdict(r) for r in records], f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"comparison_written dir={dataset_dir} variants={len(variants)} seeds={len(seeds)}")
    return comparison
