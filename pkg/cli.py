"""
Command-line entry point.

    python cli.py gen --config configs/desk_s.json
    python cli.py train --config configs/desk_s.json --variant hm3 --seed 1
    python cli.py eval --config configs/desk_s.json --variant hm3 --seed 1
    python cli.py eval --config configs/desk_s.json --oracle
    python cli.py report --config configs/desk_s.json
    python cli.py oracle-check
    python cli.py gradcheck --variant hm3
    python cli.py run --config configs/desk_s.json

Dataset layout under <output_dir>/<name>/:
    config.json, generator.npz
    data/train.csv, data/test.csv (+ .manifest.json each)
    runs/<variant>/seed-<n>/{checkpoint.bin, curve.csv, train.json, metrics.json, report.txt}
    oracle/{metrics.json, report.txt}
    comparison.txt, comparison.json, run_index.json

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 verification failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from behavior_graph import GraphVariant
from config import PRESETS, ExperimentConfig, build_config, config_hash, load_config, save_config
from errors import ConfigError, EXIT_OK, ShapeMismatchError, VerificationError, exit_code_for
from evaluation import eval_protocol, write_report
from ingest import DatasetManifest, ImpressionLog, manifest_path, read_log, write_log
from models import ModelSpec, load_model
from reporting import ORACLE_DIR, run_dir, write_comparison
from simulator import (
    GroundTruthScorer,
    build_generative_model,
    calibrate_biases,
    generate_impressions,
    load_generative_model,
    save_generative_model,
)
from trainer import CHECKPOINT_FILE, train_run
from verification import run_gradcheck, run_oracle_suite

logger = logging.getLogger("[LAB]")

GENERATOR_FILE = "generator.npz"
DATA_DIR = "data"
TRAIN_LOG = "train.csv"
TEST_LOG = "test.csv"


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _config(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "preset", None):
        overrides = {"preset": args.preset, "name": args.preset}
    config = load_config(args.config, overrides) if args.config else build_config(overrides)
    if args.command in ("gen", "run") and getattr(args, "out", None):
        config = config.model_copy(update={"output_dir": Path(args.out)})
    return config


def _log_paths(config: ExperimentConfig):
    data = config.dataset_dir() / DATA_DIR
    return data / TRAIN_LOG, data / TEST_LOG


def _read_verified(path: Path) -> ImpressionLog:
    log = read_log(path)
    DatasetManifest.load(manifest_path(path)).verify(log)
    return log


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(config: ExperimentConfig, workers: int = 1) -> Path:
    g = config.generator
    dataset_dir = config.dataset_dir()
    dataset_dir.mkdir(parents=True, exist_ok=True)

    model = build_generative_model(g)
    model = calibrate_biases(model, g.rates, g.calibration_pairs, g.calibration_tolerance)
    save_generative_model(model, dataset_dir / GENERATOR_FILE)

    notes = {
        "preset": config.preset or "custom",
        "scale": "desk-scale volumes; rates follow the preset's count ratios",
    }
    train_path, test_path = _log_paths(config)
    # disjoint impression-id ranges
    train = generate_impressions(model, 0, g.train_impressions, workers=workers)
    write_log(train, train_path, seed=g.seed, notes={**notes, "split": "train"})
    test = generate_impressions(model, g.train_impressions, g.test_impressions, workers=workers)
    write_log(test, test_path, seed=g.seed, notes={**notes, "split": "test"})

    for path in (train_path, test_path):
        _read_verified(path)
    save_config(config, dataset_dir / "config.json")
    logger.info(f"gen_done dir={dataset_dir} train={len(train)} test={len(test)}")
    return dataset_dir


def cmd_train(config: ExperimentConfig, variant: GraphVariant, seed: int):
    train_path, _ = _log_paths(config)
    train = _read_verified(train_path)
    priors = DatasetManifest.load(manifest_path(train_path)).rates()
    spec = ModelSpec.from_config(config, GraphVariant(variant), seed)
    return train_run(config, spec, train, run_dir(config.dataset_dir(), variant, seed), prior_rates=priors)


def _check_vocab(spec: ModelSpec, log: ImpressionLog) -> None:
    if len(log) == 0:
        return
    highest = log.features().max(axis=0)
    for field, top, size in zip(("user", "item", "category"), highest, spec.vocab_sizes):
        if top >= size:
            raise ShapeMismatchError(f"test log {field} id {int(top)} exceeds model vocabulary {size}")


def cmd_eval(checkpoint: Path, test_log: Path, out_dir: Path, dataset: str = ""):
    model, header = load_model(checkpoint)
    log = _read_verified(test_log)
    _check_vocab(model.spec, log)
    report = eval_protocol(model, log, model_name=model.variant.value, dataset=dataset,
                           seed=header.get("seed"), variant=model.variant.value)
    write_report(report, out_dir)
    return report


def cmd_eval_oracle(generator: Path, test_log: Path, out_dir: Path, dataset: str = ""):
    scorer = GroundTruthScorer(load_generative_model(generator))
    report = eval_protocol(scorer, _read_verified(test_log), model_name="oracle", dataset=dataset)
    write_report(report, out_dir)
    return report


def cmd_report(config: ExperimentConfig):
    return write_comparison(config.dataset_dir(), config.variants, config.seeds,
                            preset=config.preset or config.name, config_digest=config_hash(config))


def cmd_oracle_check(n_draws: int = 10_000, seed: int = 0) -> None:
    results = run_oracle_suite(n_draws=n_draws, seed=seed)
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    if failed:
        raise VerificationError("oracle-check failed: " + "; ".join(r.line() for r in failed))


def cmd_gradcheck(variants: Sequence[GraphVariant], n_examples: int = 32, tolerance: float = 1e-4) -> None:
    failed: List[str] = []
    for variant in variants:
        report = run_gradcheck(variant, n_examples=n_examples, tolerance=tolerance)
        print(f"{GraphVariant(variant).value} {report.summary()}")
        if not report.passed:
            failed.append(f"{GraphVariant(variant).value}: {report.summary()}")
    if failed:
        raise VerificationError("gradcheck failed: " + "; ".join(failed))


def cmd_run(config: ExperimentConfig, workers: int = 1):
    """gen, then train and evaluate every (variant, seed), score the oracle, and report."""
    dataset_dir = cmd_gen(config, workers=workers)
    _, test_path = _log_paths(config)
    for variant in config.variants:
        for seed in config.seeds:
            cmd_train(config, variant, seed)
            directory = run_dir(dataset_dir, variant, seed)
            cmd_eval(directory / CHECKPOINT_FILE, test_path, directory, dataset=config.name)
    cmd_eval_oracle(dataset_dir / GENERATOR_FILE, test_path, dataset_dir / ORACLE_DIR, dataset=config.name)
    return cmd_report(config)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cvrlab", description="Entire-space multi-task CVR lab")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    variants = [v.value for v in GraphVariant]

    gen = sub.add_parser("gen", help="generate train/test logs")
    gen.add_argument("--config", type=Path)
    gen.add_argument("--out", type=Path, help="output root (overrides output_dir)")
    gen.add_argument("--preset", choices=sorted(PRESETS))
    gen.add_argument("--workers", type=int, default=1)

    train = sub.add_parser("train", help="train one variant for one seed")
    train.add_argument("--config", type=Path)
    train.add_argument("--preset", choices=sorted(PRESETS))
    train.add_argument("--variant", choices=variants, required=True)
    train.add_argument("--seed", type=int, required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint, or the ground-truth oracle")
    ev.add_argument("--config", type=Path)
    ev.add_argument("--preset", choices=sorted(PRESETS))
    ev.add_argument("--variant", choices=variants)
    ev.add_argument("--seed", type=int)
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--test-log", type=Path)
    ev.add_argument("--out", type=Path, help="report directory")
    ev.add_argument("--oracle", action="store_true", help="score with the generator's exact targets")

    report = sub.add_parser("report", help="multi-seed comparison table")
    report.add_argument("--config", type=Path)
    report.add_argument("--preset", choices=sorted(PRESETS))

    oracle = sub.add_parser("oracle-check", help="composition oracle suite")
    oracle.add_argument("--draws", type=int, default=10_000)
    oracle.add_argument("--seed", type=int, default=0)

    grad = sub.add_parser("gradcheck", help="finite-difference gradient check")
    grad.add_argument("--variant", choices=variants, action="append")
    grad.add_argument("--examples", type=int, default=32)
    grad.add_argument("--tolerance", type=float, default=1e-4)

    run = sub.add_parser("run", help="gen + train + eval + report")
    run.add_argument("--config", type=Path)
    run.add_argument("--out", type=Path, help="output root (overrides output_dir)")
    run.add_argument("--preset", choices=sorted(PRESETS))
    run.add_argument("--workers", type=int, default=1)
    return parser


def _dispatch(args) -> None:
    if args.command == "oracle-check":
        cmd_oracle_check(args.draws, args.seed)
    elif args.command == "gradcheck":
        cmd_gradcheck([GraphVariant(v) for v in (args.variant or [v.value for v in GraphVariant])],
                      n_examples=args.examples, tolerance=args.tolerance)
    elif args.command == "gen":
        cmd_gen(_config(args), workers=args.workers)
    elif args.command == "train":
        cmd_train(_config(args), GraphVariant(args.variant), args.seed)
    elif args.command == "eval":
        _dispatch_eval(args)
    elif args.command == "report":
        config = _config(args)
        cmd_report(config)
        print((config.dataset_dir() / "comparison.txt").read_text(encoding="utf-8"))
    elif args.command == "run":
        config = _config(args)
        cmd_run(config, workers=args.workers)
        print((config.dataset_dir() / "comparison.txt").read_text(encoding="utf-8"))


def _dispatch_eval(args) -> None:
    config = _config(args)
    test_log = args.test_log or _log_paths(config)[1]

    if args.oracle:
        out = args.out or config.dataset_dir() / ORACLE_DIR
        cmd_eval_oracle(config.dataset_dir() / GENERATOR_FILE, test_log, out, dataset=config.name)
        return

    directory = None
    if args.variant is not None and args.seed is not None:
        directory = run_dir(config.dataset_dir(), GraphVariant(args.variant), args.seed)
    if args.checkpoint is None and directory is None:
        raise ConfigError("eval needs --checkpoint or --variant with --seed")
    out = args.out or directory
    if out is None:
        raise ConfigError("eval needs --out when --variant/--seed are not given")
    cmd_eval(args.checkpoint or directory / CHECKPOINT_FILE, test_log, out, dataset=config.name)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(
        level=logging.DEBUG if "--verbose" in argv else logging.INFO,
        format='%(name)s %(levelname)s %(message)s',
    )
    command = "unknown"
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        _dispatch(args)
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"command_failed command={command} exit={code} error={type(e).__name__} detail={e}")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
