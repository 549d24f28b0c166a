"""
Command-line entry point.

Usage:
    ohformer synth --out data --ids 8 --cams 2 --per-id 10 --seed 1
    ohformer train --config run.conf --data data --out run
    ohformer eval --ckpt run/ckpt-500.ohf --query q --gallery g
    ohformer analyze --ckpt run/ckpt-500.ohf --data data --direction both
    ohformer gradcheck --op deform_branch
    ohformer ablate --data data --stacks "[None]" "[H_2^{1},H_3^{2}]"

Any config key can be overridden with ``--key value``.
"""

import argparse
import csv
import itertools
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from ohformer.checks import OPS, TOLERANCE, run_check, run_full_layer
from ohformer.config import RUN_CONFIG_SCHEMA, RunConfig, normalize_key, parse_value, resolve_config
from ohformer.errors import (
    CheckpointFormatError,
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    EvaluationError,
    NumericError,
    OhformerError,
    OutputError,
)
from ohformer.evaluation.analysis import (
    analyze_model,
    capture_attention,
    flop_rows,
    format_report,
    uniform_js,
    write_analysis,
    write_analysis_heads,
    write_flops,
)
from ohformer.evaluation.metrics import evaluate, write_metrics
from ohformer.evaluation.synth import SynthSpec, synth_generate
from ohformer.tensor import set_num_threads
from ohformer.training.checkpoint import load_checkpoint
from ohformer.training.data import ReidDataset, holdout_split, load_dataset
from ohformer.training.trainer import Trainer, restore_model

logger = logging.getLogger("ohformer")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_OUTPUT = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

# first match wins, so subclasses precede their bases
EXIT_CODES = (
    (NumericError, EXIT_NUMERIC),
    (OutputError, EXIT_OUTPUT),
    (CheckpointFormatError, EXIT_DATA),
    (DataError, EXIT_DATA),
    (EvaluationError, EXIT_DATA),
    (ConfigurationError, EXIT_USAGE),
    (ContractError, EXIT_USAGE),
    (DimensionError, EXIT_USAGE),
)

ABLATION_NAME = "ablation.tsv"


def exit_code(error: OhformerError) -> int:
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    return EXIT_USAGE


def parse_overrides(tokens: Sequence[str]) -> Dict[str, Any]:
    """
    ``--key value`` / ``--key=value`` pairs for config keys.

    Raises:
        ConfigurationError: a token is not an option, names an unknown key, or lacks a value
    """
    overrides: Dict[str, Any] = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            raise ConfigurationError(f"unexpected argument {token!r}")
        key, sep, raw = token[2:].partition("=")
        key = normalize_key(key)
        if key not in RUN_CONFIG_SCHEMA["properties"]:
            raise ConfigurationError(f"unknown option --{key.replace('_', '-')}")
        if not sep:
            if i + 1 >= len(tokens) or tokens[i + 1].startswith("--"):
                raise ConfigurationError(f"--{key.replace('_', '-')} needs a value")
            i += 1
            raw = tokens[i]
        overrides[key] = parse_value(key, raw)
        i += 1
    return overrides


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Config file: key = value text, YAML or JSON")
    parser.add_argument("--threads", type=int, help="Worker threads for batch-parallel kernels (default: $OHF_THREADS or 1)")
    parser.add_argument("--seed", type=int, help="Random seed")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="Only warnings, no progress bar")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ohformer",
        description="Desk-scale omni-relational high-order transformer for person re-identification",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Any config key may be overridden with --key value (e.g. --steps 200 --lr 0.02).",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate a synthetic pedestrian dataset", allow_abbrev=False)
    _common(synth)
    synth.add_argument("--out", required=True, help="Dataset directory")
    synth.add_argument("--ids", type=int, help="Identities")
    synth.add_argument("--cams", type=int, help="Cameras")
    synth.add_argument("--per-id", type=int, help="Images per identity per camera")
    synth.add_argument("--occlude", type=float, help="Occluder probability")

    train = sub.add_parser("train", help="Train a model", allow_abbrev=False)
    _common(train)
    train.add_argument("--data", help="Dataset directory")
    train.add_argument("--out", help="Run directory")
    train.add_argument("--resume", help="Checkpoint to continue from")

    ev = sub.add_parser("eval", help="Retrieval metrics of a checkpoint", allow_abbrev=False)
    _common(ev)
    ev.add_argument("--ckpt", required=True, help="Checkpoint file")
    ev.add_argument("--query", required=True, help="Query dataset directory")
    ev.add_argument("--gallery", required=True, help="Gallery dataset directory")
    ev.add_argument("--out", help="Directory for metrics.tsv")

    analyze = sub.add_parser("analyze", help="Cross-order attention similarity and score cost", allow_abbrev=False)
    _common(analyze)
    analyze.add_argument("--ckpt", required=True, help="Checkpoint file")
    analyze.add_argument("--data", help="Dataset directory")
    analyze.add_argument("--out", help="Directory for the reports")
    analyze.add_argument("--direction", choices=["down", "up", "both"])
    analyze.add_argument("--per-head", action="store_true", default=None, help="Also write per-head divergences")
    analyze.add_argument("--images", type=int, default=32, help="Images in the analyzed batch (default: 32)")

    grad = sub.add_parser("gradcheck", help="Finite-difference gradient checks", allow_abbrev=False)
    _common(grad)
    which = grad.add_mutually_exclusive_group()
    which.add_argument("--op", help=f"One of: {', '.join(sorted(OPS))} (default: all)")
    which.add_argument("--full-layer", action="store_true", help="A full 3-order layer in both modes")

    ablate = sub.add_parser("ablate", help="Train and evaluate a sweep of configurations", allow_abbrev=False)
    _common(ablate)
    ablate.add_argument("--data", help="Dataset directory")
    ablate.add_argument("--out", help="Sweep directory")
    ablate.add_argument("--stacks", nargs="+", help="Stack notations (default: the configured stack)")
    ablate.add_argument("--modes", nargs="+", choices=["full", "shared"], help="Attention modes")
    ablate.add_argument("--lrps", nargs="+", help="LRP variants")
    return parser


_CONFIG_ARGS = ("threads", "seed", "data", "out", "ids", "cams", "per_id", "occlude", "direction", "per_head")


def resolve(args: argparse.Namespace, extras: Sequence[str]) -> RunConfig:
    overrides = parse_overrides(extras)
    for key in _CONFIG_ARGS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    config = resolve_config(args.config, overrides)
    set_num_threads(config.threads)
    return config


def _split(config: RunConfig):
    dataset = load_dataset(config.data, config.input_size)
    train_pos, held_pos = holdout_split(dataset.entries, config.holdout_every)
    return dataset.subset(train_pos), (dataset.subset(held_pos) if held_pos else None)


def _held_out_metrics(trainer: Trainer, held: Optional[ReidDataset]):
    if held is None:
        return None
    try:
        result = evaluate(trainer.model, held, held)
    except EvaluationError as e:
        logger.warning("held-out split not scored: %s", e)
        return None
    write_metrics(result, trainer.out_dir)
    return result


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    spec = SynthSpec(config.ids, config.cams, config.per_id, config.input_size, config.occlude, config.seed)
    images = synth_generate(spec, config.out)
    print(f"generated {len(images)} images")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    train, held = _split(config)
    trainer = Trainer(config, train, config.out, progress=not args.quiet)
    if args.resume:
        trainer.resume(args.resume)
    result = trainer.run()
    print(f"checkpoint {result.checkpoint}")
    metrics = _held_out_metrics(trainer, held)
    if metrics is not None:
        print(f"held-out {metrics.line()}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    model = restore_model(load_checkpoint(args.ckpt), config.bn_momentum)
    size = model.spec.input_size
    query = load_dataset(args.query, size)
    gallery = query if Path(args.gallery).resolve() == Path(args.query).resolve() else load_dataset(args.gallery, size)
    result = evaluate(model, query, gallery)
    write_metrics(result, config.out)
    print(result.line())
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, config: RunConfig) -> int:
    model = restore_model(load_checkpoint(args.ckpt), config.bn_momentum)
    if not model.spec.high_order_layers():
        raise ContractError(f"checkpoint stack {model.spec.layer_orders()} has no layer of order >= 2")
    dataset = load_dataset(config.data, model.spec.input_size)
    images = dataset.images[:max(1, args.images)]
    directions = ("down", "up") if config.direction == "both" else (config.direction,)
    reports = analyze_model(model, images, directions)
    for report in reports:
        print(format_report(report))
        print()
    capture = capture_attention(model, images)
    for layer in model.spec.high_order_layers():
        baseline = uniform_js(capture.for_layer(layer))
        print(f"layer {layer} vs uniform: " + " ".join(f"order {o}={v:.4f}" for o, v in baseline.items()))
    write_analysis(reports, config.out)
    if config.per_head:
        write_analysis_heads(reports, config.out)
    write_flops(flop_rows(model), config.out)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    if args.full_layer:
        results = {"full_layer": run_full_layer(config.seed)}
    else:
        names = [args.op] if args.op else sorted(OPS)
        results = {name: run_check(name, config.seed) for name in names}
    for name, error in results.items():
        print(f"{name}: max relative error {error:.3e}")
    worst = max(results.values())
    if worst >= TOLERANCE:
        logger.error("gradient check failed: %.3e >= %.0e", worst, TOLERANCE)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    if not config.holdout_every:
        raise ConfigurationError("ablate scores a held-out split; holdout_every must be positive")
    train, held = _split(config)
    if held is None:
        raise DataError("the held-out split is empty")
    out = Path(config.out)
    rows: List[tuple] = []
    combos = itertools.product(args.stacks or [config.stack], args.modes or [config.mode], args.lrps or [config.lrp])
    for index, (stack, mode, variant) in enumerate(combos):
        run_config = replace(config, stack=stack, mode=mode, lrp=variant, out=str(out / f"ablate-{index}"))
        trainer = Trainer(run_config, train, run_config.out, progress=not args.quiet)
        trainer.run()
        result = evaluate(trainer.model, held, held)
        write_metrics(result, trainer.out_dir)
        madds = sum(layer.score_madds() for layer in trainer.model.layers)
        rows.append((trainer.spec_text, f"{result.mean_ap:.6f}", f"{result.rank(1):.6f}", madds))
        print(f"{trainer.spec_text}: {result.line()} score_madds={madds}")
    path = out / ABLATION_NAME
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(("config", "mAP", "R1", "score_madds"))
            writer.writerows(rows)
    except OSError as e:
        raise OutputError(f"cannot write {path}: {e}") from e
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    level = logging.WARNING if args.quiet else getattr(logging, args.log_level)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    try:
        config = resolve(args, extras)
        return COMMANDS[args.command](args, config)
    except OhformerError as e:
        logger.error("%s", e)
        return exit_code(e)
    except Exception:
        logger.exception("internal error in %s", args.command)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
