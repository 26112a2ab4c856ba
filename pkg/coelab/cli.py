"""
Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage/config/load error,
3 numeric abort. Reports go to stdout as JSON; logs go to stderr.
"""

import argparse
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import __version__
from .analysis import combination_ratio, cost_compare, write_routing_outputs
from .checkpoints import load_checkpoint
from .config.errors import (
    CheckpointError,
    ConfigurationError,
    DimensionError,
    DomainError,
    NumericError,
    RoutingInvariantError,
    UsageError,
)
from .config.logger import logger
from .config.schemas import AnalysisConfig, DataConfig, RunConfig, TrainConfig, describe_defaults, load_run_config
from .config.settings import (
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VERIFICATION_FAILED,
    RESOLVED_CONFIG_FILE,
)
from .data import DataStream
from .experiments import PRESETS, run_grid
from .files import ensure_directory
from .json_utils import to_pretty_json, write_json_file
from .model import CoEModel
from .training import evaluate, model_from_checkpoint, train
from .verification import check_model_gradients

GRADCHECK_DEFAULTS = {"model.coe.num_experts": 4, "model.coe.total_k": 2}


def _run_config(path: Optional[Path]) -> RunConfig:
    return RunConfig() if path is None else load_run_config(path)


def _seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got '{text}'") from None


def _emit(document: dict) -> None:
    print(to_pretty_json(document))


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args.config)
    overrides: dict = {}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.data is not None:
        overrides["data.path"] = str(args.data.resolve())
    if overrides:
        config = config.with_overrides(overrides)
    out_dir = ensure_directory(args.out)
    write_json_file(config.model_dump(mode="json"), out_dir / RESOLVED_CONFIG_FILE)

    model = CoEModel.init(config.model, seed=config.train.seed, precision=config.train.precision)
    data = DataStream.from_config(config.data, config.train, config.model.vocab_size)
    resume = load_checkpoint(args.resume) if args.resume is not None else None
    result = train(model, data, config.train, out_dir, resume=resume, analysis=config.analysis)
    _emit({"final_val_loss": result.final_val_loss, "checkpoint": result.final_checkpoint})
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(checkpoint)
    try:
        train_config = TrainConfig.model_validate(checkpoint.meta["train"])
        data_config = DataConfig.model_validate(checkpoint.meta["data"])
        analysis = AnalysisConfig.model_validate(checkpoint.meta.get("analysis", {}))
    except (KeyError, ValueError) as e:
        raise CheckpointError("__meta__", f"run configuration unreadable: {e}") from None

    data = DataStream.from_config(data_config, train_config, model.config.vocab_size, args.data)
    result = evaluate(model, data, train_config)
    out_dir = args.out if args.out is not None else Path(analysis.output_dir)
    emit_summary = analysis.emit_summary and not args.no_summary
    write_routing_outputs(result.traces, model.config.coe.num_experts, out_dir, emit_summary)
    _emit({"val_loss": result.loss, "tokens": result.tokens})
    return EXIT_OK


def cmd_count_combos(args: argparse.Namespace) -> int:
    _emit(combination_ratio(args.n, args.k, args.c).as_dict())
    return EXIT_OK


def cmd_cost_model(args: argparse.Namespace) -> int:
    a = load_run_config(args.config_a).model
    b = load_run_config(args.config_b).model
    _emit(cost_compare(a, b).as_dict())
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.config is None:
        config = RunConfig().with_overrides(GRADCHECK_DEFAULTS)
    else:
        config = load_run_config(args.config)
    report = check_model_gradients(
        config.model,
        samples=args.samples,
        seeds=_seeds(args.seeds),
        corrupt_backward=args.corrupt_backward,
    )
    _emit(report.as_dict())
    return EXIT_OK if report.passed else EXIT_VERIFICATION_FAILED


def cmd_grid(args: argparse.Namespace) -> int:
    report = run_grid(
        _run_config(args.config),
        args.preset,
        seeds=_seeds(args.seeds),
        steps=args.steps,
        out_dir=args.out,
        corpus=args.data,
    )
    _emit(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coelab",
        description="Chained sparse expert layers: training, evaluation and routing analysis.",
        epilog=describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", help="train a model from a run configuration")
    p.add_argument("--config", type=Path, help="run configuration JSON (defaults when omitted)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--data", type=Path, help="corpus file, overrides data.path")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("eval", help="validation loss and co-activation files for a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, help="corpus file for the bytes task")
    p.add_argument("--out", type=Path, help="co-activation output directory (analysis.output_dir when omitted)")
    p.add_argument("--no-summary", action="store_true", help="skip routing_summary.json")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("count-combos", help="exact expert-combination counts")
    p.add_argument("--n", type=int, required=True, help="routed experts")
    p.add_argument("--k", type=int, required=True, help="selections per iteration")
    p.add_argument("--c", type=int, default=2, help="iterations")
    p.set_defaults(handler=cmd_count_combos)

    p = commands.add_parser("cost-model", help="analytic cost comparison of two configurations")
    p.add_argument("--config-a", type=Path, required=True)
    p.add_argument("--config-b", type=Path, required=True)
    p.set_defaults(handler=cmd_cost_model)

    p = commands.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    p.add_argument("--config", type=Path, help="run configuration JSON (tiny model when omitted)")
    p.add_argument("--samples", type=int, default=200, help="coordinates per seed")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_gradcheck)

    p = commands.add_parser("grid", help="train every arm of an experiment preset")
    p.add_argument("--config", type=Path, help="base run configuration JSON")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--data", type=Path, help="corpus file for the bytes task")
    p.set_defaults(handler=cmd_grid)
    return parser


def _fail(code: int, error: BaseException) -> int:
    print(f"coelab: {error}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except NumericError as e:
        logger.error(f"Numeric abort: {e}")
        return _fail(EXIT_NUMERIC, e)
    except RoutingInvariantError as e:
        return _fail(EXIT_VERIFICATION_FAILED, e)
    except (
        ConfigurationError,
        UsageError,
        DomainError,
        DimensionError,
        CheckpointError,
        OSError,
    ) as e:
        return _fail(EXIT_USAGE, e)


if __name__ == "__main__":
    sys.exit(main())
