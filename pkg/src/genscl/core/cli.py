"""
Command-line surface for the genscl toolkit.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from .config import Config, RunConfig
from .errors import ConfigError, ExitCode, GSCLError
from .models import LossKind, MixKind
from .utils import parse_key_value_text
from ..tools.runners import (
    get_dataset_runner,
    get_diagnostics_runner,
    get_evaluation_runner,
    get_gradcheck_runner,
    get_training_runner,
)

logger = logging.getLogger(__name__)

FlagSpec = Tuple[str, Dict[str, Any]]


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


DATASET_FLAGS: List[FlagSpec] = [
    ("--classes", {"type": int, "help": "Number of classes"}),
    ("--per-class", {"type": int, "help": "Examples per class"}),
    ("--size", {"type": int, "help": "Image height and width"}),
    ("--channels", {"type": int, "help": "Image channels"}),
    ("--noise-std", {"type": float, "help": "Pixel noise around class templates"}),
    ("--name", {"type": str, "help": "Dataset name"}),
    ("--out", {"type": str, "help": "Output dataset file"}),
]

OPTIMIZER_FLAGS: List[FlagSpec] = [
    ("--dataset", {"type": str, "help": "Training dataset file"}),
    ("--out", {"type": str, "help": "Output checkpoint file"}),
    ("--epochs", {"type": int, "help": "Training epochs"}),
    ("--batch-size", {"type": int, "help": "Examples per batch"}),
    ("--lr", {"type": float, "help": "Base learning rate"}),
    ("--momentum", {"type": float, "help": "SGD momentum"}),
    ("--weight-decay", {"type": float, "help": "Weight decay"}),
    ("--warmup-epochs", {"type": int, "help": "Linear warmup epochs"}),
]

TEACHER_FLAGS: List[FlagSpec] = [
    ("--teacher-hidden-dim", {"type": int, "help": "Teacher hidden width"}),
    ("--teacher-tau", {"type": float, "help": "Teacher softening temperature"}),
]

TRAIN_FLAGS: List[FlagSpec] = [
    ("--metrics", {"type": str, "help": "Per-epoch metrics CSV (default: checkpoint path with .csv)"}),
    ("--tau", {"type": float, "help": "Contrastive temperature"}),
    ("--alpha-kd", {"type": str, "help": "Distillation weight, or 'teacher-only'"}),
    ("--loss", {"type": str, "choices": [kind.value for kind in LossKind], "help": "Objective"}),
    ("--mix", {"type": str, "choices": [kind.value for kind in MixKind], "help": "Mixing operator"}),
    ("--beta-alpha", {"type": float, "help": "Beta(a, a) parameter of the mixing weight"}),
    ("--hidden-dim", {"type": int, "help": "Encoder hidden width"}),
    ("--embed-dim", {"type": int, "help": "Encoder output width"}),
    ("--proj-dim", {"type": int, "help": "Projection output width"}),
    ("--pos-threshold", {"type": float, "help": "Label similarity above which pairs are positive"}),
    ("--teacher", {"type": str, "choices": ["none", "oracle", "checkpoint"], "help": "Teacher source"}),
    ("--teacher-checkpoint", {"type": str, "help": "Teacher checkpoint file"}),
    ("--crop-pad", {"type": int, "help": "Zero padding before random crop"}),
    ("--flip-prob", {"type": float, "help": "Horizontal flip probability"}),
    ("--aug-noise-std", {"type": float, "help": "Augmentation pixel noise"}),
    ("--enable-crop", {"type": _parse_bool, "help": "true/false"}),
    ("--enable-flip", {"type": _parse_bool, "help": "true/false"}),
    ("--enable-noise", {"type": _parse_bool, "help": "true/false"}),
]

EVAL_FLAGS: List[FlagSpec] = [
    ("--checkpoint", {"type": str, "help": "Encoder checkpoint"}),
    ("--dataset", {"type": str, "help": "Probe training dataset"}),
    ("--test-dataset", {"type": str, "help": "Test dataset"}),
    ("--probe-epochs", {"type": int, "help": "Probe epochs"}),
    ("--probe-batch-size", {"type": int, "help": "Probe batch size"}),
    ("--probe-lr", {"type": float, "help": "Probe learning rate"}),
]

GRADCHECK_FLAGS: List[FlagSpec] = [
    ("--trials", {"type": int, "help": "Random instances to check"}),
    ("--tolerance", {"type": float, "help": "Maximum relative error"}),
    ("--mutate-sign", {"action": "store_true", "help": "Flip the analytic gradient's sign"}),
]

DIAGNOSE_FLAGS: List[FlagSpec] = [
    ("--inputs", {"nargs": "+", "help": "Metrics CSV files to merge"}),
    ("--out", {"type": str, "help": "Merged CSV file"}),
]

SUBCOMMANDS: Dict[str, Tuple[str, List[FlagSpec]]] = {
    "gen-data": ("Generate a synthetic class-template dataset", DATASET_FLAGS),
    "train-teacher": ("Pretrain a teacher classifier", OPTIMIZER_FLAGS + TEACHER_FLAGS),
    "train": ("Contrastive training", OPTIMIZER_FLAGS + TRAIN_FLAGS + TEACHER_FLAGS),
    "linear-eval": ("Linear evaluation of a frozen encoder", EVAL_FLAGS),
    "gradcheck": ("Check the analytic anchor gradient", GRADCHECK_FLAGS),
    "diagnose": ("Merge mean_pos_dot series for plotting", DIAGNOSE_FLAGS),
}

CONTROL_KEYS = ("command", "config", "dump_config", "usage")


def create_parser() -> argparse.ArgumentParser:
    """
    Build the argument parser.

    Every option defaults to ``argparse.SUPPRESS`` so the parsed namespace
    holds only the flags actually given.
    """
    parser = argparse.ArgumentParser(
        prog="genscl",
        description="Generalized supervised contrastive learning toolkit",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, (help_text, flags) in SUBCOMMANDS.items():
        sub = subparsers.add_parser(command, help=help_text, argument_default=argparse.SUPPRESS)
        sub.add_argument("--config", type=str, help="Flat key=value config file (flags win)")
        sub.add_argument(
            "--dump-config", action="store_true", help="Print the resolved config and exit"
        )
        sub.add_argument("--seed", type=int, help="Seed (fallback: GSCL_SEED)")
        for flag, options in flags:
            sub.add_argument(flag, **options)
        sub.set_defaults(usage=sub.format_usage())
    return parser


def resolve_config(args: argparse.Namespace, config: Config) -> RunConfig:
    """Merge config file, flags and environment into a validated RunConfig."""
    values = vars(args)
    file_values: Dict[str, str] = {}
    if "config" in values:
        try:
            text = Path(values["config"]).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"Cannot read config file {values['config']}: {exc}") from exc
        file_values = parse_key_value_text(text)
    flags = {key: value for key, value in values.items() if key not in CONTROL_KEYS}
    return RunConfig.from_sources(file_values, flags, env_seed=config.seed)


def _emit(payload: Dict[str, Any]) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


def _cmd_gen_data(cfg: RunConfig) -> int:
    summary = get_dataset_runner().generate(cfg)
    _emit(summary.model_dump())
    return ExitCode.SUCCESS


def _cmd_train_teacher(cfg: RunConfig) -> int:
    _emit(get_training_runner().train_teacher(cfg))
    return ExitCode.SUCCESS


def _cmd_train(cfg: RunConfig) -> int:
    _emit(get_training_runner().train(cfg))
    return ExitCode.SUCCESS


def _cmd_linear_eval(cfg: RunConfig) -> int:
    report = get_evaluation_runner().linear_eval(cfg)
    _emit({"top1": report.top1})
    return ExitCode.SUCCESS


def _cmd_gradcheck(cfg: RunConfig) -> int:
    report = get_gradcheck_runner().run(cfg)
    _emit(report.model_dump())
    if not report.passed:
        logger.error(f"Gradient check failed; replay with seed token {report.failing_seed}")
        return ExitCode.PROPERTY_FAILURE
    return ExitCode.SUCCESS


def _cmd_diagnose(cfg: RunConfig) -> int:
    _emit(get_diagnostics_runner().merge(cfg))
    return ExitCode.SUCCESS


HANDLERS: Dict[str, Callable[[RunConfig], int]] = {
    "gen-data": _cmd_gen_data,
    "train-teacher": _cmd_train_teacher,
    "train": _cmd_train,
    "linear-eval": _cmd_linear_eval,
    "gradcheck": _cmd_gradcheck,
    "diagnose": _cmd_diagnose,
}


def run_cli(argv: Optional[Sequence[str]] = None, config: Optional[Config] = None) -> int:
    """
    Parse ``argv``, run the subcommand and return its exit code.

    Exit codes: 0 success, 1 property failure, 2 usage or configuration
    error, 3 I/O or file-format error, 4 numeric abort.
    """
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else ExitCode.USAGE

    try:
        config = config or Config.from_env()
        cfg = resolve_config(args, config)
        if getattr(args, "dump_config", False):
            sys.stdout.write(cfg.dump())
            return ExitCode.SUCCESS
        return HANDLERS[args.command](cfg)
    except GSCLError as exc:
        logger.error(f"{args.command}: {exc}")
        if isinstance(exc, ConfigError):
            sys.stderr.write(args.usage)
        print(f"genscl {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        logger.error(f"{args.command}: I/O failure: {exc}")
        print(f"genscl {args.command}: error: {exc}", file=sys.stderr)
        return ExitCode.IO
    except ValueError as exc:
        logger.error(f"{args.command}: invalid input: {exc}")
        print(f"genscl {args.command}: error: {exc}", file=sys.stderr)
        return ExitCode.USAGE
