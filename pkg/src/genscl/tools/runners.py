"""
Subcommand runners: each wires a resolved RunConfig to the library and
returns a report model. Printing and exit codes belong to the CLI.
"""

import logging
import shutil
from pathlib import Path
from typing import Any, Dict, List, Optional

from ..core.config import RunConfig
from ..core.errors import ConfigError, FormatError, NumericAbortError
from ..core.models import (
    DatasetSummary,
    GradcheckReport,
    LinearEvalReport,
    NetworkRole,
    TrainLogRecord,
)
from ..core.numerics import Rng
from ..core.utils import read_csv, write_csv
from .data import Dataset, class_templates, generate_synthetic, load_dataset, save_dataset
from .loss import run_gradient_checks
from .network import EncoderParams, OracleTeacher, TeacherParams, load_checkpoint, save_checkpoint
from .trainer import Teacher, classifier_accuracy, linear_eval, train_contrastive, train_teacher

logger = logging.getLogger(__name__)


def _require_output(cfg: RunConfig, key: str = "out") -> Path:
    value = getattr(cfg, key)
    if not value:
        raise ConfigError(f"Missing required setting '{key}'")
    return Path(value)


def _network(path: str, role: NetworkRole) -> Any:
    networks = load_checkpoint(path)
    if role not in networks:
        raise ConfigError(f"{path}: checkpoint holds no {role.name.lower()} network")
    return networks[role]


class DatasetRunner:
    """Synthetic dataset generation."""

    def generate(self, cfg: RunConfig) -> DatasetSummary:
        """Generate a dataset from the config's dataset keys and write it to ``out``."""
        target = _require_output(cfg)
        params = cfg.dataset_params()
        ds = generate_synthetic(
            classes=params.classes,
            per_class=params.per_class,
            height=params.size,
            width=params.size,
            noise_std=params.noise_std,
            rng=Rng(params.seed),
            channels=params.channels,
            name=params.name,
        )
        save_dataset(ds, target)
        return ds.summary()


class TrainingRunner:
    """Teacher pretraining and contrastive training."""

    def train_teacher(self, cfg: RunConfig) -> Dict[str, Any]:
        cfg.require_paths("dataset")
        target = _require_output(cfg)
        ds = load_dataset(cfg.dataset)
        teacher = train_teacher(ds, cfg.teacher_train_config(), tau_soft=cfg.teacher_tau)
        save_checkpoint(target, {NetworkRole.TEACHER: teacher})
        accuracy = classifier_accuracy(
            teacher.predict_batch(ds.images_matrix()), ds.class_indices()
        )
        return {"checkpoint": str(target), "train_top1": accuracy}

    def resolve_teacher(self, cfg: RunConfig, ds: Dataset) -> Optional[Teacher]:
        """Oracle teacher, checkpointed teacher, or none."""
        if cfg.teacher == "oracle":
            templates = class_templates(ds.classes, ds.height, ds.width, ds.channels)
            return OracleTeacher(templates)
        if cfg.teacher == "checkpoint" or cfg.teacher_checkpoint:
            cfg.require_paths("teacher_checkpoint")
            teacher: TeacherParams = _network(cfg.teacher_checkpoint, NetworkRole.TEACHER)
            if teacher.in_dim != ds.input_dim:
                raise ConfigError(
                    f"Teacher expects {teacher.in_dim} inputs, dataset images have {ds.input_dim}"
                )
            return teacher
        return None

    def train(self, cfg: RunConfig) -> Dict[str, Any]:
        """
        Run contrastive training, write the encoder/projection checkpoint to
        ``out`` and the per-epoch metrics to ``metrics`` (default: ``out`` with
        a ``.csv`` suffix). On a numeric abort the metrics written so far are
        kept.
        """
        cfg.require_paths("dataset")
        target = _require_output(cfg)
        metrics = Path(cfg.metrics) if cfg.metrics else target.with_suffix(".csv")
        train_cfg = cfg.train_config()
        ds = load_dataset(cfg.dataset)
        teacher = self.resolve_teacher(cfg, ds)
        if train_cfg.uses_teacher and teacher is None:
            raise ConfigError(
                f"alpha_kd={train_cfg.alpha_kd} needs --teacher oracle or --teacher-checkpoint"
            )

        records: List[TrainLogRecord] = []
        try:
            result = train_contrastive(ds, train_cfg, teacher, on_epoch=records.append)
        except NumericAbortError:
            self._write_metrics(metrics, records)
            raise
        save_checkpoint(
            target, {NetworkRole.ENCODER: result.encoder, NetworkRole.PROJECTION: result.projection}
        )
        self._write_metrics(metrics, records)
        summary: Dict[str, Any] = {"checkpoint": str(target), "metrics": str(metrics)}
        if records:
            summary.update(records[-1].model_dump(exclude={"wall_clock_seconds"}))
        return summary

    @staticmethod
    def _write_metrics(path: Path, records: List[TrainLogRecord]) -> None:
        write_csv(path, TrainLogRecord.CSV_FIELDS, [record.csv_row() for record in records])
        logger.info(f"Wrote {len(records)} metric rows to {path}")


class EvaluationRunner:
    """Frozen-encoder linear evaluation."""

    def linear_eval(self, cfg: RunConfig) -> LinearEvalReport:
        cfg.require_paths("checkpoint", "dataset", "test_dataset")
        encoder: EncoderParams = _network(cfg.checkpoint, NetworkRole.ENCODER)
        ds_train = load_dataset(cfg.dataset)
        ds_test = load_dataset(cfg.test_dataset)
        return linear_eval(encoder, ds_train, ds_test, cfg.probe_config()).report


class GradcheckRunner:
    """Analytic anchor gradient vs finite differences on random instances."""

    def run(self, cfg: RunConfig) -> GradcheckReport:
        if cfg.mutate_sign:
            logger.warning("Sign mutation enabled; the check is expected to fail")
        return run_gradient_checks(cfg.trials, cfg.tolerance, cfg.seed, cfg.mutate_sign)


class DiagnosticsRunner:
    """Merge per-epoch mean_pos_dot series from several metrics files."""

    def merge(self, cfg: RunConfig) -> Dict[str, Any]:
        """
        Write ``epoch,<run>,<run>...`` to ``out``, one column per input named
        after the file stem. A single input is copied unchanged.

        Raises:
            ConfigError: If the inputs do not cover identical epochs.
            FormatError: If an input lacks the needed columns or has short rows.
        """
        cfg.require_paths("inputs")
        target = _require_output(cfg)
        if len(cfg.inputs) == 1:
            shutil.copyfile(cfg.inputs[0], target)
            return {"out": str(target), "runs": [Path(cfg.inputs[0]).stem]}

        names: List[str] = []
        columns: List[List[str]] = []
        epochs: Optional[List[str]] = None
        for source in cfg.inputs:
            header, rows = read_csv(source)
            if "epoch" not in header or "mean_pos_dot" not in header:
                raise FormatError(f"{source}: expected 'epoch' and 'mean_pos_dot' columns")
            epoch_at = header.index("epoch")
            dot_at = header.index("mean_pos_dot")
            for line, row in enumerate(rows, start=2):
                if len(row) <= max(epoch_at, dot_at):
                    raise FormatError(f"{source}: row {line} has {len(row)} fields, expected {len(header)}")
            run_epochs = [row[epoch_at] for row in rows]
            if epochs is None:
                epochs = run_epochs
            elif [int(e) for e in run_epochs] != [int(e) for e in epochs]:
                raise ConfigError(
                    f"{source}: epochs {run_epochs[:1]}..{run_epochs[-1:]} do not match "
                    f"{epochs[:1]}..{epochs[-1:]}"
                )
            name = Path(source).stem
            if name in names:
                name = f"{name}_{len(names)}"
            names.append(name)
            columns.append([row[dot_at] for row in rows])

        assert epochs is not None
        rows_out = [[epoch] + [column[i] for column in columns] for i, epoch in enumerate(epochs)]
        write_csv(target, ["epoch"] + names, rows_out)
        logger.info(f"Merged {len(names)} runs over {len(epochs)} epochs into {target}")
        return {"out": str(target), "runs": names}


_dataset_runner = None
_training_runner = None
_evaluation_runner = None
_gradcheck_runner = None
_diagnostics_runner = None


def get_dataset_runner() -> DatasetRunner:
    """Get the global dataset runner instance."""
    global _dataset_runner
    if _dataset_runner is None:
        _dataset_runner = DatasetRunner()
    return _dataset_runner


def get_training_runner() -> TrainingRunner:
    """Get the global training runner instance."""
    global _training_runner
    if _training_runner is None:
        _training_runner = TrainingRunner()
    return _training_runner


def get_evaluation_runner() -> EvaluationRunner:
    global _evaluation_runner
    if _evaluation_runner is None:
        _evaluation_runner = EvaluationRunner()
    return _evaluation_runner


def get_gradcheck_runner() -> GradcheckRunner:
    global _gradcheck_runner
    if _gradcheck_runner is None:
        _gradcheck_runner = GradcheckRunner()
    return _gradcheck_runner


def get_diagnostics_runner() -> DiagnosticsRunner:
    global _diagnostics_runner
    if _diagnostics_runner is None:
        _diagnostics_runner = DiagnosticsRunner()
    return _diagnostics_runner
