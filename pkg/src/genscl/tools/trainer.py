"""
Optimization: SGD with momentum and weight decay, warmup + cosine schedule,
the contrastive training loop, teacher pretraining and linear evaluation.

Randomness is drawn from fixed sub-streams of ``Rng(cfg.seed)``:
``child(STREAM_INIT, k)`` for initialization of network k,
``child(STREAM_SHUFFLE, epoch)`` for batch order and
``child(STREAM_BATCH, epoch, step)`` for the views of one step.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, NoReturn, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.config import ProbeConfig, TrainConfig
from ..core.errors import ConfigError, DimensionMismatchError, NumericAbortError, raise_logged
from ..core.models import LinearEvalReport, LossKind, MiningComparison, MixKind, TrainLogRecord
from ..core.numerics import Rng
from .data import Dataset, epoch_batches
from .loss import (
    ProjectedBatch,
    contrastive_loss,
    distillation_objective,
    gradient_contribution_stats,
    loss_gradient_z,
    loss_weights,
)
from .mixing import build_multiview_batch
from .network import (
    ArrayDict,
    EncoderParams,
    LinearProbeParams,
    OracleTeacher,
    ProjectionParams,
    TeacherParams,
    backward_contrastive,
    backward_mlp,
    encode_batch,
    forward_contrastive,
    forward_mlp,
    init_encoder,
    init_probe,
    init_projection,
    init_teacher,
    param_checksum,
)

logger = logging.getLogger(__name__)

STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_BATCH = 2
STREAM_PROBE = 3

Teacher = Union[TeacherParams, OracleTeacher]
EpochCallback = Callable[[TrainLogRecord], None]


@dataclass
class TrainResult:
    """Trained networks and the per-epoch log."""

    encoder: EncoderParams
    projection: ProjectionParams
    records: List[TrainLogRecord] = field(default_factory=list)


@dataclass
class ProbeResult:
    """Trained probe and its accuracy report."""

    probe: LinearProbeParams
    report: LinearEvalReport

    @property
    def top1(self) -> float:
        return self.report.top1


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """
    Learning rate for ``epoch``: linear warmup lr·(e+1)/w over the first w
    epochs, then cosine annealing lr·½(1 + cos(π·(e − w)/(E − w))).
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"Epoch {epoch} outside [0, {cfg.epochs})")
    warmup = cfg.warmup_epochs
    if epoch < warmup:
        return cfg.lr * (epoch + 1) / warmup
    span = cfg.epochs - warmup
    progress = (epoch - warmup) / span if span > 0 else 0.0
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> Tuple[ArrayDict, ArrayDict]:
    """
    One momentum step per array: g = grad + wd·p, v = m·v + g, p = p − lr·v.

    Missing velocity entries start at zero. Inputs are not modified.

    Returns:
        (updated params, updated velocity)
    """
    new_params: ArrayDict = {}
    new_velocity: ArrayDict = {}
    for name, value in params.items():
        if name not in grads:
            raise KeyError(f"No gradient for parameter '{name}'")
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != value.shape:
            raise DimensionMismatchError(
                f"Gradient shape {grad.shape} does not match parameter '{name}' {value.shape}"
            )
        g = grad + weight_decay * value
        v = momentum * velocity.get(name, np.zeros_like(value)) + g
        new_params[name] = value - lr * v
        new_velocity[name] = v
    return new_params, new_velocity


def _all_finite(arrays: Mapping[str, np.ndarray]) -> bool:
    return all(bool(np.all(np.isfinite(array))) for array in arrays.values())


def _teacher_classes(teacher: Teacher) -> int:
    return teacher.classes if isinstance(teacher, OracleTeacher) else teacher.out_dim


def _abort(message: str, rng: Rng, records: Sequence[TrainLogRecord]) -> NoReturn:
    last = records[-1] if records else None
    raise_logged(
        NumericAbortError(
            f"{message} (replay seed {rng.replay_token})",
            replay_seed=rng.replay_token,
            last_record=last,
        )
    )


def _init_networks(ds: Dataset, cfg: TrainConfig) -> Tuple[EncoderParams, ProjectionParams]:
    init = Rng(cfg.seed).child(STREAM_INIT)
    encoder = init_encoder(ds.input_dim, cfg.hidden_dim, cfg.embed_dim, init.child(0))
    projection = init_projection(cfg.embed_dim, cfg.proj_dim, init.child(1))
    return encoder, projection


def train_contrastive(
    ds: Dataset,
    cfg: TrainConfig,
    teacher: Optional[Teacher] = None,
    on_epoch: Optional[EpochCallback] = None,
) -> TrainResult:
    """
    Train f∘g on ``ds`` with the objective selected by ``cfg``.

    Each step builds 2N views, runs the forward pass, computes the loss and
    backpropagates the full-graph gradient of total/2N. The teacher, if any,
    is only queried for predictions and never updated.

    Raises:
        ConfigError: If a teacher is required but missing or has the wrong class count.
        NumericAbortError: On a non-finite loss or gradient.
    """
    cfg.augment.validate_for(ds.height, ds.width)
    if cfg.batch_size > len(ds):
        raise ConfigError(f"batch_size={cfg.batch_size} exceeds the dataset size {len(ds)}")
    if cfg.uses_teacher:
        if teacher is None:
            raise ConfigError(f"alpha_kd={cfg.alpha_kd} requires a teacher")
        if _teacher_classes(teacher) != ds.classes:
            raise ConfigError(
                f"Teacher predicts {_teacher_classes(teacher)} classes, dataset has {ds.classes}"
            )

    encoder, projection = _init_networks(ds, cfg)
    teacher_sum = param_checksum(teacher) if isinstance(teacher, TeacherParams) else None
    params = {**encoder.named_arrays("encoder"), **projection.named_arrays("projection")}
    velocity: ArrayDict = {}
    records: List[TrainLogRecord] = []
    root = Rng(cfg.seed)
    min_batch = 2 if cfg.mix_kind != MixKind.NONE else 1

    logger.info(
        f"Training {cfg.loss.value} (alpha_kd={cfg.alpha_kd}, mix={cfg.mix_kind.value}) "
        f"for {cfg.epochs} epochs on {len(ds)} examples"
    )
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = lr_at(cfg, epoch)
        loss_sum = 0.0
        batches = 0
        pos_dot_sum = 0.0
        pos_pairs = 0
        factor_sum = 0.0
        pairs = 0

        order = epoch_batches(ds, cfg.batch_size, root.child(STREAM_SHUFFLE, epoch), min_batch)
        for step, indices in enumerate(order):
            stream = root.child(STREAM_BATCH, epoch, step)
            batch = [ds.examples[int(i)] for i in indices]
            views = build_multiview_batch(batch, cfg.augment, cfg.mix_kind, cfg.beta_alpha, stream)
            images = views.images_matrix()
            _, w, z, cache = forward_contrastive(encoder, projection, images)
            if not np.all(np.isfinite(w)):
                _abort(f"Non-finite embeddings at epoch {epoch}, step {step}", stream, records)
            preds = teacher.predict_batch(images) if cfg.uses_teacher and teacher is not None else None
            pb = ProjectedBatch(w=w, z=z, labels=views.labels_matrix(), tau=cfg.tau, teacher_preds=preds)

            breakdown = contrastive_loss(pb, cfg.loss, cfg.alpha_kd, cfg.pos_threshold)
            if not math.isfinite(breakdown.total):
                _abort(f"Non-finite loss at epoch {epoch}, step {step}", stream, records)
            d_z = loss_gradient_z(pb, loss_weights(pb, cfg.loss, cfg.alpha_kd)) / pb.size
            grads = backward_contrastive(encoder, projection, cache, d_z=d_z)
            if not _all_finite(grads):
                _abort(f"Non-finite gradient at epoch {epoch}, step {step}", stream, records)

            params, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            if not _all_finite(params):
                _abort(f"Non-finite parameters after epoch {epoch}, step {step}", stream, records)
            encoder = encoder.with_arrays(params, "encoder")
            projection = projection.with_arrays(params, "projection")

            stats = gradient_contribution_stats(pb, cfg.pos_threshold)
            n_pairs = pb.size * (pb.size - 1) // 2
            loss_sum += breakdown.total / pb.size
            batches += 1
            if stats.pos_pairs:
                pos_dot_sum += stats.mean_pos_dot * stats.pos_pairs
                pos_pairs += stats.pos_pairs
            factor_sum += stats.tangent_factor * n_pairs
            pairs += n_pairs

        record = TrainLogRecord(
            epoch=epoch,
            loss=loss_sum / batches,
            mean_pos_dot=pos_dot_sum / pos_pairs if pos_pairs else math.nan,
            tangent_factor=factor_sum / pairs,
            lr=lr,
            wall_clock_seconds=time.perf_counter() - started,
        )
        records.append(record)
        logger.info(
            f"epoch {epoch}: loss={record.loss:.6f} mean_pos_dot={record.mean_pos_dot:.4f} "
            f"tangent_factor={record.tangent_factor:.4f} lr={lr:.5f}"
        )
        if on_epoch is not None:
            on_epoch(record)

    if teacher_sum is not None and param_checksum(teacher) != teacher_sum:
        raise RuntimeError("Teacher parameters changed during contrastive training")
    return TrainResult(encoder=encoder, projection=projection, records=records)


def classifier_accuracy(logits: np.ndarray, class_indices: np.ndarray) -> float:
    """Top-1 accuracy; ties resolve to the lowest class index."""
    if len(class_indices) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == class_indices))


def _fit_classifier(
    params: Union[TeacherParams, LinearProbeParams],
    prefix: str,
    inputs: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    root: Rng,
    shuffle_stream: int,
    schedule: Callable[[int], float],
    dataset: Dataset,
) -> Union[TeacherParams, LinearProbeParams]:
    """Softmax cross-entropy training shared by teacher pretraining and the probe."""
    arrays = params.named_arrays(prefix)
    velocity: ArrayDict = {}
    for epoch in range(cfg.epochs):
        lr = schedule(epoch)
        loss_sum = 0.0
        batches = 0
        shuffle = root.child(shuffle_stream, epoch)
        for indices in epoch_batches(dataset, cfg.batch_size, shuffle):
            logits, cache = forward_mlp(params, inputs[indices])
            loss, d_logits = distillation_objective(logits, targets[indices])
            grads, _ = backward_mlp(params, cache, d_logits, prefix)
            if not (math.isfinite(loss) and _all_finite(grads)):
                _abort(f"Non-finite classifier loss at epoch {epoch}", shuffle, [])
            arrays, velocity = sgd_step(arrays, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            if not _all_finite(arrays):
                _abort(f"Non-finite classifier parameters at epoch {epoch}", shuffle, [])
            params = params.with_arrays(arrays, prefix)
            loss_sum += loss
            batches += 1
        logger.debug(f"{prefix} epoch {epoch}: cross-entropy={loss_sum / max(batches, 1):.6f} lr={lr:.5f}")
    return params


def train_teacher(ds: Dataset, cfg: TrainConfig, tau_soft: float = 1.0) -> TeacherParams:
    """
    Pretrain a teacher classifier on raw images with softmax cross-entropy,
    using the contrastive recipe's optimizer and schedule.
    """
    if cfg.batch_size > len(ds):
        raise ConfigError(f"batch_size={cfg.batch_size} exceeds the dataset size {len(ds)}")
    root = Rng(cfg.seed)
    teacher = init_teacher(ds.input_dim, cfg.hidden_dim, ds.classes, root.child(STREAM_INIT, 2), tau_soft)
    teacher = _fit_classifier(
        teacher,
        "teacher",
        ds.images_matrix(),
        ds.labels_matrix(),
        cfg,
        root,
        STREAM_SHUFFLE,
        lambda epoch: lr_at(cfg, epoch),
        ds,
    )
    if cfg.epochs:
        logits, _ = forward_mlp(teacher, ds.images_matrix())
        accuracy = classifier_accuracy(logits, ds.class_indices())
        logger.info(f"Teacher training accuracy after {cfg.epochs} epochs: {accuracy:.4f}")
    return teacher


def linear_eval(
    encoder: EncoderParams,
    ds_train: Dataset,
    ds_test: Dataset,
    cfg: ProbeConfig,
    probe: Optional[LinearProbeParams] = None,
) -> ProbeResult:
    """
    Train a linear probe on frozen encoder outputs h = f(x) and report top-1.

    No augmentation or mixing; constant learning rate.

    Raises:
        DimensionMismatchError: On image-size or class-count mismatches between
            the encoder, the probe and the two datasets.
    """
    if ds_train.input_dim != encoder.in_dim or ds_test.input_dim != encoder.in_dim:
        raise DimensionMismatchError(
            f"Encoder expects {encoder.in_dim} inputs, datasets have "
            f"{ds_train.input_dim} and {ds_test.input_dim}"
        )
    if ds_train.classes != ds_test.classes:
        raise DimensionMismatchError(
            f"Train set has {ds_train.classes} classes, test set has {ds_test.classes}"
        )
    probe = probe if probe is not None else init_probe(encoder.out_dim, ds_train.classes)
    if probe.out_dim != ds_train.classes or probe.in_dim != encoder.out_dim:
        raise DimensionMismatchError(
            f"Probe maps {probe.in_dim} → {probe.out_dim}, expected {encoder.out_dim} → {ds_train.classes}"
        )

    frozen = param_checksum(encoder)
    features_train = encode_batch(encoder, ds_train.images_matrix())
    features_test = encode_batch(encoder, ds_test.images_matrix())
    recipe = TrainConfig(
        epochs=cfg.epochs,
        batch_size=min(cfg.batch_size, len(ds_train)),
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        warmup_epochs=0,
        seed=cfg.seed,
    )
    probe = _fit_classifier(
        probe,
        "probe",
        features_train,
        ds_train.labels_matrix(),
        recipe,
        Rng(cfg.seed),
        STREAM_PROBE,
        lambda epoch: cfg.lr,
        ds_train,
    )
    if param_checksum(encoder) != frozen:
        raise RuntimeError("Encoder parameters changed during linear evaluation")

    train_logits, _ = forward_mlp(probe, features_train)
    test_logits, _ = forward_mlp(probe, features_test)
    report = LinearEvalReport(
        top1=classifier_accuracy(test_logits, ds_test.class_indices()),
        train_top1=classifier_accuracy(train_logits, ds_train.class_indices()),
    )
    logger.info(f"Linear evaluation: top1={report.top1:.4f} (train {report.train_top1:.4f})")
    return ProbeResult(probe=probe, report=report)


def _trend_slope(series: Sequence[float]) -> float:
    values = np.asarray(series, dtype=np.float64)
    if values.size < 2 or not np.all(np.isfinite(values)):
        return math.nan
    return float(np.polyfit(np.arange(values.size, dtype=np.float64), values, 1)[0])


def compare_mining_dynamics(ds: Dataset, cfg: TrainConfig, seeds: Sequence[int]) -> MiningComparison:
    """
    Matched runs without mixing and with CutMix (generalized loss) per seed.

    Reports final mean_pos_dot(none) − mean_pos_dot(cutmix) per seed, the
    linear-fit slope of each series and whether the margin is non-negative in
    a majority of seeds. On template data the CutMix series starts
    near its plateau, so its slope can be flat or negative.
    """
    margins: List[float] = []
    slopes_none: List[float] = []
    slopes_cutmix: List[float] = []
    series: Dict[MixKind, List[float]] = {}
    for seed in seeds:
        for kind in (MixKind.NONE, MixKind.CUTMIX):
            run_cfg = cfg.model_copy(
                update={"seed": seed, "mix_kind": kind, "loss": LossKind.GENSCL, "alpha_kd": 0.0}
            )
            result = train_contrastive(ds, run_cfg)
            series[kind] = [record.mean_pos_dot for record in result.records]
        margins.append(series[MixKind.NONE][-1] - series[MixKind.CUTMIX][-1])
        slopes_none.append(_trend_slope(series[MixKind.NONE]))
        slopes_cutmix.append(_trend_slope(series[MixKind.CUTMIX]))
        logger.info(
            f"seed {seed}: final dot none={series[MixKind.NONE][-1]:.4f} "
            f"cutmix={series[MixKind.CUTMIX][-1]:.4f} margin={margins[-1]:+.4f} "
            f"slope none={slopes_none[-1]:+.3e} cutmix={slopes_cutmix[-1]:+.3e}"
        )
    non_negative = sum(1 for margin in margins if margin >= 0.0)
    holds = non_negative * 2 > len(margins)
    rising_none = bool(slopes_none) and all(slope > 0.0 for slope in slopes_none)
    rising_cutmix = bool(slopes_cutmix) and all(slope > 0.0 for slope in slopes_cutmix)
    if not rising_cutmix:
        logger.warning(f"CutMix mean_pos_dot does not rise in every seed: slopes={slopes_cutmix}")
    return MiningComparison(
        seeds=list(seeds),
        margins=margins,
        slopes_none=slopes_none,
        slopes_cutmix=slopes_cutmix,
        majority_holds=holds,
        non_negative_margins=non_negative,
        rising_none=rising_none,
        rising_cutmix=rising_cutmix,
    )
