"""
Synthetic labeled image data, augmentation and batch sampling for genscl.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.config import AugmentConfig
from ..core.errors import (
    BadMagicError,
    ConfigError,
    DimensionMismatchError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from ..core.models import DatasetSummary
from ..core.numerics import Rng
from ..core.utils import ensure_parent

logger = logging.getLogger(__name__)


class Constants:
    MAGIC = b"GSCL"
    VERSION = 1
    # magic, version, H, W, Ch, C, count
    HEADER = struct.Struct("<4sIIIIIQ")


@dataclass(frozen=True, eq=False)
class LabeledExample:
    """An (x, y) pair: H×W×Ch image in [0, 1] and a one-hot label."""

    image: np.ndarray
    label: np.ndarray

    def __post_init__(self) -> None:
        image = np.asarray(self.image, dtype=np.float64)
        label = np.asarray(self.label, dtype=np.float64).reshape(-1)
        if image.ndim != 3:
            raise DimensionMismatchError(f"Image must be H×W×Ch, got shape {image.shape}")
        if np.any(image < 0.0) or np.any(image > 1.0) or not np.all(np.isfinite(image)):
            raise ValueError("Image entries must lie in [0, 1]")
        if np.count_nonzero(label == 1.0) != 1 or np.count_nonzero(label) != 1:
            raise ValueError(f"Label must be one-hot, got {label.tolist()}")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "label", label)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable ordered collection of labeled examples sharing one shape."""

    examples: Tuple[LabeledExample, ...]
    height: int
    width: int
    channels: int
    classes: int
    name: str = "dataset"
    _images: np.ndarray = field(init=False, repr=False)
    _labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        examples = tuple(self.examples)
        object.__setattr__(self, "examples", examples)
        if not examples:
            raise ValueError("Dataset needs at least one example")
        expected = (self.height, self.width, self.channels)
        for index, example in enumerate(examples):
            if example.image.shape != expected or example.label.size != self.classes:
                raise DimensionMismatchError(
                    f"Example {index} has image {example.image.shape} / label {example.label.size}, "
                    f"expected {expected} / {self.classes}"
                )
        images = np.stack([example.image for example in examples])
        labels = np.stack([example.label for example in examples])
        missing = np.flatnonzero(labels.sum(axis=0) == 0)
        if missing.size:
            raise ValueError(f"Classes without examples: {missing.tolist()}")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "_images", images)
        object.__setattr__(self, "_labels", labels)

    def __len__(self) -> int:
        return len(self.examples)

    def __eq__(self, other: object) -> bool:
        # The name is not part of the stored payload.
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.classes == other.classes
            and np.array_equal(self._images, other._images)
            and np.array_equal(self._labels, other._labels)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    @property
    def input_dim(self) -> int:
        return self.height * self.width * self.channels

    def images_matrix(self) -> np.ndarray:
        """All images flattened to rows, shape (n, H·W·Ch)."""
        return self._images.reshape(len(self), -1)

    def labels_matrix(self) -> np.ndarray:
        return self._labels

    def class_indices(self) -> np.ndarray:
        return np.argmax(self._labels, axis=1)

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        return Dataset(
            examples=tuple(self.examples[int(i)] for i in indices),
            height=self.height,
            width=self.width,
            channels=self.channels,
            classes=self.classes,
            name=name or self.name,
        )

    def split(self, test_fraction: float, rng: Rng) -> Tuple["Dataset", "Dataset"]:
        """Stratified train/test split; every class keeps at least one example on each side."""
        if not 0.0 < test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
        train_idx: List[int] = []
        test_idx: List[int] = []
        classes = self.class_indices()
        for c in range(self.classes):
            members = np.flatnonzero(classes == c)
            if members.size < 2:
                raise ValueError(f"Class {c} has too few examples to split")
            members = members[rng.permutation(members.size)]
            n_test = min(max(1, int(round(members.size * test_fraction))), members.size - 1)
            test_idx.extend(members[:n_test].tolist())
            train_idx.extend(members[n_test:].tolist())
        return (
            self.subset(sorted(train_idx), f"{self.name}-train"),
            self.subset(sorted(test_idx), f"{self.name}-test"),
        )

    def summary(self) -> DatasetSummary:
        return DatasetSummary(
            name=self.name,
            classes=self.classes,
            count=len(self),
            per_class=np.bincount(self.class_indices(), minlength=self.classes).tolist(),
            height=self.height,
            width=self.width,
            channels=self.channels,
        )


def one_hot(index: int, classes: int) -> np.ndarray:
    label = np.zeros(classes, dtype=np.float64)
    label[index] = 1.0
    return label


# Templates are left-right symmetric so a horizontal flip never changes the class.
def _grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    u = (np.arange(height, dtype=np.float64) + 0.5) / height
    v = (np.arange(width, dtype=np.float64) + 0.5) / width
    return np.meshgrid(u, v, indexing="ij")


_TEMPLATES: Tuple[Callable[[np.ndarray, np.ndarray], np.ndarray], ...] = (
    lambda u, v: 1.0 - u,
    lambda u, v: np.exp(-((u - 0.5) ** 2 + (v - 0.5) ** 2) / (2 * 0.15**2)),
    lambda u, v: (np.floor(u * 4) % 2).astype(np.float64),
    lambda u, v: ((u < 0.2) | (u > 0.8) | (v < 0.2) | (v > 0.8)).astype(np.float64),
    lambda u, v: (np.abs(v - 0.5) < 0.2).astype(np.float64),
    lambda u, v: u,
    lambda u, v: (np.abs(u - 0.5) < 0.2).astype(np.float64),
    lambda u, v: ((np.abs(u - v) < 0.15) | (np.abs(u + v - 1.0) < 0.15)).astype(np.float64),
    lambda u, v: (((u < 0.3) | (u > 0.7)) & ((v < 0.3) | (v > 0.7))).astype(np.float64),
    lambda u, v: np.clip(1.0 - 2.0 * np.abs(v - 0.5), 0.0, 1.0) * u,
)

MAX_CLASSES = len(_TEMPLATES)


def class_templates(classes: int, height: int, width: int, channels: int = 1) -> np.ndarray:
    """
    Deterministic class templates, shape (C, H, W, Ch), values in [0, 1].

    Raises:
        ConfigError: If more classes are requested than templates exist.
    """
    if classes > MAX_CLASSES:
        raise ConfigError(f"Only {MAX_CLASSES} class templates are available, got C={classes}")
    u, v = _grid(height, width)
    planes = [np.clip(_TEMPLATES[c](u, v), 0.0, 1.0) for c in range(classes)]
    return np.repeat(np.stack(planes)[..., None], channels, axis=3)


def generate_synthetic(
    classes: int,
    per_class: int,
    height: int,
    width: int,
    noise_std: float,
    rng: Rng,
    channels: int = 1,
    name: str = "synthetic",
) -> Dataset:
    """
    Generate a class-template dataset with clipped Gaussian pixel noise.

    Examples are ordered class by class. Identical (seed, parameters) give a
    bit-identical dataset.
    """
    if classes < 2:
        raise ConfigError(f"Need at least 2 classes, got {classes}")
    if height < 4 or width < 4:
        raise ConfigError(f"Images must be at least 4×4, got {height}×{width}")
    if per_class < 1:
        raise ConfigError(f"per_class must be positive, got {per_class}")
    if noise_std < 0:
        raise ConfigError(f"noise_std must be non-negative, got {noise_std}")

    templates = class_templates(classes, height, width, channels)
    examples = []
    for c in range(classes):
        label = one_hot(c, classes)
        for _ in range(per_class):
            image = templates[c]
            if noise_std > 0:
                image = np.clip(image + rng.normal(0.0, noise_std, size=image.shape), 0.0, 1.0)
            examples.append(LabeledExample(image=image.copy(), label=label))
    logger.info(f"Generated dataset '{name}': {classes} classes × {per_class}, {height}×{width}×{channels}")
    return Dataset(tuple(examples), height, width, channels, classes, name)


def augment(x: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """
    Apply a(·): pad-then-random-crop, horizontal flip, additive clipped noise.

    The output has the input's shape and stays in [0, 1]. With every transform
    disabled the input is returned unchanged (as a copy).
    """
    out = np.array(x, dtype=np.float64, copy=True)
    height, width = out.shape[0], out.shape[1]
    cfg.validate_for(height, width)

    if cfg.enable_crop and cfg.crop_pad > 0:
        pad = cfg.crop_pad
        padded = np.pad(out, ((pad, pad), (pad, pad), (0, 0)))
        top = int(rng.integers(0, 2 * pad + 1))
        left = int(rng.integers(0, 2 * pad + 1))
        out = padded[top:top + height, left:left + width, :].copy()

    if cfg.enable_flip and rng.uniform() < cfg.flip_prob:
        out = out[:, ::-1, :].copy()

    if cfg.enable_noise and cfg.noise_std > 0:
        out = np.clip(out + rng.normal(0.0, cfg.noise_std, size=out.shape), 0.0, 1.0)

    return out


def sample_batch(ds: Dataset, batch_size: int, rng: Rng) -> List[LabeledExample]:
    """Draw N examples without replacement."""
    if batch_size < 1 or batch_size > len(ds):
        raise ValueError(f"Batch size {batch_size} must be in [1, {len(ds)}]")
    indices = rng.permutation(len(ds))[:batch_size]
    return [ds.examples[int(i)] for i in indices]


def epoch_batches(
    ds: Dataset, batch_size: int, rng: Rng, min_batch: int = 1
) -> Iterator[np.ndarray]:
    """
    Yield index batches covering every example exactly once, in seeded order.

    A trailing remainder smaller than ``min_batch`` is folded into the
    previous batch.
    """
    if batch_size < 1 or batch_size > len(ds):
        raise ValueError(f"Batch size {batch_size} must be in [1, {len(ds)}]")
    order = rng.permutation(len(ds))
    bounds = list(range(0, len(ds), batch_size)) + [len(ds)]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < min_batch:
        del bounds[-2]
    for start, stop in zip(bounds[:-1], bounds[1:]):
        yield order[start:stop]


def save_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    """Write a dataset in the little-endian GSCL binary format."""
    header = Constants.HEADER.pack(
        Constants.MAGIC, Constants.VERSION, ds.height, ds.width, ds.channels, ds.classes, len(ds)
    )
    payload = np.concatenate([ds.labels_matrix(), ds.images_matrix()], axis=1)
    target = ensure_parent(path)
    with open(target, "wb") as handle:
        handle.write(header)
        handle.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())
    logger.info(f"Saved {len(ds)} examples to {target}")


def load_dataset(path: Union[str, Path]) -> Dataset:
    """
    Read a dataset written by :func:`save_dataset`.

    Raises:
        BadMagicError, UnsupportedVersionError, TruncatedFileError, FormatError
    """
    source = Path(path)
    data = source.read_bytes()
    if len(data) >= 4 and data[:4] != Constants.MAGIC:
        raise BadMagicError(f"{source}: not a GSCL dataset (magic {data[:4]!r})")
    if len(data) < Constants.HEADER.size:
        raise TruncatedFileError(f"{source}: header truncated ({len(data)} bytes)")
    _, version, height, width, channels, classes, count = Constants.HEADER.unpack_from(data)
    if version != Constants.VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported dataset version {version}")

    row = classes + height * width * channels
    expected = Constants.HEADER.size + 8 * row * count
    if len(data) < expected:
        raise TruncatedFileError(f"{source}: expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise FormatError(f"{source}: {len(data) - expected} trailing bytes after payload")

    payload = np.frombuffer(data, dtype="<f8", offset=Constants.HEADER.size).reshape(count, row)
    examples = []
    for values in payload:
        examples.append(
            LabeledExample(
                image=values[classes:].astype(np.float64).reshape(height, width, channels),
                label=values[:classes].astype(np.float64),
            )
        )
    try:
        return Dataset(tuple(examples), height, width, channels, classes, source.stem)
    except ValueError as exc:
        raise FormatError(f"{source}: invalid dataset payload: {exc}") from exc
