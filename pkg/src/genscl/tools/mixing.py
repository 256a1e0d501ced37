"""
MixUp / CutMix operators m(·) and the mixed multi-view batch.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..core.config import AugmentConfig
from ..core.errors import DimensionMismatchError, MixingError
from ..core.models import MixKind
from ..core.numerics import Rng
from .data import LabeledExample, augment

logger = logging.getLogger(__name__)

ImageLabel = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class MixedView:
    """An augmented (and possibly mixed) view x̃ with its soft label ỹ."""

    image: np.ndarray
    soft_label: np.ndarray
    source_index: int
    partner_index: Optional[int] = None
    lam: float = 1.0
    mix_kind: MixKind = MixKind.NONE
    pasted_area: int = 0

    def __post_init__(self) -> None:
        label = np.asarray(self.soft_label, dtype=np.float64)
        if np.any(label < 0.0) or abs(float(label.sum()) - 1.0) > 1e-12:
            raise ValueError(f"Soft label must be a probability distribution, got {label.tolist()}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"Mixing weight must lie in [0, 1], got {self.lam}")
        if self.mix_kind == MixKind.NONE and (self.partner_index is not None or self.lam != 1.0):
            raise ValueError("An unmixed view has lambda=1 and no partner")
        if self.mix_kind == MixKind.NONE and not (np.count_nonzero(label) == 1 and label.max() == 1.0):
            raise ValueError(f"An unmixed view carries a one-hot label, got {label.tolist()}")


@dataclass(frozen=True, eq=False)
class MultiViewBatch:
    """2N views; positions (2k, 2k+1) (zero-based) are the two views of example k."""

    views: Tuple[MixedView, ...]

    def __post_init__(self) -> None:
        views = tuple(self.views)
        object.__setattr__(self, "views", views)
        if not views or len(views) % 2:
            raise ValueError(f"A multi-view batch needs an even, positive number of views, got {len(views)}")
        for k in range(len(views) // 2):
            if views[2 * k].source_index != k or views[2 * k + 1].source_index != k:
                raise ValueError(f"Views {2 * k} and {2 * k + 1} must both derive from example {k}")

    def __len__(self) -> int:
        return len(self.views)

    def images_matrix(self) -> np.ndarray:
        return np.stack([view.image.reshape(-1) for view in self.views])

    def labels_matrix(self) -> np.ndarray:
        return np.stack([view.soft_label for view in self.views])

    def source_indices(self) -> np.ndarray:
        return np.array([view.source_index for view in self.views])


def _check_pair(a: ImageLabel, b: ImageLabel) -> None:
    if np.shape(a[0]) != np.shape(b[0]) or np.shape(a[1]) != np.shape(b[1]):
        raise DimensionMismatchError(
            f"Cannot mix {np.shape(a[0])}/{np.shape(a[1])} with {np.shape(b[0])}/{np.shape(b[1])}"
        )


def mixup(
    a: ImageLabel,
    b: ImageLabel,
    lam: float,
    source_index: int = 0,
    partner_index: int = 1,
) -> MixedView:
    """x̃ = λ·x_a + (1−λ)·x_b and ỹ = λ·y_a + (1−λ)·y_b."""
    _check_pair(a, b)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    image = lam * np.asarray(a[0], dtype=np.float64) + (1.0 - lam) * np.asarray(b[0], dtype=np.float64)
    label = lam * np.asarray(a[1], dtype=np.float64) + (1.0 - lam) * np.asarray(b[1], dtype=np.float64)
    return MixedView(
        image=image,
        soft_label=label,
        source_index=source_index,
        partner_index=partner_index,
        lam=float(lam),
        mix_kind=MixKind.MIXUP,
    )


def cutmix_box(
    height: int, width: int, lam_draw: float, center: Tuple[int, int]
) -> Tuple[int, int, int, int]:
    """Rectangle (top, bottom, left, right) of the pasted region, clipped to the image."""
    cut = math.sqrt(1.0 - lam_draw)
    cut_h = int(height * cut)
    cut_w = int(width * cut)
    cy, cx = center
    first_row = cy - cut_h // 2
    first_col = cx - cut_w // 2
    top = int(np.clip(first_row, 0, height))
    bottom = int(np.clip(first_row + cut_h, 0, height))
    left = int(np.clip(first_col, 0, width))
    right = int(np.clip(first_col + cut_w, 0, width))
    return top, bottom, left, right


def cutmix(
    a: ImageLabel,
    b: ImageLabel,
    lam_draw: float,
    rng: Optional[Rng] = None,
    source_index: int = 0,
    partner_index: int = 1,
    center: Optional[Tuple[int, int]] = None,
) -> MixedView:
    """
    Paste a rectangle of b into a.

    The box centre is uniform over the image unless ``center`` is given. The
    stored weight is recomputed from the clipped box, λ_eff = 1 − area/(H·W),
    and the soft label uses λ_eff.
    """
    _check_pair(a, b)
    if not 0.0 <= lam_draw <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam_draw}")
    image_a = np.asarray(a[0], dtype=np.float64)
    image_b = np.asarray(b[0], dtype=np.float64)
    height, width = image_a.shape[0], image_a.shape[1]
    if center is None:
        if rng is None:
            raise ValueError("cutmix needs an Rng when no box centre is given")
        center = (int(rng.integers(0, height)), int(rng.integers(0, width)))

    top, bottom, left, right = cutmix_box(height, width, lam_draw, center)
    image = image_a.copy()
    image[top:bottom, left:right] = image_b[top:bottom, left:right]
    area = (bottom - top) * (right - left)
    lam_eff = 1.0 - area / (height * width)
    label = lam_eff * np.asarray(a[1], dtype=np.float64) + (1.0 - lam_eff) * np.asarray(b[1], dtype=np.float64)
    return MixedView(
        image=image,
        soft_label=label,
        source_index=source_index,
        partner_index=partner_index,
        lam=lam_eff,
        mix_kind=MixKind.CUTMIX,
        pasted_area=area,
    )


def build_multiview_batch(
    batch: Sequence[LabeledExample],
    aug: AugmentConfig,
    mix_kind: MixKind,
    beta_alpha: float,
    rng: Rng,
) -> MultiViewBatch:
    """
    Build the 2N views x̃ = m(a(x)), ỹ = m(y) of a batch.

    Each (example k, view v) uses its own sub-stream ``rng.child(2k + v)``:
    augment, then (when mixing) mix with a partner drawn uniformly from the
    other N−1 examples, λ ~ Beta(beta_alpha, beta_alpha).
    """
    n = len(batch)
    if n < 1:
        raise ValueError("Cannot build views from an empty batch")
    mix_kind = MixKind(mix_kind)
    if mix_kind != MixKind.NONE and n < 2:
        raise MixingError("Mixing needs at least two examples per batch (no partner available)")

    views: List[MixedView] = []
    for k, example in enumerate(batch):
        for v in range(2):
            stream = rng.child(2 * k + v)
            image = augment(example.image, aug, stream)
            if mix_kind == MixKind.NONE:
                views.append(MixedView(image=image, soft_label=example.label.copy(), source_index=k))
                continue

            draw = int(stream.integers(0, n - 1))
            partner = draw if draw < k else draw + 1
            partner_image = augment(batch[partner].image, aug, stream)
            lam = float(stream.beta(beta_alpha, beta_alpha))
            mix_a = (image, example.label)
            mix_b = (partner_image, batch[partner].label)
            if mix_kind == MixKind.MIXUP:
                views.append(mixup(mix_a, mix_b, lam, source_index=k, partner_index=partner))
            else:
                views.append(cutmix(mix_a, mix_b, lam, stream, source_index=k, partner_index=partner))
    return MultiViewBatch(tuple(views))
