"""
Data models for the genscl toolkit.
"""

from enum import Enum
from typing import ClassVar, List, Optional, Tuple

from pydantic import BaseModel, Field


class MixKind(str, Enum):
    """Mixing operator m(·) applied after augmentation."""
    NONE = "none"
    MIXUP = "mixup"
    CUTMIX = "cutmix"


class LossKind(str, Enum):
    """Contrastive objective family."""
    SUPCON = "supcon"
    GENSCL = "genscl"


class NetworkRole(int, Enum):
    """Role tag stored with each network in a checkpoint file."""
    ENCODER = 0
    PROJECTION = 1
    TEACHER = 2


TEACHER_ONLY = "teacher-only"


class DatasetSummary(BaseModel):
    """Summary printed after dataset generation."""

    name: str = Field(..., description="Dataset name")
    classes: int = Field(..., description="Number of classes C")
    count: int = Field(..., description="Number of examples")
    per_class: List[int] = Field(default_factory=list, description="Examples per class")
    height: int = Field(..., description="Image height H")
    width: int = Field(..., description="Image width W")
    channels: int = Field(..., description="Image channels Ch")


class TrainLogRecord(BaseModel):
    """One row of the per-epoch metrics stream."""

    epoch: int = Field(..., description="Zero-based epoch index")
    loss: float = Field(..., description="Mean over batches of total loss / 2N")
    mean_pos_dot: float = Field(..., description="Mean z_i·z_j over label-similar pairs")
    tangent_factor: float = Field(..., description="Mean sqrt(1 - (z_i·z_j)^2) over all pairs")
    lr: float = Field(..., description="Learning rate used in this epoch")
    wall_clock_seconds: float = Field(default=0.0, description="Epoch duration")

    CSV_FIELDS: ClassVar[Tuple[str, ...]] = ("epoch", "loss", "mean_pos_dot", "eq4_factor", "lr")

    def csv_row(self) -> List[str]:
        """Values for the metrics CSV; wall-clock is excluded so files are reproducible.

        The CSV column for ``tangent_factor`` is headed ``eq4_factor``.
        """
        return [str(self.epoch), repr(self.loss), repr(self.mean_pos_dot),
                repr(self.tangent_factor), repr(self.lr)]


class LinearEvalReport(BaseModel):
    """Result structure for linear evaluation."""

    top1: float = Field(..., description="Top-1 accuracy on the test set")
    train_top1: Optional[float] = Field(default=None, description="Top-1 accuracy on the training set")


class GradcheckReport(BaseModel):
    """Result structure for the gradient property suite."""

    trials: int = Field(..., description="Number of random instances checked")
    max_rel_error: float = Field(..., description="Worst relative error observed")
    tolerance: float = Field(..., description="Pass threshold on the relative error")
    passed: bool = Field(..., description="Whether every instance was within tolerance")
    failing_seed: Optional[str] = Field(default=None, description="Replay token of the first failing instance")


class MiningComparison(BaseModel):
    """Matched no-mixing vs CutMix runs, compared on final mean positive-pair dot products."""

    seeds: List[int] = Field(default_factory=list, description="Seeds of the matched runs")
    margins: List[float] = Field(default_factory=list, description="final_dot(none) - final_dot(cutmix) per seed")
    slopes_none: List[float] = Field(default_factory=list, description="Linear-fit slope of the no-mixing series")
    slopes_cutmix: List[float] = Field(default_factory=list, description="Linear-fit slope of the CutMix series")
    majority_holds: bool = Field(default=False, description="Whether margins >= 0 in a majority of seeds")
    non_negative_margins: int = Field(default=0, description="Seeds whose margin is >= 0")
    rising_none: bool = Field(default=False, description="Whether every no-mixing slope is > 0")
    rising_cutmix: bool = Field(default=False, description="Whether every CutMix slope is > 0")

    def margins_hold(self, required: int) -> bool:
        """Whether at least ``required`` seeds have a non-negative margin."""
        return self.non_negative_margins >= required
