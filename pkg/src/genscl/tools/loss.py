"""
Contrastive objectives over a projected multi-view batch.

Implements the supervised contrastive loss, the generalized (label-similarity
weighted) loss, its distillation-augmented form, the closed-form anchor
gradient, full-graph gradients w.r.t. every embedding, and the z_i·z_j
gradient-contribution diagnostic.

For anchor i over contrasts A(i) = I \\ {i}:

    P_ij  = exp(z_i·z_j/τ) / Σ_{a∈A(i)} exp(z_i·z_a/τ)
    L_i   = −Σ_{j∈A(i)} M_ij · log P_ij

with M_ij = sim(ỹ_i, ỹ_j)/|A(i)| (generalized), the same plus
α_kd·sim(p^t_i, p^t_j)/|A(i)| (distillation), or 1/|P(i)| on positives
(supervised). Every loss below is one choice of M.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from ..core.errors import DegenerateVectorError, DimensionMismatchError, LabelError
from ..core.models import TEACHER_ONLY, GradcheckReport, LossKind
from ..core.numerics import Rng, cosine_similarity_matrix, l2_normalize_rows

logger = logging.getLogger(__name__)

AlphaKD = Union[float, str]


@dataclass(frozen=True, eq=False)
class ProjectedBatch:
    """Embeddings of 2N views: w before normalization, z = w/‖w‖, soft labels, optional teacher predictions."""

    w: np.ndarray
    z: np.ndarray
    labels: np.ndarray
    tau: float
    teacher_preds: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        w = np.asarray(self.w, dtype=np.float64)
        z = np.asarray(self.z, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.float64)
        if w.ndim != 2 or z.shape != w.shape or labels.ndim != 2 or labels.shape[0] != w.shape[0]:
            raise DimensionMismatchError(
                f"Inconsistent batch shapes: w {w.shape}, z {z.shape}, labels {labels.shape}"
            )
        if w.shape[0] < 2:
            raise ValueError("A projected batch needs at least two views")
        if not self.tau > 0.0:
            raise ValueError(f"Temperature must be positive, got {self.tau}")
        if np.any(np.abs(np.linalg.norm(z, axis=1) - 1.0) > 1e-10):
            raise ValueError("Every z must be unit-norm")
        _check_distributions(labels, "labels")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "labels", labels)
        if self.teacher_preds is not None:
            preds = np.asarray(self.teacher_preds, dtype=np.float64)
            if preds.shape[0] != w.shape[0]:
                raise DimensionMismatchError(
                    f"Got {preds.shape[0]} teacher predictions for {w.shape[0]} views"
                )
            _check_distributions(preds, "teacher_preds")
            object.__setattr__(self, "teacher_preds", preds)

    @classmethod
    def from_embeddings(
        cls,
        w: np.ndarray,
        labels: np.ndarray,
        tau: float,
        teacher_preds: Optional[np.ndarray] = None,
    ) -> "ProjectedBatch":
        """Normalize w row-wise and build the batch."""
        z, _ = l2_normalize_rows(w)
        return cls(w=w, z=z, labels=labels, tau=tau, teacher_preds=teacher_preds)

    @property
    def size(self) -> int:
        return self.w.shape[0]

    def with_w(self, w: np.ndarray) -> "ProjectedBatch":
        return ProjectedBatch.from_embeddings(w, self.labels, self.tau, self.teacher_preds)

    def permuted(self, order: np.ndarray) -> "ProjectedBatch":
        preds = None if self.teacher_preds is None else self.teacher_preds[order]
        return ProjectedBatch(self.w[order], self.z[order], self.labels[order], self.tau, preds)


def _check_distributions(rows: np.ndarray, name: str) -> None:
    if np.any(rows < 0.0) or np.any(np.abs(rows.sum(axis=1) - 1.0) > 1e-10):
        raise ValueError(f"Every row of {name} must be a probability distribution")


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    """Total loss, per-anchor terms and the similarity spaces they were computed from."""

    total: float
    per_anchor: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    mean_pos_dot: float
    Pt: Optional[np.ndarray] = None


@dataclass(frozen=True)
class AnchorGradient:
    """∂L_i/∂w_i for one anchor."""

    anchor: int
    d_w: np.ndarray


@dataclass(frozen=True)
class ContributionStats:
    """z_i·z_j statistics over unordered pairs i < j."""

    mean_pos_dot: float
    std_pos_dot: float
    pos_pairs: int
    mean_all_dot: float
    std_all_dot: float
    tangent_factor: float
    tangent_factor_pos: float


def _off_diagonal(matrix: np.ndarray) -> np.ndarray:
    """Drop the diagonal: (n, n) → (n, n−1), row i listing j ∈ A(i) in ascending order."""
    n = matrix.shape[0]
    mask = ~np.eye(n, dtype=bool)
    return matrix[mask].reshape(n, n - 1)


def _log_latent_softmax(pb: ProjectedBatch) -> np.ndarray:
    """log P_ij as an (n, n) matrix via log-sum-exp; the diagonal is −inf."""
    logits = (pb.z @ pb.z.T) / pb.tau
    np.fill_diagonal(logits, -np.inf)
    peak = logits.max(axis=1, keepdims=True)
    lse = peak + np.log(np.exp(logits - peak).sum(axis=1, keepdims=True))
    return logits - lse


def latent_softmax(pb: ProjectedBatch, i: int) -> np.ndarray:
    """Row P_i· over j ∈ A(i), in ascending j."""
    if not 0 <= i < pb.size:
        raise IndexError(f"Anchor {i} outside batch of {pb.size}")
    return np.exp(_off_diagonal(_log_latent_softmax(pb))[i])


def label_similarity(pb: ProjectedBatch) -> np.ndarray:
    """(n, n) matrix sim(ỹ_i, ỹ_j)."""
    return cosine_similarity_matrix(pb.labels)


def teacher_similarity(pb: ProjectedBatch) -> np.ndarray:
    if pb.teacher_preds is None:
        raise ValueError("Batch carries no teacher predictions")
    return cosine_similarity_matrix(pb.teacher_preds)


def _is_one_hot(labels: np.ndarray) -> bool:
    return bool(np.all((labels == 0.0) | (labels == 1.0)) and np.all(labels.sum(axis=1) == 1.0))


def _positive_mask(pb: ProjectedBatch) -> np.ndarray:
    same = np.all(pb.labels[:, None, :] == pb.labels[None, :, :], axis=2)
    np.fill_diagonal(same, False)
    return same


def _supcon_weights(pb: ProjectedBatch) -> np.ndarray:
    if not _is_one_hot(pb.labels):
        raise LabelError(
            "The supervised contrastive loss is undefined for soft labels; use loss=genscl"
        )
    positives = _positive_mask(pb)
    counts = positives.sum(axis=1)
    # Anchors without positives contribute 0.
    scale = np.divide(1.0, counts, out=np.zeros(pb.size), where=counts > 0)
    return positives * scale[:, None]


def _genscl_weights(pb: ProjectedBatch) -> np.ndarray:
    try:
        sims = label_similarity(pb)
    except DegenerateVectorError as exc:
        raise DegenerateVectorError(f"Label similarity undefined: {exc}") from exc
    np.fill_diagonal(sims, 0.0)
    return sims / (pb.size - 1)


def _kd_weights(pb: ProjectedBatch, alpha_kd: AlphaKD) -> np.ndarray:
    if alpha_kd == TEACHER_ONLY:
        if pb.teacher_preds is None:
            raise ValueError("Teacher-only distillation needs teacher predictions")
        sims = teacher_similarity(pb)
        np.fill_diagonal(sims, 0.0)
        return sims / (pb.size - 1)
    alpha = float(alpha_kd)
    if alpha < 0.0:
        raise ValueError(f"alpha_kd must be non-negative, got {alpha}")
    weights = _genscl_weights(pb)
    if pb.teacher_preds is None:
        if alpha > 0.0:
            raise ValueError("alpha_kd > 0 needs teacher predictions")
        return weights
    teacher = teacher_similarity(pb)
    np.fill_diagonal(teacher, 0.0)
    return weights + alpha * (teacher / (pb.size - 1))


def _breakdown(pb: ProjectedBatch, weights: np.ndarray, with_teacher: bool, threshold: float) -> LossBreakdown:
    log_p = _log_latent_softmax(pb)
    terms = -(_off_diagonal(weights) * _off_diagonal(log_p))
    per_anchor = terms.sum(axis=1)
    total = 0.0
    for value in per_anchor:  # ascending anchor order
        total += float(value)
    pt = None
    if with_teacher and pb.teacher_preds is not None:
        pt = _off_diagonal(teacher_similarity(pb))
    stats = gradient_contribution_stats(pb, threshold)
    return LossBreakdown(
        total=total,
        per_anchor=per_anchor,
        Y=_off_diagonal(label_similarity(pb)),
        Z=np.exp(_off_diagonal(log_p)),
        mean_pos_dot=stats.mean_pos_dot,
        Pt=pt,
    )


def supcon_loss(pb: ProjectedBatch, pos_threshold: float = 0.5) -> LossBreakdown:
    """
    Supervised contrastive loss over one-hot labels.

    L_i = −(1/|P(i)|) Σ_{j∈P(i)} log P_ij, P(i) = {p ∈ A(i): ỹ_p = ỹ_i};
    anchors with an empty P(i) contribute 0.

    Raises:
        LabelError: If any label is not one-hot.
    """
    return _breakdown(pb, _supcon_weights(pb), False, pos_threshold)


def genscl_loss(pb: ProjectedBatch, pos_threshold: float = 0.5) -> LossBreakdown:
    """L_i = −(1/|A(i)|) Σ_{j∈A(i)} sim(ỹ_i, ỹ_j) · log P_ij."""
    return _breakdown(pb, _genscl_weights(pb), False, pos_threshold)


def kd_genscl_loss(pb: ProjectedBatch, alpha_kd: AlphaKD, pos_threshold: float = 0.5) -> LossBreakdown:
    """
    L_i = −(1/|A(i)|) Σ_j (sim(ỹ_i, ỹ_j) + α_kd·sim(p^t_i, p^t_j)) · log P_ij.

    ``alpha_kd="teacher-only"`` drops the label term. With α_kd = 0 the
    result is identical to :func:`genscl_loss`.
    """
    return _breakdown(pb, _kd_weights(pb, alpha_kd), True, pos_threshold)


def loss_weights(pb: ProjectedBatch, kind: LossKind, alpha_kd: AlphaKD = 0.0) -> np.ndarray:
    """The (n, n) weight matrix M of the requested objective (zero diagonal)."""
    if LossKind(kind) == LossKind.SUPCON:
        if alpha_kd == TEACHER_ONLY or float(alpha_kd) > 0.0:
            raise ValueError("Distillation is only defined for the generalized loss")
        return _supcon_weights(pb)
    return _kd_weights(pb, alpha_kd)


def contrastive_loss(
    pb: ProjectedBatch, kind: LossKind, alpha_kd: AlphaKD = 0.0, pos_threshold: float = 0.5
) -> LossBreakdown:
    """Dispatch to the supervised, generalized or distillation loss."""
    if LossKind(kind) == LossKind.SUPCON:
        return supcon_loss(pb, pos_threshold)
    return kd_genscl_loss(pb, alpha_kd, pos_threshold)


def loss_gradient_z(pb: ProjectedBatch, weights: np.ndarray) -> np.ndarray:
    """
    ∂(Σ_i L_i)/∂z for every view, holding z unconstrained.

    With s_ij = z_i·z_j/τ, ∂L/∂s_ij = −(M_ij − (Σ_a M_ia)·P_ij) =: G_ij and
    ∂L/∂z = (G + Gᵀ) z / τ, since z_i enters its own anchor term and every
    other anchor's term.
    """
    p = np.exp(_log_latent_softmax(pb))
    g = weights.sum(axis=1, keepdims=True) * p - weights
    np.fill_diagonal(g, 0.0)
    return ((g + g.T) @ pb.z) / pb.tau


def loss_gradient_w(pb: ProjectedBatch, weights: np.ndarray) -> np.ndarray:
    """∂(Σ_i L_i)/∂w through the normalization Jacobian (I − z zᵀ)/‖w‖."""
    d_z = loss_gradient_z(pb, weights)
    radial = np.sum(pb.z * d_z, axis=1, keepdims=True)
    return (d_z - radial * pb.z) / np.linalg.norm(pb.w, axis=1, keepdims=True)


def anchor_gradient_analytic(pb: ProjectedBatch, i: int, sign: float = 1.0) -> AnchorGradient:
    """
    Closed-form ∂L_i/∂w_i of the generalized loss:

        1/(τ‖w_i‖) Σ_{j∈A(i)} (z_j − (z_i·z_j) z_i) · [ (Σ_a sim(ỹ_i,ỹ_a)/|A(i)|)·P_ij − sim(ỹ_i,ỹ_j)/|A(i)| ]

    ``sign`` exists only for mutation testing of the gradient checker.
    """
    if not 0 <= i < pb.size:
        raise IndexError(f"Anchor {i} outside batch of {pb.size}")
    norm = float(np.linalg.norm(pb.w[i]))
    if norm == 0.0:
        raise DegenerateVectorError(f"‖w_{i}‖ = 0; the anchor gradient is undefined")
    contrasts = np.array([j for j in range(pb.size) if j != i])
    n_contrasts = contrasts.size
    sims = label_similarity(pb)[i, contrasts]
    p_row = latent_softmax(pb, i)
    z_i = pb.z[i]
    z_j = pb.z[contrasts]
    tangents = z_j - (z_j @ z_i)[:, None] * z_i[None, :]
    coefficients = (sims.sum() / n_contrasts) * p_row - sims / n_contrasts
    d_w = sign * (tangents.T @ coefficients) / (pb.tau * norm)
    return AnchorGradient(anchor=i, d_w=d_w)


def anchor_loss(pb: ProjectedBatch, i: int) -> float:
    """Generalized per-anchor loss L_i."""
    return float(genscl_loss(pb).per_anchor[i])


def finite_difference_anchor_gradient(
    pb: ProjectedBatch,
    i: int,
    step: float = 1e-6,
    loss_fn: Optional[Callable[[ProjectedBatch, int], float]] = None,
) -> np.ndarray:
    """Central differences of L_i with respect to each coordinate of w_i."""
    loss_fn = loss_fn or anchor_loss
    grad = np.zeros(pb.w.shape[1])
    for k in range(pb.w.shape[1]):
        plus = pb.w.copy()
        minus = pb.w.copy()
        plus[i, k] += step
        minus[i, k] -= step
        grad[k] = (loss_fn(pb.with_w(plus), i) - loss_fn(pb.with_w(minus), i)) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """‖a − n‖ / max(‖a‖, ‖n‖, floor); the floor keeps near-zero gradients from dominating."""
    diff = float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def gradient_contribution_stats(pb: ProjectedBatch, threshold: float = 0.5) -> ContributionStats:
    """
    Statistics of z_i·z_j over unordered pairs, for all pairs and for pairs
    whose label similarity exceeds ``threshold``; also the mean of
    sqrt(1 − (z_i·z_j)²), the size of each pair's tangent contribution.
    Means over an empty pair set are NaN.
    """
    upper = np.triu_indices(pb.size, k=1)
    dots = np.clip((pb.z @ pb.z.T)[upper], -1.0, 1.0)
    factors = np.sqrt(np.clip(1.0 - dots**2, 0.0, 1.0))
    positive = label_similarity(pb)[upper] > threshold
    pos_dots = dots[positive]
    return ContributionStats(
        mean_pos_dot=float(pos_dots.mean()) if pos_dots.size else math.nan,
        std_pos_dot=float(pos_dots.std()) if pos_dots.size else math.nan,
        pos_pairs=int(pos_dots.size),
        mean_all_dot=float(dots.mean()),
        std_all_dot=float(dots.std()),
        tangent_factor=float(factors.mean()),
        tangent_factor_pos=float(factors[positive].mean()) if pos_dots.size else math.nan,
    )


def distillation_objective(
    student_logits: np.ndarray,
    targets: np.ndarray,
    teacher_probs: Optional[np.ndarray] = None,
    alpha_kd: float = 0.0,
) -> tuple:
    """
    Classical classifier distillation: mean over rows of
    CE(softmax(student), y) + α_kd·KL(p^t ‖ softmax(student)).

    Used to pretrain the teacher (α_kd = 0) and as a reference baseline.

    Returns:
        (loss, gradient w.r.t. the student logits)
    """
    logits = np.asarray(student_logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    rows = logits.shape[0]
    loss = -float(np.sum(targets * log_probs)) / rows
    grad = probs * targets.sum(axis=1, keepdims=True) - targets
    if teacher_probs is not None and alpha_kd > 0.0:
        teacher = np.asarray(teacher_probs, dtype=np.float64)
        safe = np.where(teacher > 0.0, teacher, 1.0)
        loss += alpha_kd * float(np.sum(teacher * (np.log(safe) - log_probs))) / rows
        grad = grad + alpha_kd * (probs - teacher)
    return loss, grad / rows


def random_projected_batch(
    rng: Rng,
    views: int,
    dim: int,
    classes: int,
    tau: float,
    soft: bool = True,
    with_teacher: bool = False,
) -> ProjectedBatch:
    """
    Random batch for property checks: Gaussian w, labels that are one-hot or
    two-class mixtures λ·e_a + (1−λ)·e_b with λ ~ U(0, 1).
    """
    w = rng.normal(size=(views, dim))
    labels = np.zeros((views, classes))
    for row in range(views):
        first = int(rng.integers(0, classes))
        if soft:
            second = int(rng.integers(0, classes))
            lam = float(rng.uniform())
            labels[row, first] += lam
            labels[row, second] += 1.0 - lam
        else:
            labels[row, first] = 1.0
    preds = None
    if with_teacher:
        raw = rng.uniform(0.05, 1.0, size=(views, classes))
        preds = raw / raw.sum(axis=1, keepdims=True)
    return ProjectedBatch.from_embeddings(w, labels, tau, preds)


GRADCHECK_VIEWS = (4, 6, 8)
GRADCHECK_DIMS = (3, 8, 16)
GRADCHECK_TAUS = (0.07, 0.5, 1.0)
GRADCHECK_CLASSES = 4


@dataclass(frozen=True)
class GradcheckTrial:
    replay_token: str
    views: int
    dim: int
    tau: float
    anchor: int
    rel_error: float


def gradcheck_trial(rng: Rng, mutate_sign: bool = False, step: float = 1e-6) -> GradcheckTrial:
    """Compare the closed-form anchor gradient with central differences on one random instance."""
    views = GRADCHECK_VIEWS[int(rng.integers(0, len(GRADCHECK_VIEWS)))]
    dim = GRADCHECK_DIMS[int(rng.integers(0, len(GRADCHECK_DIMS)))]
    tau = GRADCHECK_TAUS[int(rng.integers(0, len(GRADCHECK_TAUS)))]
    pb = random_projected_batch(rng, views, dim, GRADCHECK_CLASSES, tau, soft=True)
    anchor = int(rng.integers(0, views))
    analytic = anchor_gradient_analytic(pb, anchor, sign=-1.0 if mutate_sign else 1.0).d_w
    numeric = finite_difference_anchor_gradient(pb, anchor, step)
    return GradcheckTrial(
        replay_token=rng.replay_token,
        views=views,
        dim=dim,
        tau=tau,
        anchor=anchor,
        rel_error=relative_error(analytic, numeric),
    )


def run_gradient_checks(
    trials: int, tolerance: float, seed: int, mutate_sign: bool = False
) -> GradcheckReport:
    """Run ``trials`` independent instances, trial t on stream ``Rng(seed).child(t)``."""
    root = Rng(seed)
    worst = 0.0
    failing: Optional[str] = None
    for t in range(trials):
        trial = gradcheck_trial(root.child(t), mutate_sign)
        if trial.rel_error > worst:
            worst = trial.rel_error
        if failing is None and not trial.rel_error < tolerance:
            failing = trial.replay_token
            logger.warning(
                f"Gradient check failed on {trial.replay_token}: 2N={trial.views}, P={trial.dim}, "
                f"tau={trial.tau}, anchor={trial.anchor}, rel_error={trial.rel_error:.3e}"
            )
    logger.info(f"Gradient check: {trials} trials, max relative error {worst:.3e}")
    return GradcheckReport(
        trials=trials,
        max_rel_error=worst,
        tolerance=tolerance,
        passed=failing is None,
        failing_seed=failing,
    )
