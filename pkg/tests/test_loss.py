"""
Tests for the contrastive losses, their gradients and the mining diagnostics.

The reference losses at the top of this module are direct summations over
Python lists and share no code with the library kernels.
"""

import math

import numpy as np
import pytest

from genscl.core.errors import DimensionMismatchError, LabelError
from genscl.core.models import TEACHER_ONLY, LossKind
from genscl.core.numerics import Rng
from genscl.tools.loss import (
    ProjectedBatch,
    anchor_gradient_analytic,
    contrastive_loss,
    distillation_objective,
    finite_difference_anchor_gradient,
    genscl_loss,
    gradient_contribution_stats,
    kd_genscl_loss,
    latent_softmax,
    loss_gradient_w,
    loss_weights,
    random_projected_batch,
    relative_error,
    run_gradient_checks,
    supcon_loss,
)


def _dot(u, v):
    return sum(a * b for a, b in zip(u, v))


def _cos(u, v):
    return _dot(u, v) / (math.sqrt(_dot(u, u)) * math.sqrt(_dot(v, v)))


def _unit(row):
    norm = math.sqrt(_dot(row, row))
    return [value / norm for value in row]


def reference_losses(w, labels, tau, weight_fn):
    """L_i = −Σ_{j≠i} weight_fn(i, j) · log(exp(z_i·z_j/τ) / Σ_{a≠i} exp(z_i·z_a/τ))."""
    z = [_unit(list(row)) for row in w]
    n = len(z)
    losses = []
    for i in range(n):
        denominator = sum(math.exp(_dot(z[i], z[a]) / tau) for a in range(n) if a != i)
        total = 0.0
        for j in range(n):
            if j == i:
                continue
            p = math.exp(_dot(z[i], z[j]) / tau) / denominator
            total -= weight_fn(i, j) * math.log(p)
        losses.append(total)
    return losses


def reference_genscl(w, labels, tau):
    n = len(w)
    return reference_losses(w, labels, tau, lambda i, j: _cos(labels[i], labels[j]) / (n - 1))


def reference_supcon(w, labels, tau):
    n = len(w)
    positives = [
        [j for j in range(n) if j != i and list(labels[j]) == list(labels[i])] for i in range(n)
    ]

    def weight(i, j):
        if j not in positives[i]:
            return 0.0
        return 1.0 / len(positives[i])

    return reference_losses(w, labels, tau, weight)


def reference_kd(w, labels, preds, alpha, tau):
    n = len(w)
    return reference_losses(
        w,
        labels,
        tau,
        lambda i, j: (_cos(labels[i], labels[j]) + alpha * _cos(preds[i], preds[j])) / (n - 1),
    )


def _random_batches(count, soft=True, with_teacher=False, taus=(0.5, 1.0, 2.0)):
    root = Rng(4242)
    for trial in range(count):
        stream = root.child(trial)
        views = 2 * int(stream.integers(1, 5))
        dim = int(stream.integers(2, 6))
        tau = taus[int(stream.integers(0, len(taus)))]
        yield random_projected_batch(stream, views, dim, 3, tau, soft=soft, with_teacher=with_teacher)


class TestReferenceAgreement:
    """Library losses against direct summation."""

    def test_unit_circle_example(self, unit_circle_batch):
        w, labels = unit_circle_batch
        pb = ProjectedBatch.from_embeddings(w, labels, 1.0)
        expected = reference_genscl(w.tolist(), labels.tolist(), 1.0)
        np.testing.assert_allclose(genscl_loss(pb).per_anchor, expected, atol=1e-10)
        assert genscl_loss(pb).total == pytest.approx(sum(expected), abs=1e-10)
        expected_supcon = reference_supcon(w.tolist(), labels.tolist(), 1.0)
        assert supcon_loss(pb).total == pytest.approx(sum(expected_supcon), abs=1e-10)

    def test_genscl_random_batches(self):
        for pb in _random_batches(1000):
            expected = reference_genscl(pb.w.tolist(), pb.labels.tolist(), pb.tau)
            np.testing.assert_allclose(genscl_loss(pb).per_anchor, expected, atol=1e-10)

    def test_supcon_random_batches(self):
        for pb in _random_batches(1000, soft=False):
            expected = reference_supcon(pb.w.tolist(), pb.labels.tolist(), pb.tau)
            np.testing.assert_allclose(supcon_loss(pb).per_anchor, expected, atol=1e-10)

    def test_kd_random_batches(self):
        for index, pb in enumerate(_random_batches(1000, with_teacher=True)):
            alpha = (0.0, 0.5, 1.0, 5.0)[index % 4]
            expected = reference_kd(
                pb.w.tolist(), pb.labels.tolist(), pb.teacher_preds.tolist(), alpha, pb.tau
            )
            np.testing.assert_allclose(kd_genscl_loss(pb, alpha).per_anchor, expected, atol=1e-10)


class TestDegenerations:
    """Identities between the three losses."""

    def test_one_hot_genscl_is_scaled_supcon(self):
        """With one-hot labels, L_i(gen) = |P(i)|/|A(i)| · L_i(sup)."""
        for pb in _random_batches(1000, soft=False):
            n = pb.size
            same = (pb.labels[:, None, :] == pb.labels[None, :, :]).all(axis=2)
            positives = same.sum(axis=1) - 1
            scaled = positives / (n - 1) * supcon_loss(pb).per_anchor
            np.testing.assert_allclose(genscl_loss(pb).per_anchor, scaled, atol=1e-12)

    def test_alpha_zero_is_bit_identical(self):
        for pb in _random_batches(200, with_teacher=True):
            plain = genscl_loss(pb)
            distilled = kd_genscl_loss(pb, 0.0)
            assert distilled.total == plain.total
            np.testing.assert_array_equal(distilled.per_anchor, plain.per_anchor)

    def test_two_views_give_zero(self):
        pb = ProjectedBatch.from_embeddings(
            np.array([[1.0, 2.0], [-3.0, 0.5]]),
            np.array([[1.0, 0.0], [1.0, 0.0]]),
            0.1,
            np.array([[0.7, 0.3], [0.2, 0.8]]),
        )
        assert supcon_loss(pb).total == 0.0
        assert genscl_loss(pb).total == 0.0
        assert kd_genscl_loss(pb, 3.0).total == 0.0

    def test_teacher_only_uses_predictions_as_labels(self):
        for pb in _random_batches(100, with_teacher=True):
            as_labels = ProjectedBatch(pb.w, pb.z, pb.teacher_preds, pb.tau)
            np.testing.assert_allclose(
                kd_genscl_loss(pb, TEACHER_ONLY).per_anchor,
                genscl_loss(as_labels).per_anchor,
                atol=1e-14,
            )

    def test_kd_is_linear_in_alpha(self):
        for pb in _random_batches(100, with_teacher=True):
            combined = kd_genscl_loss(pb, 2.5).per_anchor
            parts = genscl_loss(pb).per_anchor + 2.5 * kd_genscl_loss(pb, TEACHER_ONLY).per_anchor
            np.testing.assert_allclose(combined, parts, atol=1e-12)


class TestLossProperties:
    """Invariances, bounds and error cases."""

    def test_permutation_invariance(self):
        root = Rng(5)
        for trial in range(50):
            pb = random_projected_batch(root.child(trial), 8, 4, 3, 0.5)
            order = root.child(trial, 1).permutation(8)
            assert genscl_loss(pb.permuted(order)).total == pytest.approx(
                genscl_loss(pb).total, abs=1e-12
            )

    def test_per_anchor_permutation_equivariance(self):
        """Reordering the views reorders the per-anchor terms the same way."""
        root = Rng(15)
        for trial in range(50):
            pb = random_projected_batch(root.child(trial), 8, 4, 3, 0.5)
            order = root.child(trial, 1).permutation(8)
            np.testing.assert_allclose(
                genscl_loss(pb.permuted(order)).per_anchor,
                genscl_loss(pb).per_anchor[order],
                rtol=0.0,
                atol=1e-12,
            )

    def test_scale_invariance(self):
        pb = random_projected_batch(Rng(6), 6, 3, 3, 0.3)
        scaled = pb.with_w(pb.w * 7.5)
        np.testing.assert_allclose(
            genscl_loss(scaled).per_anchor, genscl_loss(pb).per_anchor, atol=1e-12
        )

    @pytest.mark.parametrize("tau", [0.01, 0.07, 0.1, 0.5, 1.0, 10.0])
    def test_latent_softmax_row_stochastic(self, tau):
        pb = random_projected_batch(Rng(7), 8, 5, 3, tau)
        for i in range(8):
            row = latent_softmax(pb, i)
            assert row.shape == (7,)
            assert np.all(np.isfinite(row))
            assert row.sum() == pytest.approx(1.0, abs=1e-12)
        breakdown = genscl_loss(pb)
        assert np.all(np.isfinite(breakdown.per_anchor))
        np.testing.assert_allclose(breakdown.Z.sum(axis=1), 1.0, atol=1e-12)

    def test_losses_non_negative(self):
        for pb in _random_batches(200):
            assert np.all(genscl_loss(pb).per_anchor >= 0.0)

    def test_breakdown_spaces(self, unit_circle_batch):
        w, labels = unit_circle_batch
        breakdown = genscl_loss(ProjectedBatch.from_embeddings(w, labels, 1.0))
        np.testing.assert_array_equal(breakdown.Y[0], [1.0, 0.0, 0.0])
        assert breakdown.Y.shape == (4, 3)
        assert breakdown.Pt is None

    def test_supcon_rejects_soft_labels(self):
        pb = random_projected_batch(Rng(8), 4, 3, 3, 0.5, soft=True)
        if np.all((pb.labels == 0.0) | (pb.labels == 1.0)):
            pytest.skip("draw happened to be one-hot")
        with pytest.raises(LabelError):
            supcon_loss(pb)

    def test_supcon_anchor_without_positive(self):
        labels = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        pb = ProjectedBatch.from_embeddings(Rng(0).normal(size=(4, 3)), labels, 0.5)
        per_anchor = supcon_loss(pb).per_anchor
        assert per_anchor[0] == 0.0 and per_anchor[3] == 0.0
        assert per_anchor[1] > 0.0

    def test_batch_validation(self):
        with pytest.raises(DimensionMismatchError):
            ProjectedBatch.from_embeddings(np.ones((4, 2)), np.full((3, 2), 0.5), 0.5)
        with pytest.raises(ValueError):
            ProjectedBatch(np.ones((2, 2)), np.ones((2, 2)), np.full((2, 2), 0.5), 0.5)
        with pytest.raises(ValueError):
            ProjectedBatch.from_embeddings(np.ones((1, 2)), np.array([[1.0, 0.0]]), 0.5)
        with pytest.raises(ValueError):
            ProjectedBatch.from_embeddings(np.eye(2), np.eye(2), 0.0)

    def test_kd_needs_predictions(self):
        pb = random_projected_batch(Rng(9), 4, 3, 3, 0.5)
        with pytest.raises(ValueError):
            kd_genscl_loss(pb, 1.0)
        with pytest.raises(ValueError):
            kd_genscl_loss(pb, TEACHER_ONLY)

    def test_dispatch(self):
        pb = random_projected_batch(Rng(10), 6, 3, 3, 0.5, soft=False)
        assert contrastive_loss(pb, LossKind.SUPCON).total == supcon_loss(pb).total
        assert contrastive_loss(pb, LossKind.GENSCL).total == genscl_loss(pb).total
        with pytest.raises(ValueError):
            loss_weights(pb, LossKind.SUPCON, 1.0)


class TestAnchorGradient:
    """Closed-form anchor gradient against finite differences."""

    def test_property_suite_passes(self):
        report = run_gradient_checks(trials=100, tolerance=1e-5, seed=0)
        assert report.passed
        assert report.max_rel_error < 1e-5
        assert report.failing_seed is None

    def test_sign_mutation_is_caught(self):
        report = run_gradient_checks(trials=5, tolerance=1e-5, seed=0, mutate_sign=True)
        assert not report.passed
        assert report.failing_seed is not None
        assert report.failing_seed.startswith("0:")
        assert report.max_rel_error > 1.0

    def test_gradient_is_tangent(self):
        root = Rng(12)
        for trial in range(50):
            pb = random_projected_batch(root.child(trial), 6, 4, 3, 0.5)
            for i in range(6):
                d_w = anchor_gradient_analytic(pb, i).d_w
                assert abs(float(d_w @ pb.z[i])) < 1e-10

    def test_collinear_features_vanish(self):
        """Parallel and antiparallel embeddings give no anchor gradient."""
        direction = np.array([0.6, -0.8, 0.0])
        w = np.outer([1.0, 2.5, -0.7, 4.0, -3.0, 0.2], direction)
        labels = random_projected_batch(Rng(13), 6, 3, 3, 1.0).labels
        for tau in (0.07, 0.5, 1.0):
            pb = ProjectedBatch.from_embeddings(w, labels, tau)
            for i in range(6):
                assert np.linalg.norm(anchor_gradient_analytic(pb, i).d_w) < 1e-8
            assert np.linalg.norm(loss_gradient_w(pb, loss_weights(pb, LossKind.GENSCL))) < 1e-8

    def test_gradient_scales_inversely_with_norm(self):
        pb = random_projected_batch(Rng(14), 6, 4, 3, 0.5)
        scaled = pb.with_w(pb.w * 3.0)
        np.testing.assert_allclose(
            anchor_gradient_analytic(scaled, 2).d_w,
            anchor_gradient_analytic(pb, 2).d_w / 3.0,
            atol=1e-12,
        )

    def test_anchor_index_checked(self):
        pb = random_projected_batch(Rng(15), 4, 3, 3, 0.5)
        with pytest.raises(IndexError):
            anchor_gradient_analytic(pb, 4)

    def test_relative_error_floor(self):
        assert relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-6)
        assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0


class TestFullGraphGradient:
    """∂(Σ_i L_i)/∂w for every view, against finite differences of the total loss."""

    @pytest.mark.parametrize(
        "kind,alpha,soft",
        [
            (LossKind.SUPCON, 0.0, False),
            (LossKind.GENSCL, 0.0, True),
            (LossKind.GENSCL, 2.0, True),
            (LossKind.GENSCL, TEACHER_ONLY, True),
        ],
    )
    def test_matches_finite_differences(self, kind, alpha, soft):
        root = Rng(16)
        step = 1e-6
        for trial in range(10):
            pb = random_projected_batch(root.child(trial), 6, 4, 3, 0.5, soft=soft, with_teacher=True)
            analytic = loss_gradient_w(pb, loss_weights(pb, kind, alpha))
            numeric = np.zeros_like(pb.w)
            for index in np.ndindex(pb.w.shape):
                plus = pb.w.copy()
                minus = pb.w.copy()
                plus[index] += step
                minus[index] -= step
                numeric[index] = (
                    contrastive_loss(pb.with_w(plus), kind, alpha).total
                    - contrastive_loss(pb.with_w(minus), kind, alpha).total
                ) / (2 * step)
            assert relative_error(analytic, numeric) < 1e-5

    def test_anchor_term_matches_closed_form(self):
        """Finite differences of L_i alone agree with the closed form at any anchor."""
        pb = random_projected_batch(Rng(17), 8, 8, 3, 0.07)
        for i in (0, 3, 7):
            numeric = finite_difference_anchor_gradient(pb, i)
            assert relative_error(anchor_gradient_analytic(pb, i).d_w, numeric) < 1e-5


class TestContributionStats:
    """z_i·z_j diagnostics."""

    def test_collapsed_features(self):
        w = np.tile([1.0, 2.0, 2.0], (5, 1))
        labels = np.tile([1.0, 0.0], (5, 1))
        stats = gradient_contribution_stats(ProjectedBatch.from_embeddings(w, labels, 0.1))
        assert stats.mean_pos_dot == pytest.approx(1.0, abs=1e-12)
        assert stats.tangent_factor == pytest.approx(0.0, abs=1e-6)
        assert stats.pos_pairs == 10

    def test_orthogonal_features(self):
        labels = np.tile([0.5, 0.5], (4, 1))
        stats = gradient_contribution_stats(ProjectedBatch.from_embeddings(np.eye(4), labels, 0.1))
        assert stats.mean_pos_dot == 0.0
        assert stats.tangent_factor == 1.0

    def test_no_positive_pairs(self):
        stats = gradient_contribution_stats(
            ProjectedBatch.from_embeddings(np.eye(2), np.eye(2), 0.1)
        )
        assert math.isnan(stats.mean_pos_dot)
        assert stats.pos_pairs == 0

    def test_random_high_dimensional_features(self):
        dim = 256
        w = Rng(18).normal(size=(8, dim))
        labels = np.tile([1.0, 0.0], (8, 1))
        stats = gradient_contribution_stats(ProjectedBatch.from_embeddings(w, labels, 0.1))
        assert abs(stats.mean_all_dot) < 3.0 / math.sqrt(dim)


class TestDistillationObjective:
    """Classical cross-entropy + KL objective."""

    def test_cross_entropy_value(self):
        logits = np.array([[2.0, 0.0, -1.0]])
        loss, _ = distillation_objective(logits, np.array([[1.0, 0.0, 0.0]]))
        expected = -math.log(math.exp(2.0) / (math.exp(2.0) + 1.0 + math.exp(-1.0)))
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = Rng(19)
        logits = rng.normal(size=(4, 3))
        targets = np.eye(3)[[0, 2, 1, 0]]
        raw = rng.uniform(0.1, 1.0, size=(4, 3))
        teacher = raw / raw.sum(axis=1, keepdims=True)
        _, grad = distillation_objective(logits, targets, teacher, 0.7)
        numeric = np.zeros_like(logits)
        step = 1e-6
        for index in np.ndindex(logits.shape):
            plus = logits.copy()
            minus = logits.copy()
            plus[index] += step
            minus[index] -= step
            numeric[index] = (
                distillation_objective(plus, targets, teacher, 0.7)[0]
                - distillation_objective(minus, targets, teacher, 0.7)[0]
            ) / (2 * step)
        assert relative_error(grad, numeric) < 1e-6

    def test_kl_vanishes_when_student_matches_teacher(self):
        logits = np.log(np.array([[0.2, 0.3, 0.5]]))
        teacher = np.array([[0.2, 0.3, 0.5]])
        targets = np.array([[0.0, 0.0, 1.0]])
        plain, _ = distillation_objective(logits, targets)
        distilled, _ = distillation_objective(logits, targets, teacher, 4.0)
        assert distilled == pytest.approx(plain, abs=1e-12)
