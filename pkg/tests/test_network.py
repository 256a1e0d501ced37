"""
Tests for the encoder, projection, teacher and checkpoint format.
"""

import struct

import numpy as np
import pytest

from genscl.core.errors import (
    BadMagicError,
    DimensionMismatchError,
    MissingForwardCacheError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from genscl.core.models import NetworkRole
from genscl.core.numerics import Rng
from genscl.tools.data import class_templates
from genscl.tools.loss import ProjectedBatch, genscl_loss, loss_gradient_z, loss_weights, relative_error
from genscl.tools.network import (
    Dense,
    EncoderParams,
    MLPParams,
    OracleTeacher,
    backward_contrastive,
    backward_mlp,
    encode,
    forward_contrastive,
    forward_mlp,
    init_encoder,
    init_probe,
    init_projection,
    init_teacher,
    load_checkpoint,
    normalization_backward,
    param_checksum,
    project,
    save_checkpoint,
    teacher_predict,
    teacher_predict_batch,
)


@pytest.fixture
def networks():
    rng = Rng(21)
    encoder = init_encoder(16, 6, 5, rng.child(0))
    projection = init_projection(5, 3, rng.child(1))
    return encoder, projection


def _soft_labels(rng: Rng, rows: int, classes: int) -> np.ndarray:
    raw = rng.uniform(0.05, 1.0, size=(rows, classes))
    return raw / raw.sum(axis=1, keepdims=True)


class TestLayers:
    """Test cases for layer and network construction."""

    def test_dense_shape_check(self):
        with pytest.raises(DimensionMismatchError):
            Dense(np.zeros((3, 2)), np.zeros(2))

    def test_chain_shape_check(self):
        with pytest.raises(DimensionMismatchError):
            MLPParams([Dense(np.zeros((3, 2)), np.zeros(3)), Dense(np.zeros((2, 4)), np.zeros(2))])

    def test_glorot_bounds_and_zero_bias(self):
        encoder = init_encoder(16, 6, 5, Rng(0))
        limit = np.sqrt(6.0 / (16 + 6))
        assert np.all(np.abs(encoder.layers[0].weight) <= limit)
        assert np.all(encoder.layers[0].bias == 0.0)
        assert encoder.dims == [16, 6, 5]

    def test_init_deterministic(self):
        assert param_checksum(init_encoder(16, 6, 5, Rng(3))) == param_checksum(
            init_encoder(16, 6, 5, Rng(3))
        )

    def test_probe_starts_at_zero(self):
        probe = init_probe(5, 3)
        assert probe.in_dim == 5 and probe.out_dim == 3
        assert np.all(probe.layers[0].weight == 0.0)

    def test_named_arrays_round_trip(self, networks):
        encoder, _ = networks
        arrays = encoder.named_arrays("encoder")
        assert sorted(arrays) == [
            "encoder.0.bias",
            "encoder.0.weight",
            "encoder.1.bias",
            "encoder.1.weight",
        ]
        rebuilt = encoder.with_arrays(arrays, "encoder")
        assert isinstance(rebuilt, EncoderParams)
        assert param_checksum(rebuilt) == param_checksum(encoder)

    def test_checksum_detects_change(self, networks):
        encoder, _ = networks
        arrays = dict(encoder.named_arrays("encoder"))
        weight = arrays["encoder.0.weight"].copy()
        weight[0, 0] += 1e-12
        changed = encoder.with_arrays({**arrays, "encoder.0.weight": weight}, "encoder")
        assert param_checksum(changed) != param_checksum(encoder)


class TestForward:
    """Test cases for forward passes."""

    def test_unit_norm_embeddings(self, networks, rng):
        encoder, projection = networks
        h, w, z, _ = forward_contrastive(encoder, projection, rng.uniform(size=(7, 4, 4, 1)))
        assert h.shape == (7, 5) and w.shape == (7, 3)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)

    def test_single_matches_batch(self, networks, rng):
        encoder, projection = networks
        images = rng.uniform(size=(3, 16))
        h, w, z, _ = forward_contrastive(encoder, projection, images)
        np.testing.assert_allclose(encode(encoder, images[1]), h[1], atol=1e-14)
        w1, z1 = project(projection, h[1])
        np.testing.assert_allclose(w1, w[1], atol=1e-14)
        np.testing.assert_allclose(z1, z[1], atol=1e-14)

    def test_input_dimension_checked(self, networks):
        encoder, _ = networks
        with pytest.raises(DimensionMismatchError):
            forward_mlp(encoder, np.zeros((2, 15)))

    def test_relu_between_layers_only(self):
        """The output layer is linear, so negative outputs survive."""
        params = MLPParams([Dense(np.eye(2), np.zeros(2)), Dense(-np.eye(2), np.zeros(2))])
        out, _ = forward_mlp(params, np.array([[1.0, -1.0]]))
        np.testing.assert_array_equal(out, [[-1.0, 0.0]])


class TestBackward:
    """Test cases for reverse-mode gradients."""

    def test_zero_upstream_gives_zero_gradients(self, networks, rng):
        encoder, projection = networks
        _, _, z, cache = forward_contrastive(encoder, projection, rng.uniform(size=(4, 16)))
        grads = backward_contrastive(encoder, projection, cache, d_z=np.zeros_like(z))
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_linear_layer_closed_form(self, rng):
        """For h = W x + b and loss h·c, ∂/∂W = c ⊗ x."""
        layer = Dense(rng.normal(size=(3, 4)), rng.normal(size=3))
        params = MLPParams([layer])
        x = rng.normal(size=(1, 4))
        c = rng.normal(size=3)
        _, cache = forward_mlp(params, x)
        grads, d_x = backward_mlp(params, cache, c[None, :], "f")
        np.testing.assert_allclose(grads["f.0.weight"], np.outer(c, x[0]), atol=1e-14)
        np.testing.assert_allclose(grads["f.0.bias"], c, atol=1e-14)
        np.testing.assert_allclose(d_x[0], layer.weight.T @ c, atol=1e-14)

    def test_missing_cache(self, networks):
        encoder, _ = networks
        with pytest.raises(MissingForwardCacheError):
            backward_mlp(encoder, None, np.zeros((1, 5)), "encoder")
        with pytest.raises(MissingForwardCacheError):
            backward_contrastive(encoder, networks[1], None, d_z=np.zeros((1, 3)))

    def test_normalization_jacobian_orthogonal_to_z(self, rng):
        for _ in range(100):
            w = rng.normal(size=(1, 4))
            norms = np.linalg.norm(w, axis=1)
            z = w / norms[:, None]
            v = rng.normal(size=(1, 4))
            projected = normalization_backward(z, norms, v)
            assert abs(float(z[0] @ projected[0])) < 1e-12
            # (I − zzᵀ) is idempotent
            again = normalization_backward(z, np.ones(1), projected * norms[:, None])
            np.testing.assert_allclose(again, projected * norms[:, None], atol=1e-12)

    def test_full_model_matches_finite_differences(self, networks):
        """Every parameter gradient of the summed generalized loss matches central differences."""
        encoder, projection = networks
        rng = Rng(99)
        images = rng.uniform(size=(6, 16))
        labels = _soft_labels(rng, 6, 3)
        tau = 0.5

        def total_loss(enc, proj):
            _, w, _, _ = forward_contrastive(enc, proj, images)
            return genscl_loss(ProjectedBatch.from_embeddings(w, labels, tau)).total

        _, w, z, cache = forward_contrastive(encoder, projection, images)
        pb = ProjectedBatch(w=w, z=z, labels=labels, tau=tau)
        d_z = loss_gradient_z(pb, loss_weights(pb, "genscl"))
        grads = backward_contrastive(encoder, projection, cache, d_z=d_z)

        params = {**encoder.named_arrays("encoder"), **projection.named_arrays("projection")}
        step = 1e-5
        for name, value in params.items():
            numeric = np.zeros_like(value)
            for index in np.ndindex(value.shape):
                shifted = {}
                for sign in (1.0, -1.0):
                    trial = {key: array.copy() for key, array in params.items()}
                    trial[name][index] += sign * step
                    shifted[sign] = total_loss(
                        encoder.with_arrays(trial, "encoder"),
                        projection.with_arrays(trial, "projection"),
                    )
                numeric[index] = (shifted[1.0] - shifted[-1.0]) / (2 * step)
            assert relative_error(grads[name], numeric) < 1e-5, name

    def test_gradient_through_h(self, networks, rng):
        """Gradients arriving at h reach only the encoder."""
        encoder, projection = networks
        images = rng.uniform(size=(3, 16))
        h, _, _, cache = forward_contrastive(encoder, projection, images)
        c = rng.normal(size=h.shape)
        grads = backward_contrastive(encoder, projection, cache, d_h=c)
        assert all(np.all(grads[k] == 0.0) for k in grads if k.startswith("projection"))

        step = 1e-6
        weight = encoder.layers[1].weight
        numeric = np.zeros_like(weight)
        for index in np.ndindex(weight.shape):
            values = []
            for sign in (1.0, -1.0):
                arrays = {k: v.copy() for k, v in encoder.named_arrays("encoder").items()}
                arrays["encoder.1.weight"][index] += sign * step
                h_shift, _ = forward_mlp(encoder.with_arrays(arrays, "encoder"), images)
                values.append(float(np.sum(h_shift * c)))
            numeric[index] = (values[0] - values[1]) / (2 * step)
        np.testing.assert_allclose(grads["encoder.1.weight"], numeric, atol=1e-7)


class TestTeacher:
    """Test cases for the teacher classifier and the oracle teacher."""

    def test_predictions_are_distributions(self, rng):
        teacher = init_teacher(16, 8, 3, Rng(1))
        preds = teacher_predict_batch(teacher, rng.uniform(size=(5, 16)))
        np.testing.assert_allclose(preds.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(preds > 0.0)
        np.testing.assert_allclose(teacher_predict(teacher, rng.uniform(size=16)).sum(), 1.0)

    def test_softening_raises_entropy(self, rng):
        images = rng.uniform(size=(5, 16))
        sharp = init_teacher(16, 8, 3, Rng(1), tau_soft=0.5)
        soft = init_teacher(16, 8, 3, Rng(1), tau_soft=4.0)

        def entropy(p):
            return float(-(p * np.log(p)).sum())

        assert entropy(teacher_predict_batch(soft, images)) > entropy(
            teacher_predict_batch(sharp, images)
        )

    def test_oracle_on_templates(self):
        templates = class_templates(3, 8, 8)
        oracle = OracleTeacher(templates)
        for c in range(3):
            expected = np.full(3, 0.1 / 3)
            expected[c] += 0.9
            np.testing.assert_allclose(oracle.predict(templates[c]), expected, atol=1e-15)

    def test_oracle_on_noisy_data(self, small_dataset):
        oracle = OracleTeacher(class_templates(3, 8, 8))
        preds = oracle.predict_batch(small_dataset.images_matrix())
        np.testing.assert_array_equal(preds.argmax(axis=1), small_dataset.class_indices())


class TestCheckpoint:
    """Test cases for the GSCM checkpoint format."""

    def test_round_trip_bit_exact(self, networks, tmp_path):
        encoder, projection = networks
        teacher = init_teacher(16, 4, 3, Rng(5), tau_soft=2.5)
        path = tmp_path / "model.gscm"
        save_checkpoint(
            path,
            {
                NetworkRole.ENCODER: encoder,
                NetworkRole.PROJECTION: projection,
                NetworkRole.TEACHER: teacher,
            },
        )
        loaded = load_checkpoint(path)
        assert param_checksum(loaded[NetworkRole.ENCODER]) == param_checksum(encoder)
        assert param_checksum(loaded[NetworkRole.PROJECTION]) == param_checksum(projection)
        assert param_checksum(loaded[NetworkRole.TEACHER]) == param_checksum(teacher)
        assert loaded[NetworkRole.TEACHER].tau_soft == 2.5
        assert isinstance(loaded[NetworkRole.ENCODER], EncoderParams)

    def test_save_is_byte_identical(self, networks, tmp_path):
        encoder, projection = networks
        roles = {NetworkRole.ENCODER: encoder, NetworkRole.PROJECTION: projection}
        save_checkpoint(tmp_path / "a.gscm", roles)
        save_checkpoint(tmp_path / "b.gscm", roles)
        assert (tmp_path / "a.gscm").read_bytes() == (tmp_path / "b.gscm").read_bytes()
        assert (tmp_path / "a.gscm").read_bytes()[:4] == b"GSCM"

    def test_bad_magic(self, networks, tmp_path):
        path = tmp_path / "model.gscm"
        save_checkpoint(path, {NetworkRole.ENCODER: networks[0]})
        path.write_bytes(b"GSCL" + path.read_bytes()[4:])
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_unsupported_version(self, networks, tmp_path):
        path = tmp_path / "model.gscm"
        save_checkpoint(path, {NetworkRole.ENCODER: networks[0]})
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(data))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(path)

    def test_truncated(self, networks, tmp_path):
        path = tmp_path / "model.gscm"
        save_checkpoint(path, {NetworkRole.ENCODER: networks[0]})
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TruncatedFileError):
            load_checkpoint(path)
