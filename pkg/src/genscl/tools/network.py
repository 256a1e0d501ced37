"""
Encoder f(·), projection network g(·), teacher classifier t(·) and linear probe,
with exact reverse-mode gradients.

Every network is a stack of fully-connected layers with ReLU between layers
and a linear final layer. Parameters are plain float64 arrays so gradients can
be checked against finite differences.
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.errors import (
    BadMagicError,
    DimensionMismatchError,
    FormatError,
    MissingForwardCacheError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from ..core.models import NetworkRole
from ..core.numerics import Rng, l2_normalize_rows
from ..core.utils import array_checksum, ensure_parent

logger = logging.getLogger(__name__)

ArrayDict = Dict[str, np.ndarray]


@dataclass
class Dense:
    """Fully-connected layer y = W x + b, weight shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionMismatchError(
                f"Layer weight {self.weight.shape} does not match bias {self.bias.shape}"
            )
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ValueError("Layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MLPParams:
    """Chain of dense layers; ReLU between layers, linear output."""

    layers: List[Dense]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("A network needs at least one layer")
        for index in range(1, len(self.layers)):
            if self.layers[index].in_dim != self.layers[index - 1].out_dim:
                raise DimensionMismatchError(
                    f"Layer {index} expects {self.layers[index].in_dim} inputs, "
                    f"previous layer produces {self.layers[index - 1].out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> List[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def named_arrays(self, prefix: str) -> ArrayDict:
        arrays: ArrayDict = {}
        for index, layer in enumerate(self.layers):
            arrays[f"{prefix}.{index}.weight"] = layer.weight
            arrays[f"{prefix}.{index}.bias"] = layer.bias
        return arrays

    def with_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str):
        """Copy of these params with every layer taken from ``arrays``."""
        layers = [
            Dense(arrays[f"{prefix}.{i}.weight"].copy(), arrays[f"{prefix}.{i}.bias"].copy())
            for i in range(len(self.layers))
        ]
        return replace(self, layers=layers)


class EncoderParams(MLPParams):
    """f(·): flattened image (D) → hidden → E."""


class ProjectionParams(MLPParams):
    """g(·) before normalization: E → E → P."""

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.out_dim < 2:
            raise ValueError(f"Projection output dimension must be >= 2, got {self.out_dim}")


@dataclass
class TeacherParams(MLPParams):
    """t(·): flattened image (D) → hidden → C, softened by ``tau_soft``. Frozen while distilling."""

    tau_soft: float = 1.0

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        return teacher_predict_batch(self, images)


class LinearProbeParams(MLPParams):
    """Single linear layer E → C trained on frozen encoder features."""


@dataclass
class MLPCache:
    """Per-layer inputs and pre-activations saved by :func:`forward_mlp`."""

    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)


def _glorot_layer(fan_in: int, fan_out: int, rng: Rng) -> Dense:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Dense(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out))


def init_layers(dims: Sequence[int], rng: Rng) -> List[Dense]:
    """Glorot-uniform weights, zero biases."""
    return [_glorot_layer(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]


def init_encoder(input_dim: int, hidden_dim: int, embed_dim: int, rng: Rng) -> EncoderParams:
    return EncoderParams(init_layers([input_dim, hidden_dim, embed_dim], rng))


def init_projection(embed_dim: int, proj_dim: int, rng: Rng) -> ProjectionParams:
    return ProjectionParams(init_layers([embed_dim, embed_dim, proj_dim], rng))


def init_teacher(
    input_dim: int, hidden_dim: int, classes: int, rng: Rng, tau_soft: float = 1.0
) -> TeacherParams:
    return TeacherParams(init_layers([input_dim, hidden_dim, classes], rng), tau_soft=tau_soft)


def init_probe(embed_dim: int, classes: int) -> LinearProbeParams:
    return LinearProbeParams([Dense(np.zeros((classes, embed_dim)), np.zeros(classes))])


def _as_rows(params: MLPParams, x: np.ndarray) -> np.ndarray:
    rows = np.asarray(x, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows.reshape(1, -1)
    elif rows.ndim > 2:
        rows = rows.reshape(rows.shape[0], -1)
    if rows.shape[1] != params.in_dim:
        raise DimensionMismatchError(
            f"Network expects inputs of dimension {params.in_dim}, got {rows.shape[1]}"
        )
    return rows


def forward_mlp(params: MLPParams, x: np.ndarray) -> Tuple[np.ndarray, MLPCache]:
    """Forward pass over a batch of rows; returns outputs and the cache for backprop."""
    out = _as_rows(params, x)
    cache = MLPCache()
    last = len(params.layers) - 1
    for index, layer in enumerate(params.layers):
        cache.inputs.append(out)
        pre = out @ layer.weight.T + layer.bias
        cache.pre_activations.append(pre)
        out = pre if index == last else np.maximum(pre, 0.0)
    return out, cache


def backward_mlp(
    params: MLPParams, cache: Optional[MLPCache], d_out: np.ndarray, prefix: str
) -> Tuple[ArrayDict, np.ndarray]:
    """
    Reverse-mode pass for :func:`forward_mlp`.

    ReLU uses subgradient 0 at exactly zero pre-activation.

    Returns:
        (parameter gradients keyed like ``named_arrays(prefix)``, gradient w.r.t. the input rows)
    """
    if cache is None or len(cache.inputs) != len(params.layers):
        raise MissingForwardCacheError("backward called without a matching forward pass")
    grads: ArrayDict = {}
    delta = np.asarray(d_out, dtype=np.float64)
    last = len(params.layers) - 1
    for index in range(last, -1, -1):
        layer = params.layers[index]
        if index != last:
            delta = delta * (cache.pre_activations[index] > 0.0)
        grads[f"{prefix}.{index}.weight"] = delta.T @ cache.inputs[index]
        grads[f"{prefix}.{index}.bias"] = delta.sum(axis=0)
        delta = delta @ layer.weight
    return grads, delta


def encode(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """h = f(x̃) for a single image (any shape flattening to D)."""
    h, _ = forward_mlp(params, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return h[0]


def encode_batch(params: EncoderParams, images: np.ndarray) -> np.ndarray:
    h, _ = forward_mlp(params, images)
    return h


def project(params: ProjectionParams, h: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    (w, z) with w = g(h) before normalization and z = w/‖w‖.

    Raises:
        DegenerateVectorError: If ‖w‖ = 0.
    """
    w, _ = forward_mlp(params, np.asarray(h, dtype=np.float64).reshape(1, -1))
    z, _ = l2_normalize_rows(w)
    return w[0], z[0]


@dataclass
class ContrastiveCache:
    """Everything :func:`backward_contrastive` needs from the forward pass."""

    encoder: MLPCache
    projection: MLPCache
    z: np.ndarray
    norms: np.ndarray


def forward_contrastive(
    encoder: EncoderParams, projection: ProjectionParams, images: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, ContrastiveCache]:
    """Batched f∘g: returns (h, w, z, cache)."""
    h, encoder_cache = forward_mlp(encoder, images)
    w, projection_cache = forward_mlp(projection, h)
    z, norms = l2_normalize_rows(w)
    return h, w, z, ContrastiveCache(encoder_cache, projection_cache, z, norms)


def normalization_backward(z: np.ndarray, norms: np.ndarray, d_z: np.ndarray) -> np.ndarray:
    """Apply ∂z/∂w = (I − z zᵀ)/‖w‖ row by row."""
    radial = np.sum(z * d_z, axis=1, keepdims=True)
    return (d_z - radial * z) / norms[:, None]


def backward_contrastive(
    encoder: EncoderParams,
    projection: ProjectionParams,
    cache: Optional[ContrastiveCache],
    d_z: Optional[np.ndarray] = None,
    d_h: Optional[np.ndarray] = None,
) -> ArrayDict:
    """
    Parameter gradients of a scalar loss given upstream gradients at z and/or h.

    Keys follow ``encoder.named_arrays("encoder")`` and
    ``projection.named_arrays("projection")``.
    """
    if cache is None:
        raise MissingForwardCacheError("backward_contrastive called without a forward cache")
    batch = cache.z.shape[0]
    grads: ArrayDict = {}
    upstream_h = np.zeros((batch, encoder.out_dim)) if d_h is None else np.asarray(d_h, dtype=np.float64)
    if d_z is not None:
        d_w = normalization_backward(cache.z, cache.norms, np.asarray(d_z, dtype=np.float64))
        projection_grads, d_from_projection = backward_mlp(projection, cache.projection, d_w, "projection")
        grads.update(projection_grads)
        upstream_h = upstream_h + d_from_projection
    else:
        grads.update({k: np.zeros_like(v) for k, v in projection.named_arrays("projection").items()})
    encoder_grads, _ = backward_mlp(encoder, cache.encoder, upstream_h, "encoder")
    grads.update(encoder_grads)
    return grads


def teacher_logits(params: TeacherParams, images: np.ndarray) -> np.ndarray:
    logits, _ = forward_mlp(params, images)
    return logits


def teacher_predict_batch(params: TeacherParams, images: np.ndarray) -> np.ndarray:
    """Row-wise softened predictions p^t = softmax(logits / τ̃)."""
    scaled = teacher_logits(params, images) / params.tau_soft
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    exp = np.exp(scaled)
    return exp / exp.sum(axis=1, keepdims=True)


def teacher_predict(params: TeacherParams, x: np.ndarray) -> np.ndarray:
    """p^t = t(x̃) for a single image."""
    return teacher_predict_batch(params, np.asarray(x, dtype=np.float64).reshape(1, -1))[0]


@dataclass
class OracleTeacher:
    """
    Controllable stand-in for a pretrained teacher.

    Classifies by the nearest class template and returns the label-smoothed
    one-hot (1−ε)·e_c + ε/C.
    """

    templates: np.ndarray
    epsilon: float = 0.1

    def __post_init__(self) -> None:
        self.templates = np.asarray(self.templates, dtype=np.float64).reshape(len(self.templates), -1)

    @property
    def classes(self) -> int:
        return self.templates.shape[0]

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        rows = np.asarray(images, dtype=np.float64).reshape(-1, self.templates.shape[1])
        distances = ((rows[:, None, :] - self.templates[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argmin(distances, axis=1)
        preds = np.full((rows.shape[0], self.classes), self.epsilon / self.classes)
        preds[np.arange(rows.shape[0]), nearest] += 1.0 - self.epsilon
        return preds

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_batch(np.asarray(x).reshape(1, -1))[0]


def param_checksum(params: MLPParams) -> str:
    """SHA-256 over every weight and bias, in layer order."""
    arrays = []
    for layer in params.layers:
        arrays.extend([layer.weight, layer.bias])
    return array_checksum(*arrays)


class Constants:
    MAGIC = b"GSCM"
    VERSION = 1
    HEADER = struct.Struct("<4sII")     # magic, version, network count
    NETWORK = struct.Struct("<IdI")     # role, softening temperature, layer count
    LAYER = struct.Struct("<II")        # out, in


_ROLE_TYPES = {
    NetworkRole.ENCODER: EncoderParams,
    NetworkRole.PROJECTION: ProjectionParams,
    NetworkRole.TEACHER: TeacherParams,
}


def save_checkpoint(path: Union[str, Path], networks: Mapping[NetworkRole, MLPParams]) -> None:
    """Write networks to the little-endian GSCM checkpoint format."""
    chunks = [Constants.HEADER.pack(Constants.MAGIC, Constants.VERSION, len(networks))]
    for role in sorted(networks, key=int):
        params = networks[role]
        tau_soft = params.tau_soft if isinstance(params, TeacherParams) else 0.0
        chunks.append(Constants.NETWORK.pack(int(role), tau_soft, len(params.layers)))
        for layer in params.layers:
            chunks.append(Constants.LAYER.pack(layer.out_dim, layer.in_dim))
            chunks.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    target = ensure_parent(path)
    target.write_bytes(b"".join(chunks))
    logger.info(f"Saved checkpoint with {len(networks)} network(s) to {target}")


class _Reader:
    def __init__(self, data: bytes, source: Path):
        self.data = data
        self.source = source
        self.offset = 0

    def unpack(self, layout: struct.Struct) -> Tuple:
        if self.offset + layout.size > len(self.data):
            raise TruncatedFileError(f"{self.source}: checkpoint truncated at byte {self.offset}")
        values = layout.unpack_from(self.data, self.offset)
        self.offset += layout.size
        return values

    def floats(self, count: int) -> np.ndarray:
        end = self.offset + 8 * count
        if end > len(self.data):
            raise TruncatedFileError(f"{self.source}: checkpoint truncated at byte {self.offset}")
        values = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.offset)
        self.offset = end
        return values.astype(np.float64)


def load_checkpoint(path: Union[str, Path]) -> Dict[NetworkRole, MLPParams]:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        BadMagicError, UnsupportedVersionError, TruncatedFileError, FormatError
    """
    source = Path(path)
    data = source.read_bytes()
    if len(data) >= 4 and data[:4] != Constants.MAGIC:
        raise BadMagicError(f"{source}: not a GSCM checkpoint (magic {data[:4]!r})")
    reader = _Reader(data, source)
    _, version, count = reader.unpack(Constants.HEADER)
    if version != Constants.VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported checkpoint version {version}")

    networks: Dict[NetworkRole, MLPParams] = {}
    for _ in range(count):
        raw_role, tau_soft, n_layers = reader.unpack(Constants.NETWORK)
        try:
            role = NetworkRole(raw_role)
        except ValueError as exc:
            raise FormatError(f"{source}: unknown network role {raw_role}") from exc
        layers = []
        for _ in range(n_layers):
            out_dim, in_dim = reader.unpack(Constants.LAYER)
            weight = reader.floats(out_dim * in_dim).reshape(out_dim, in_dim)
            layers.append(Dense(weight, reader.floats(out_dim)))
        try:
            if role == NetworkRole.TEACHER:
                networks[role] = TeacherParams(layers, tau_soft=tau_soft)
            else:
                networks[role] = _ROLE_TYPES[role](layers)
        except ValueError as exc:
            raise FormatError(f"{source}: invalid {role.name.lower()} network: {exc}") from exc
    if reader.offset != len(data):
        raise FormatError(f"{source}: {len(data) - reader.offset} trailing bytes after payload")
    return networks
