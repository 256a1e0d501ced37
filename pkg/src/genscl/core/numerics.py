"""
Deterministic numeric primitives shared by every genscl module.

All arrays are float64. Functions here are pure: identical inputs give
bit-identical outputs.
"""

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DegenerateVectorError, DimensionMismatchError

ArrayLike = Union[Sequence[float], np.ndarray]


def as_vec(values: ArrayLike) -> np.ndarray:
    """
    Convert values into a finite 1-D float64 vector.

    Raises:
        ValueError: If any entry is NaN or infinite.
    """
    vec = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vec)):
        raise ValueError("Vector entries must be finite")
    return vec


def cosine_sim(u: ArrayLike, v: ArrayLike) -> float:
    """
    Cosine similarity uᵀv / (‖u‖‖v‖), clamped to [-1, 1].

    Raises:
        DimensionMismatchError: If u and v differ in length.
        DegenerateVectorError: If either vector has zero norm.
    """
    u_vec = as_vec(u)
    v_vec = as_vec(v)
    if u_vec.shape != v_vec.shape:
        raise DimensionMismatchError(
            f"cosine_sim needs equal dimensions, got {u_vec.size} and {v_vec.size}"
        )
    u_norm = float(np.linalg.norm(u_vec))
    v_norm = float(np.linalg.norm(v_vec))
    if u_norm == 0.0 or v_norm == 0.0:
        raise DegenerateVectorError("cosine_sim is undefined for a zero-norm vector")
    value = float(np.dot(u_vec, v_vec)) / (u_norm * v_norm)
    return min(1.0, max(-1.0, value))


def cosine_similarity_matrix(rows: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between the rows of a matrix, clamped to [-1, 1]."""
    mat = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError(
            f"Row {int(np.argmin(norms))} has zero norm; cosine similarity is undefined"
        )
    sims = (mat @ mat.T) / np.outer(norms, norms)
    return np.clip(sims, -1.0, 1.0)


def _check_tau(tau: float) -> None:
    if not tau > 0.0:
        raise ValueError(f"Temperature must be positive, got {tau}")


def softmax_with_temperature(logits: ArrayLike, tau: float = 1.0) -> np.ndarray:
    """
    Temperature-softened softmax exp(p_i/τ) / Σ_j exp(p_j/τ).

    Computed with max-subtraction so large logits or small τ cannot overflow.
    """
    _check_tau(tau)
    scaled = as_vec(logits) / tau
    shifted = np.exp(scaled - scaled.max())
    return shifted / shifted.sum()


def log_softmax_with_temperature(logits: ArrayLike, tau: float = 1.0) -> np.ndarray:
    """Logarithm of :func:`softmax_with_temperature` via log-sum-exp."""
    _check_tau(tau)
    scaled = as_vec(logits) / tau
    peak = scaled.max()
    return scaled - (peak + math.log(float(np.exp(scaled - peak).sum())))


def l2_normalize(w: ArrayLike) -> np.ndarray:
    """
    Project a vector onto the unit sphere.

    Raises:
        DegenerateVectorError: For the zero vector.
    """
    vec = as_vec(w)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise DegenerateVectorError("Cannot normalize the zero vector")
    return vec / norm


def l2_normalize_rows(w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Normalize every row of a matrix; returns (unit rows, row norms)."""
    mat = np.asarray(w, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateVectorError(
            f"Row {int(np.argmin(norms))} has zero norm and cannot be normalized"
        )
    return mat / norms[:, None], norms


class Rng:
    """
    Seeded, counter-based random stream.

    Wraps numpy's Philox bit generator. The Philox key is derived from the
    seed and a path of stream ids through ``SeedSequence``, so the same
    (seed, path) gives the same draws on every platform. An Rng is owned by
    one logical stream; use :meth:`child` to hand out sub-streams.
    """

    def __init__(self, seed: int, path: Tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"Seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(int(part) for part in path)
        key = np.random.SeedSequence(self.seed, spawn_key=self.path).generate_state(
            2, dtype=np.uint64
        )
        self._bit_generator = np.random.Philox(key=key)
        self._generator = np.random.Generator(self._bit_generator)

    def child(self, *ids: int) -> "Rng":
        """Independent sub-stream identified by ``ids`` under this stream."""
        return Rng(self.seed, self.path + tuple(ids))

    @property
    def replay_token(self) -> str:
        """String identifying this stream, e.g. ``7:2:0:5``."""
        return ":".join(str(part) for part in (self.seed,) + self.path)

    @property
    def counter(self) -> Tuple[int, ...]:
        """Current Philox counter state."""
        state = self._bit_generator.state["state"]["counter"]
        return tuple(int(c) for c in state)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._generator.normal(loc, scale, size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        return self._generator.integers(low, high, size)

    def beta(self, a: float, b: float, size=None):
        return self._generator.beta(a, b, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
