"""Embedding batches, cosine similarity geometry, and the normalization Jacobian.

Everything downstream (diffusion, distillation losses, metrics) works on
row-wise unit-normalized embeddings z_i = v_i / ||v_i|| and their cosine
similarity matrix D_ij = z_i . z_j. The Jacobian of the normalization map is
the chain factor that turns gradients w.r.t. z into gradients w.r.t. the raw
encoder output v, so it lives here next to the map itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ZeroNormRow

ZERO_NORM_EPS = 1e-12


def _as_matrix(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected a nonempty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding matrix contains non-finite entries")
    return arr


def _as_labels(labels, n: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {lab.shape}")
    return lab


@dataclass(frozen=True)
class RawEmbeddingBatch:
    """Pre-normalization encoder outputs with integer class labels.

    Every row must have strictly positive norm; normalization rejects rows
    below ZERO_NORM_EPS.
    """

    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        vec = _as_matrix(self.vectors)
        lab = _as_labels(self.labels, vec.shape[0])
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class EmbeddingBatch:
    """Row-wise unit-norm embeddings with integer class labels."""

    vectors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        vec = _as_matrix(self.vectors)
        lab = _as_labels(self.labels, vec.shape[0])
        norms = np.linalg.norm(vec, axis=1)
        bad = np.nonzero(np.abs(norms - 1.0) > 1e-9)[0]
        if bad.size:
            raise ValueError(
                f"rows {bad.tolist()} are not unit-norm (max deviation "
                f"{np.abs(norms - 1.0).max():.3e})"
            )
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def normalize_rows(vectors, eps: float = ZERO_NORM_EPS) -> np.ndarray:
    """Divide each row by its Euclidean norm. Raises ZeroNormRow below eps."""
    vec = _as_matrix(vectors)
    norms = np.linalg.norm(vec, axis=1)
    bad = np.nonzero(norms < eps)[0]
    if bad.size:
        raise ZeroNormRow(int(bad[0]), float(norms[bad[0]]))
    return vec / norms[:, None]


def l2_normalize(batch: RawEmbeddingBatch, eps: float = ZERO_NORM_EPS) -> EmbeddingBatch:
    """Map v_i to z_i = v_i / ||v_i||, preserving labels."""
    return EmbeddingBatch(normalize_rows(batch.vectors, eps=eps), batch.labels)


def cosine_similarity_matrix(batch: EmbeddingBatch | np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities D_ij = z_i . z_j of a unit-norm batch.

    Entries are clipped to [-1, 1] to absorb last-bit rounding; the diagonal
    is 1 up to the same rounding.
    """
    z = batch.vectors if isinstance(batch, EmbeddingBatch) else np.asarray(batch, dtype=np.float64)
    return np.clip(z @ z.T, -1.0, 1.0)


def normalization_jacobian_apply(v, upstream, eps: float = ZERO_NORM_EPS) -> np.ndarray:
    """Apply the Jacobian of v -> v/||v|| to an upstream gradient vector.

    Returns (1/||v||)(I - z z^T) upstream with z = v/||v||; the output is
    orthogonal to z, reflecting that normalized embeddings move on the sphere.
    """
    v = np.asarray(v, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm < eps:
        raise ZeroNormRow(0, norm)
    z = v / norm
    return (upstream - z * float(z @ upstream)) / norm
