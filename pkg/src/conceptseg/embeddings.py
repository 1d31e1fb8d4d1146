"""Pixel embedding fields on the unit hypersphere and segment-level primitives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pseudoseg import SegmentMap

DEGENERATE_NORM = 1e-12


@dataclass
class EmbeddingField:
    values: np.ndarray  # (H, W, D)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1, self.dim)


@dataclass
class SegmentEmbeddings:
    vectors: np.ndarray  # (S, D), plain means, not renormalized
    sizes: np.ndarray  # (S,)
    image_id: int | str = 0
    concept_ids: np.ndarray | None = None

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class DegenerateCounter:
    """Tally of cosine similarities that fell back to 0 on a near-zero vector."""

    count: int = 0

    def add(self, n: int) -> None:
        self.count += int(n)


_global_degenerate = DegenerateCounter()


def normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale vectors to unit L2 norm; vectors with norm below 1e-12 are left as zeros."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    safe = np.where(norm < DEGENERATE_NORM, 1.0, norm)
    return np.where(norm < DEGENERATE_NORM, 0.0, x / safe)


def init_field(width: int, height: int, dim: int, seed: int) -> EmbeddingField:
    if dim < 2:
        raise ValueError(f"embedding dimension must be >= 2, got {dim}")
    if width < 1 or height < 1:
        raise ValueError("field must be at least 1x1")
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((height, width, dim))
    return EmbeddingField(normalize(values))


def scatter_rows(index: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[index[i]] += rows[i]`` for an (n, D) zero array; repeated indices accumulate."""
    out = np.empty((rows.shape[1], n))
    for d in range(rows.shape[1]):
        out[d] = np.bincount(index, weights=rows[:, d], minlength=n)
    return out.T


def segment_means(emb: EmbeddingField, seg: SegmentMap, image_id: int | str = 0
                  ) -> SegmentEmbeddings:
    if emb.values.shape[:2] != seg.ids.shape:
        raise ValueError(
            f"field is {emb.values.shape[:2]} but segment map is {seg.ids.shape}")
    ids = seg.ids.ravel()
    sizes = np.bincount(ids, minlength=seg.segment_count)
    sums = scatter_rows(ids, emb.flat(), seg.segment_count)
    return SegmentEmbeddings(sums / sizes[:, None], sizes, image_id)


def cosine(a: np.ndarray, b: np.ndarray, counter: DegenerateCounter | None = None) -> float:
    """Cosine similarity clamped to [-1, 1]; 0 (and a counted event) for near-zero inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        (counter or _global_degenerate).add(1)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray, counter: DegenerateCounter | None = None
                  ) -> np.ndarray:
    """Pairwise cosine between rows of ``a`` (n, D) and ``b`` (m, D)."""
    na = normalize(a)
    nb = normalize(b)
    if counter is not None:
        bad_a = np.linalg.norm(a, axis=1) < DEGENERATE_NORM
        bad_b = np.linalg.norm(b, axis=1) < DEGENERATE_NORM
        counter.add(bad_a.sum() * len(b) + bad_b.sum() * len(a) - bad_a.sum() * bad_b.sum())
    return np.clip(na @ nb.T, -1.0, 1.0)


def pca_project(emb: EmbeddingField, out_dims: int = 3) -> np.ndarray:
    """Project pixel embeddings onto their top principal components, scaled to [0, 1].

    Channels beyond the rank of the covariance are a constant 0.5.
    """
    x = emb.flat()
    if x.shape[0] < out_dims:
        raise ValueError("need at least out_dims pixels")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(evals[0], 0.0) * 1e-10 + 1e-20
    out = np.full((x.shape[0], out_dims), 0.5)
    for c in range(min(out_dims, len(evals))):
        if evals[c] <= tol:
            break
        v = evecs[:, c]
        v = v if v[np.argmax(np.abs(v))] > 0 else -v
        proj = centered @ v
        lo, hi = proj.min(), proj.max()
        if hi - lo > 0:
            out[:, c] = (proj - lo) / (hi - lo)
    return out.reshape(emb.height, emb.width, out_dims)
