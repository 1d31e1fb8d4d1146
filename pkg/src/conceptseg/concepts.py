"""Global concepts: a cosine VQ codebook, segment assignment and concept co-occurrence."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import cosine_matrix, normalize, DEGENERATE_NORM

RESEED_NOISE = 1e-4


@dataclass
class Codebook:
    vectors: np.ndarray  # (K, D) unit rows
    usage: np.ndarray = None  # (K,) assignment counts
    staleness: np.ndarray = None  # (K,) steps since last assignment

    def __post_init__(self):
        k = self.vectors.shape[0]
        if k < 2:
            raise ValueError(f"codebook needs K >= 2, got {k}")
        if self.usage is None:
            self.usage = np.zeros(k, dtype=np.int64)
        if self.staleness is None:
            self.staleness = np.zeros(k, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.vectors.copy(), self.usage.copy(), self.staleness.copy())


def init_codebook(num_concepts: int, dim: int, seed: int,
                  warmup: np.ndarray | None = None) -> Codebook:
    """Random unit codes, or codes drawn from warm-up segment means when given.

    Draws are without replacement when there are at least ``num_concepts``
    usable warm-up vectors; otherwise with replacement plus small noise so
    duplicated codes are not exactly tied.
    """
    if num_concepts < 2:
        raise ValueError(f"codebook needs K >= 2, got {num_concepts}")
    rng = np.random.default_rng(seed)
    if warmup is not None:
        warmup = np.asarray(warmup, dtype=np.float64)
        if warmup.ndim != 2 or warmup.shape[1] != dim:
            raise ValueError(f"warm-up vectors must be (n, {dim})")
        warmup = warmup[np.linalg.norm(warmup, axis=1) >= DEGENERATE_NORM]
    if warmup is None or len(warmup) == 0:
        return Codebook(normalize(rng.standard_normal((num_concepts, dim))))
    pool = normalize(warmup)
    if len(pool) >= num_concepts:
        picked = pool[rng.choice(len(pool), num_concepts, replace=False)]
    else:
        picked = pool[rng.choice(len(pool), num_concepts, replace=True)]
        picked = picked + RESEED_NOISE * rng.standard_normal(picked.shape)
    return Codebook(normalize(picked))


def assign(codebook: Codebook, vectors: np.ndarray, update: bool = True) -> np.ndarray:
    """Nearest concept by cosine similarity for each row of ``vectors``.

    Ties go to the lowest concept index. With ``update`` the usage counters and
    staleness of the codebook are advanced as one training step.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != codebook.dim:
        raise ValueError(f"expected (n, {codebook.dim}) vectors, got {vectors.shape}")
    if len(vectors) == 0:
        ids = np.zeros(0, dtype=np.int64)
    else:
        ids = np.argmax(cosine_matrix(vectors, codebook.vectors), axis=1)
    if update:
        counts = np.bincount(ids, minlength=codebook.size)
        codebook.usage += counts
        codebook.staleness += 1
        codebook.staleness[counts > 0] = 0
    return ids


@dataclass
class CooccurrenceIndex:
    """Unordered concept pairs seen together in at least one image."""

    matrix: np.ndarray  # (K, K) bool, symmetric
    image_concepts: dict = field(default_factory=dict)

    def contains(self, a: int, b: int) -> bool:
        return bool(self.matrix[a, b])

    def pairs(self) -> set[tuple[int, int]]:
        a, b = np.nonzero(np.triu(self.matrix))
        return set(zip(a.tolist(), b.tolist()))


def build_cooccurrence(concept_ids, image_ids, num_concepts: int) -> CooccurrenceIndex:
    concept_ids = np.asarray(concept_ids, dtype=np.int64)
    image_ids = np.asarray(image_ids)
    if concept_ids.shape != image_ids.shape:
        raise ValueError("every segment needs both a concept id and an image id")
    matrix = np.zeros((num_concepts, num_concepts), dtype=bool)
    per_image = {}
    for img in np.unique(image_ids):
        present = np.unique(concept_ids[image_ids == img])
        per_image[img.item() if hasattr(img, "item") else img] = set(present.tolist())
        matrix[np.ix_(present, present)] = True
    return CooccurrenceIndex(matrix, per_image)


def reseed_dead_codes(codebook: Codebook, vectors: np.ndarray, staleness_threshold: float,
                      rng: np.random.Generator) -> int:
    """Replace codes unused for more than ``staleness_threshold`` steps.

    Each stale code moves to a random segment's normalized embedding plus
    noise of scale 1e-4; returns how many codes were replaced.
    """
    stale = np.nonzero(codebook.staleness > staleness_threshold)[0]
    if len(stale) == 0:
        return 0
    pool = normalize(np.asarray(vectors, dtype=np.float64))
    pool = pool[np.linalg.norm(pool, axis=1) > 0.5]
    if len(pool) == 0:
        return 0
    picks = pool[rng.integers(0, len(pool), size=len(stale))]
    codebook.vectors[stale] = normalize(picks + RESEED_NOISE * rng.standard_normal(picks.shape))
    codebook.staleness[stale] = 0
    return len(stale)
