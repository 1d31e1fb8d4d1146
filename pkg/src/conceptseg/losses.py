"""Pixel-to-segment contrastive, VQ and co-occurrence losses with analytic gradients.

All gradients are with respect to the raw pixel embeddings of the batch (directly
and through the segment means they average into) and the codebook vectors.
Memory-bank entries are constants: they enter the losses but never receive
gradient.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .concepts import Codebook, CooccurrenceIndex, build_cooccurrence
from .embeddings import DEGENERATE_NORM, scatter_rows
from .pseudoseg import SegmentMap


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 1.0
    lambda_v: float = 2.0
    lambda_c: float = 1.0
    kappa: float = 10.0
    beta: float = 0.5

    def __post_init__(self):
        vals = (self.lambda_s, self.lambda_v, self.lambda_c, self.kappa, self.beta)
        if not all(np.isfinite(vals)):
            raise ValueError("loss weights must be finite")
        if min(self.lambda_s, self.lambda_v, self.lambda_c) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")


class MemoryBank:
    """FIFO of frozen segment embeddings from the most recent batches."""

    def __init__(self, capacity_batches: int, dim: int):
        if capacity_batches < 0:
            raise ValueError("bank capacity must be >= 0")
        self.capacity_batches = capacity_batches
        self.dim = dim
        self._batches: deque = deque()

    def push(self, vectors, image_ids, concept_ids, sizes, origins=None) -> None:
        """Store a batch; ``origins`` names the dataset image each segment came from."""
        if self.capacity_batches == 0:
            return
        if origins is None:
            origins = np.full(len(vectors), -1)
        entry = tuple(np.array(a, copy=True)
                      for a in (vectors, image_ids, concept_ids, sizes, origins))
        for a in entry:
            a.setflags(write=False)
        self._batches.append(entry)
        while len(self._batches) > self.capacity_batches:
            self._batches.popleft()

    def _cat(self, i, empty):
        if not self._batches:
            return empty
        return np.concatenate([b[i] for b in self._batches])

    @property
    def vectors(self) -> np.ndarray:
        return self._cat(0, np.zeros((0, self.dim)))

    @property
    def image_ids(self) -> np.ndarray:
        return self._cat(1, np.zeros(0, dtype=np.int64))

    @property
    def concept_ids(self) -> np.ndarray:
        return self._cat(2, np.zeros(0, dtype=np.int64))

    @property
    def sizes(self) -> np.ndarray:
        return self._cat(3, np.zeros(0, dtype=np.int64))

    @property
    def origins(self) -> np.ndarray:
        return self._cat(4, np.zeros(0, dtype=np.int64))

    @property
    def num_batches(self) -> int:
        return len(self._batches)

    def __len__(self) -> int:
        return sum(len(b[0]) for b in self._batches)


@dataclass
class SegmentBatch:
    """Pixels of all views in a batch with their merged segment membership.

    ``samples`` indexes the pixels that carry contrastive loss terms; segment
    means always use every pixel.
    """

    pixels: np.ndarray  # (P, D)
    pixel_segment: np.ndarray  # (P,) index into segments
    segment_image: np.ndarray  # (S,) image instance id of each segment
    samples: np.ndarray  # (n,) pixel indices
    concept_ids: np.ndarray | None = None  # (S,)
    segment_source: np.ndarray | None = None  # (S,) source segment id
    segment_origin: np.ndarray | None = None  # (S,) dataset image index

    @property
    def segment_count(self) -> int:
        return len(self.segment_image)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.pixel_segment, minlength=self.segment_count)

    def means(self) -> np.ndarray:
        sums = scatter_rows(self.pixel_segment, self.pixels, self.segment_count)
        return sums / self.sizes()[:, None]


def merge_views(view_maps: list[SegmentMap], view_images: list[int]
                ) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Merge the same source segment across views of the same image instance.

    Returns per-view arrays of batch segment indices, plus the image instance
    and source id of every batch segment.
    """
    keys = {}
    seg_image, seg_source, out = [], [], []
    for smap, img in zip(view_maps, view_images):
        src = smap.source_ids if smap.source_ids is not None else np.arange(smap.segment_count)
        lut = np.empty(smap.segment_count, dtype=np.int64)
        for dense, s in enumerate(src.tolist()):
            key = (img, s)
            if key not in keys:
                keys[key] = len(seg_image)
                seg_image.append(img)
                seg_source.append(s)
            lut[dense] = keys[key]
        out.append(lut[smap.ids])
    return out, np.asarray(seg_image, dtype=np.int64), np.asarray(seg_source, dtype=np.int64)


def build_batch(view_fields: list[np.ndarray], view_maps: list[SegmentMap],
                view_images: list[int], samples_per_image: int | None,
                rng: np.random.Generator | None = None,
                view_origins: list[int] | None = None) -> SegmentBatch:
    """Assemble a :class:`SegmentBatch` from per-view embedding arrays (H, W, D).

    Pixels are sampled per image instance across all of its views; ``None``
    keeps every pixel. ``view_origins`` gives the dataset image of each view.
    """
    seg_per_view, seg_image, seg_source = merge_views(view_maps, view_images)
    pixels = np.concatenate([f.reshape(-1, f.shape[-1]) for f in view_fields])
    pixel_segment = np.concatenate([s.ravel() for s in seg_per_view])
    owner = np.concatenate([np.full(s.size, img) for s, img in zip(seg_per_view, view_images)])
    if samples_per_image is None:
        samples = np.arange(len(pixels))
    else:
        rng = rng or np.random.default_rng(0)
        chosen = []
        for img in dict.fromkeys(view_images):
            idx = np.nonzero(owner == img)[0]
            k = min(samples_per_image, len(idx))
            chosen.append(np.sort(rng.choice(idx, size=k, replace=False)))
        samples = np.concatenate(chosen)
    origin = None
    if view_origins is not None:
        lookup = dict(zip(view_images, view_origins))
        origin = np.array([lookup[i] for i in seg_image.tolist()], dtype=np.int64)
    return SegmentBatch(pixels, pixel_segment, seg_image, samples, None, seg_source, origin)


@dataclass
class TermResult:
    value: float
    grad_pixels: np.ndarray  # (P, D)
    grad_means: np.ndarray  # (S, D) gradient arriving at batch segment means
    grad_codebook: np.ndarray | None = None  # (K, D)
    skipped: int = 0
    degenerate: int = 0


@dataclass
class LossReport:
    l_s: float
    l_v: float
    l_c: float
    total: float
    grad_pixels: np.ndarray
    grad_codebook: np.ndarray
    degenerate_similarity_count: int = 0
    skipped_pixels: int = 0
    grad_norms: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        return {"l_s": self.l_s, "l_v": self.l_v, "l_c": self.l_c, "total": self.total,
                "degenerate": self.degenerate_similarity_count,
                "skipped": self.skipped_pixels,
                "grad_norms": dict(self.grad_norms)}


def _unit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=1)
    bad = norm < DEGENERATE_NORM
    safe = np.where(bad, 1.0, norm)
    return np.where(bad[:, None], 0.0, x / safe[:, None]), safe, bad


def cosine_and_backward(a: np.ndarray, b: np.ndarray):
    """Pairwise cosine between rows of a and b, with a closure for its vector-Jacobian product."""
    ua, na, bad_a = _unit(a)
    ub, nb, bad_b = _unit(b)
    c = ua @ ub.T

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gc = g * c
        da = (g @ ub - gc.sum(axis=1)[:, None] * ua) / na[:, None]
        db = (g.T @ ua - gc.sum(axis=0)[:, None] * ub) / nb[:, None]
        da[bad_a] = 0.0
        db[bad_b] = 0.0
        return da, db

    degenerate = int(bad_a.sum()) * len(b) + int(bad_b.sum()) * len(a) \
        - int(bad_a.sum()) * int(bad_b.sum())
    return c, backward, degenerate


def contrastive_term(batch: SegmentBatch, means: np.ndarray, bank_vectors: np.ndarray,
                     positive: np.ndarray, kappa: float,
                     valid: np.ndarray | None = None) -> TermResult:
    """Mean over sampled pixels of ``-log sum_pos exp(k sim) / sum_all exp(k sim)``.

    ``positive`` is a boolean (n_samples, S + B) mask over batch segments
    followed by bank entries; ``valid`` optionally drops candidates from the
    denominator (positives always count).
    """
    n_pix, dim = batch.pixels.shape
    s = batch.segment_count
    candidates = np.concatenate([means, bank_vectors]) if len(bank_vectors) else means
    z = batch.pixels[batch.samples]
    c, backward, degenerate = cosine_and_backward(z, candidates)
    logits = kappa * c
    has_pos = positive.any(axis=1)
    skipped = int((~has_pos).sum())
    n = int(has_pos.sum())
    grad_pixels = np.zeros((n_pix, dim))
    if n == 0:
        return TermResult(0.0, grad_pixels, np.zeros((s, dim)), None, skipped, degenerate)
    # cosine logits lie in [-kappa, kappa], so one shift by the row max serves
    # both sums without underflow
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    e_all = e if valid is None else e * (valid | positive)
    e_pos = e * positive
    tot_all = e_all.sum(axis=1, keepdims=True)
    tot_pos = e_pos.sum(axis=1, keepdims=True)
    tot_pos = np.where(tot_pos > 0, tot_pos, 1.0)
    per_pixel = np.where(has_pos, np.log(tot_all[:, 0]) - np.log(tot_pos[:, 0]), 0.0)
    value = float(per_pixel.sum() / n)
    g = np.where(has_pos[:, None], (e_all / tot_all - e_pos / tot_pos) * (kappa / n), 0.0)
    dz, dcand = backward(g)
    grad_means = dcand[:s]
    grad_pixels += scatter_rows(batch.samples, dz, n_pix)
    grad_pixels += _means_backward(batch, grad_means)
    return TermResult(value, grad_pixels, grad_means, None, skipped, degenerate)


def _means_backward(batch: SegmentBatch, grad_means: np.ndarray) -> np.ndarray:
    return (grad_means / batch.sizes()[:, None])[batch.pixel_segment]


def local_segmentation_loss(batch: SegmentBatch, bank: MemoryBank | None, kappa: float,
                            means: np.ndarray | None = None) -> TermResult:
    """Positives are the merged segment that contains the pixel; everything else,
    including every bank entry, is a negative.

    Bank entries cut from the same dataset image as the pixel are left out
    entirely, since they would be copies of its own segments.
    """
    means = batch.means() if means is None else means
    bank_vectors = bank.vectors if bank is not None else np.zeros((0, batch.pixels.shape[1]))
    own = batch.pixel_segment[batch.samples]
    positive = np.zeros((len(own), batch.segment_count + len(bank_vectors)), dtype=bool)
    positive[np.arange(len(own)), own] = True
    valid = None
    if batch.segment_origin is not None and len(bank_vectors):
        valid = np.ones_like(positive)
        pixel_origin = batch.segment_origin[own]
        valid[:, batch.segment_count:] = bank.origins[None, :] != pixel_origin[:, None]
    return contrastive_term(batch, means, bank_vectors, positive, kappa, valid)


def cooccurrence_positives(pixel_concepts: np.ndarray, candidate_concepts: np.ndarray,
                           index: CooccurrenceIndex) -> np.ndarray:
    return index.matrix[np.ix_(pixel_concepts, candidate_concepts)]


def cooccurrence_loss(batch: SegmentBatch, index: CooccurrenceIndex, bank: MemoryBank | None,
                      kappa: float, means: np.ndarray | None = None) -> TermResult:
    """Positives are all batch and bank segments whose concept co-occurs with the
    concept of the pixel's own segment."""
    if batch.concept_ids is None:
        raise ValueError("batch segments need concept ids")
    means = batch.means() if means is None else means
    dim = batch.pixels.shape[1]
    bank_vectors = bank.vectors if bank is not None else np.zeros((0, dim))
    bank_concepts = bank.concept_ids if bank is not None else np.zeros(0, dtype=np.int64)
    candidate_concepts = np.concatenate([batch.concept_ids, bank_concepts]).astype(np.int64)
    pixel_concepts = batch.concept_ids[batch.pixel_segment[batch.samples]]
    positive = cooccurrence_positives(pixel_concepts, candidate_concepts, index)
    return contrastive_term(batch, means, bank_vectors, positive, kappa)


def vq_loss(batch: SegmentBatch, codebook: Codebook, beta: float,
            means: np.ndarray | None = None) -> TermResult:
    """Cosine VQ loss with stop-gradient split, averaged over pixels.

    Each segment contributes ``(1 - sim(sg(z_s), e_k)) + beta (1 - sim(z_s, sg(e_k)))``
    weighted by its pixel count. The first part only moves ``e_k``; the second
    only moves ``z_s`` (and through it the member pixels).
    """
    if batch.concept_ids is None:
        raise ValueError("batch segments need concept ids")
    means = batch.means() if means is None else means
    sizes = batch.sizes()
    w = sizes / sizes.sum()
    codes = codebook.vectors[batch.concept_ids]
    uz, nz, bad_z = _unit(means)
    ue, ne, bad_e = _unit(codes)
    sim = (uz * ue).sum(axis=1)
    value = float((w * (1.0 + beta) * (1.0 - sim)).sum())
    # d sim / d z and d sim / d e, zero for degenerate vectors
    dsim_dz = (ue - sim[:, None] * uz) / nz[:, None]
    dsim_de = (uz - sim[:, None] * ue) / ne[:, None]
    dsim_dz[bad_z | bad_e] = 0.0
    dsim_de[bad_z | bad_e] = 0.0
    grad_means = -(beta * w)[:, None] * dsim_dz
    grad_codes = -w[:, None] * dsim_de
    grad_codebook = np.zeros_like(codebook.vectors)
    np.add.at(grad_codebook, batch.concept_ids, grad_codes)
    degenerate = int((bad_z | bad_e).sum())
    return TermResult(value, _means_backward(batch, grad_means), grad_means, grad_codebook,
                      0, degenerate)


def total_loss(l_s: TermResult, l_v: TermResult, l_c: TermResult, weights: LossWeights,
               codebook_shape: tuple[int, int]) -> LossReport:
    """Weighted sum of the three terms and of their gradients."""
    terms = {"l_s": (weights.lambda_s, l_s), "l_v": (weights.lambda_v, l_v),
             "l_c": (weights.lambda_c, l_c)}
    grad_pixels = np.zeros_like(l_s.grad_pixels)
    grad_codebook = np.zeros(codebook_shape)
    norms = {}
    for name, (lam, term) in terms.items():
        if lam != 0:
            grad_pixels += lam * term.grad_pixels
            if term.grad_codebook is not None:
                grad_codebook += lam * term.grad_codebook
        norms[name] = float(np.linalg.norm(term.grad_pixels))
    norms["codebook"] = float(np.linalg.norm(grad_codebook))
    norms["total"] = float(np.linalg.norm(grad_pixels))
    total = weights.lambda_s * l_s.value + weights.lambda_v * l_v.value \
        + weights.lambda_c * l_c.value
    return LossReport(l_s.value, l_v.value, l_c.value, total, grad_pixels, grad_codebook,
                      l_s.degenerate + l_v.degenerate + l_c.degenerate,
                      l_s.skipped + l_c.skipped, norms)


def batch_cooccurrence(batch: SegmentBatch, bank: MemoryBank | None, num_concepts: int
                       ) -> CooccurrenceIndex:
    """Co-occurrence over the current batch plus banked segments, grouped by image instance."""
    concepts, images = batch.concept_ids, batch.segment_image
    if bank is not None and len(bank):
        concepts = np.concatenate([concepts, bank.concept_ids])
        images = np.concatenate([images, bank.image_ids])
    return build_cooccurrence(concepts, images, num_concepts)


def compute_losses(batch: SegmentBatch, codebook: Codebook, bank: MemoryBank | None,
                   weights: LossWeights, index: CooccurrenceIndex | None = None) -> LossReport:
    """All three terms and their weighted total for a batch with assigned concepts."""
    means = batch.means()
    ls = local_segmentation_loss(batch, bank, weights.kappa, means)
    lv = vq_loss(batch, codebook, weights.beta, means)
    if index is None:
        index = batch_cooccurrence(batch, bank, codebook.size)
    lc = cooccurrence_loss(batch, index, bank, weights.kappa, means)
    return total_loss(ls, lv, lc, weights, codebook.vectors.shape)
