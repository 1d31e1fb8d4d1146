"""Image panels and concept contact sheets."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .concepts import Codebook
from .embeddings import cosine_matrix, pca_project, segment_means
from .inference import kmeans_segment, knn_label
from .io import id_colors, label_palette


def _to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def label_colors(label: np.ndarray) -> np.ndarray:
    pal = np.array(label_palette(), dtype=np.uint8).reshape(-1, 3)
    return pal[np.clip(label, 0, 255)]


def image_panel(encoder, image: np.ndarray, key=None, index=None, k: int = 25,
                iters: int = 50, k_neighbors: int = 15, seed: int = 0) -> np.ndarray:
    """raw | PCA of the embedding | k-means segments | predicted labels (if ``index``)."""
    emb = encoder.embed(image, key)
    h, w = emb.values.shape[:2]
    seg = kmeans_segment(emb, k, iters, seed)
    tiles = [_to_uint8(image), _to_uint8(pca_project(emb).reshape(h, w, 3)),
             id_colors(seg.ids)]
    if index is not None:
        cls = knn_label(segment_means(emb, seg).vectors, index, k_neighbors)
        tiles.append(label_colors(cls[seg.ids]))
    gap = np.full((h, 2, 3), 255, dtype=np.uint8)
    parts = []
    for t in tiles:
        parts += [t, gap]
    return np.concatenate(parts[:-1], axis=1)


def panel(encoder, images, keys=None, index=None, **kw) -> np.ndarray:
    """One row per image; all images must share a size."""
    keys = [None] * len(images) if keys is None else keys
    rows = [image_panel(encoder, im, key, index, **kw) for im, key in zip(images, keys)]
    gap = np.full((2, rows[0].shape[1], 3), 255, dtype=np.uint8)
    parts = []
    for r in rows:
        parts += [r, gap]
    return np.concatenate(parts[:-1], axis=0)


def usage_order(codebook: Codebook) -> list[int]:
    """Concept ids by descending usage; equal counts keep ascending id."""
    return sorted(range(codebook.size), key=lambda c: (-int(codebook.usage[c]), c))


def _crop(image: np.ndarray, mask: np.ndarray, tile: int) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    crop = _to_uint8(image)[r0:r1, c0:c1].copy()
    crop[~mask[r0:r1, c0:c1]] = 128
    return np.asarray(Image.fromarray(crop).resize((tile, tile), Image.NEAREST))


def concept_sheet(encoder, codebook: Codebook, images, keys=None, top_n: int = 8,
                  max_concepts: int | None = None, tile: int = 24, k: int = 25,
                  iters: int = 50, seed: int = 0):
    """Contact sheet of the segments most similar to each used concept.

    Rows follow ``usage_order``; concepts never used are left out.  Returns the
    sheet and the concept id of each row.
    """
    keys = [None] * len(images) if keys is None else keys
    crops, vecs = [], []
    for i, (im, key) in enumerate(zip(images, keys)):
        emb = encoder.embed(im, key)
        seg = kmeans_segment(emb, k, iters, seed + i)
        vecs.append(segment_means(emb, seg).vectors)
        crops += [(i, seg.ids == s) for s in range(seg.segment_count)]
    sims = cosine_matrix(codebook.vectors, np.concatenate(vecs))
    order = [c for c in usage_order(codebook) if codebook.usage[c] > 0]
    if max_concepts is not None:
        order = order[:max_concepts]
    blank = np.full((tile, tile, 3), 255, dtype=np.uint8)
    rows = []
    for c in order:
        best = np.lexsort((np.arange(sims.shape[1]), -sims[c]))[:top_n]
        cells = [_crop(images[crops[j][0]], crops[j][1], tile) for j in best]
        cells += [blank] * (top_n - len(cells))
        rows.append(np.concatenate(cells, axis=1))
    if not rows:
        return np.full((tile, tile * top_n, 3), 255, dtype=np.uint8), order
    return np.concatenate(rows, axis=0), order
