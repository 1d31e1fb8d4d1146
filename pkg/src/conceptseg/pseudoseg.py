"""Pseudo segments (local concepts) from graph-based image segmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .augment import ViewTransform


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate an RGB image with values in [0, 1]; returns it as float64 (H, W, 3)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise ValueError("image values must be finite and in [0, 1]")
    return image


@dataclass
class SegmentMap:
    """Per-pixel segment ids for one image or view.

    ``source_ids[i]`` is the id that dense segment ``i`` had in the map it was
    transferred from (``None`` for maps produced directly by a segmenter).
    """

    ids: np.ndarray
    segment_count: int
    source_ids: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.ids.ravel(), minlength=self.segment_count)

    def validate(self, connected: bool = True) -> None:
        ids = self.ids
        if ids.ndim != 2 or ids.size == 0:
            raise ValueError("segment ids must be a non-empty 2-D array")
        if ids.min() < 0 or ids.max() >= self.segment_count:
            raise ValueError("segment id out of range")
        if np.any(self.sizes() == 0):
            raise ValueError("segment ids are not dense")
        if connected:
            for s in range(self.segment_count):
                _, n = ndimage.label(ids == s)
                if n != 1:
                    raise ValueError(f"segment {s} has {n} 4-connected components")


def relabel_dense(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map arbitrary non-negative ids to 0..n-1, ordered by original id.

    Returns the new id array and the original id of every dense id.
    """
    uniq, inverse = np.unique(ids, return_inverse=True)
    return inverse.reshape(ids.shape).astype(np.int64), uniq


def _relabel_raster(labels: np.ndarray) -> tuple[np.ndarray, int]:
    # dense ids in order of first appearance in raster scan
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    uniq = flat[first[order]]
    lut = np.empty(flat.max() + 1, dtype=np.int64)
    lut[uniq] = np.arange(len(uniq))
    return lut[labels], len(uniq)


def grid_edges(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """4-connectivity edges (a, b) over a row-major pixel grid, always with a < b."""
    idx = np.arange(height * width).reshape(height, width)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    return a, b


def edge_weights(image: np.ndarray, smoothing_sigma: float) -> tuple[np.ndarray, ...]:
    """Sorted graph edges ``(a, b, w)`` on the 0-255 scaled, smoothed image.

    Ties in weight are broken by the lower then the higher endpoint index.
    """
    img = image * 255.0
    if smoothing_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(smoothing_sigma, smoothing_sigma, 0))
    h, w, _ = img.shape
    flat = img.reshape(-1, 3)
    a, b = grid_edges(h, w)
    wt = np.sqrt(((flat[a] - flat[b]) ** 2).sum(axis=1))
    order = np.lexsort((b, a, wt))
    return a[order], b[order], wt[order]


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, x: int, y: int) -> int:
        if self.size[x] < self.size[y]:
            x, y = y, x
        self.parent[y] = x
        self.size[x] += self.size[y]
        return x


def felzenszwalb_segment(image: np.ndarray, scale_k: float = 50.0, min_size: int = 20,
                         smoothing_sigma: float = 0.8) -> SegmentMap:
    """Felzenszwalb-Huttenlocher graph segmentation.

    Edge weights are RGB Euclidean distances on the 0-255 scale. Two components
    merge when the joining edge weight is at most ``min(Int(C) + k/|C|)`` over
    both sides; afterwards components smaller than ``min_size`` are absorbed
    along the cheapest remaining edges.
    """
    image = check_image(image)
    if scale_k <= 0:
        raise ValueError("scale_k must be positive")
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    if smoothing_sigma < 0:
        raise ValueError("smoothing_sigma must be non-negative")
    h, w, _ = image.shape
    a, b, wt = edge_weights(image, smoothing_sigma)
    a, b, wt = a.tolist(), b.tolist(), wt.tolist()

    ds = _DisjointSet(h * w)
    threshold = [float(scale_k)] * (h * w)
    for u, v, weight in zip(a, b, wt):
        ru, rv = ds.find(u), ds.find(v)
        if ru != rv and weight <= threshold[ru] and weight <= threshold[rv]:
            r = ds.union(ru, rv)
            threshold[r] = weight + scale_k / ds.size[r]

    for u, v in zip(a, b):
        ru, rv = ds.find(u), ds.find(v)
        if ru != rv and (ds.size[ru] < min_size or ds.size[rv] < min_size):
            ds.union(ru, rv)

    roots = np.array([ds.find(i) for i in range(h * w)]).reshape(h, w)
    ids, count = _relabel_raster(roots)
    return SegmentMap(ids, count)


def transfer_segments(seg: SegmentMap, transform: ViewTransform) -> SegmentMap:
    """Carry a source segment map into an augmented view.

    Dense ids follow the order of the source ids, so the same source segment in
    two views can be matched through ``source_ids``. Cropped-away segments drop out.
    """
    if transform.source_shape != seg.ids.shape:
        raise ValueError(
            f"transform expects a {transform.source_shape} source, map is {seg.ids.shape}")
    source = seg.ids if seg.source_ids is None else seg.source_ids[seg.ids]
    ids, source_ids = relabel_dense(transform.warp(source))
    return SegmentMap(ids, len(source_ids), source_ids)
