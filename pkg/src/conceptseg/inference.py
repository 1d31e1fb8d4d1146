"""From embeddings to labels: clustering, retrieval, a linear probe and mask propagation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .embeddings import EmbeddingField, normalize, scatter_rows
from .pseudoseg import SegmentMap, _relabel_raster

IGNORE_ID = 255


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    objectives: list[float]  # after each iteration

    @property
    def objective(self) -> float:
        return self.objectives[-1]


def spherical_objective(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    """Sum over points of ``1 - cos(x, assigned centroid)``."""
    return float((1.0 - (normalize(x) * normalize(centroids)[labels]).sum(axis=1)).sum())


def _plusplus_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    dist = 1.0 - x @ x[chosen[0]]
    for _ in range(1, k):
        d = np.maximum(dist, 0.0)
        total = d.sum()
        if total <= 0:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[0])
        else:
            nxt = int(rng.choice(n, p=d / total))
        chosen.append(nxt)
        dist = np.minimum(dist, 1.0 - x @ x[nxt])
    return x[chosen].copy()


def spherical_kmeans(x: np.ndarray, k: int, iters: int = 50, seed: int = 0,
                     restarts: int = 1, refine: bool = False) -> KMeansResult:
    """Cosine k-means: centroid = normalized member mean, k-means++ seeding.

    Stops after ``iters`` iterations or when assignments stop changing. An
    empty cluster takes the point farthest from its current centroid. With
    ``restarts`` > 1, odd-numbered restarts seed from uniformly drawn points
    instead, and the run with the lowest final objective is kept. ``refine``
    finishes each run with single-point moves until none lowers the objective.
    """
    x = normalize(np.asarray(x, dtype=np.float64))
    n = len(x)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best = None
    for r in range(restarts):
        rng = np.random.default_rng(seed if r == 0 else [seed, r])
        if r % 2 == 0:
            init = _plusplus_init(x, k, rng)
        else:
            init = x[rng.choice(n, size=k, replace=False)].copy()
        result = _lloyd(x, init, iters)
        if refine:
            result = _refine(x, result)
        if best is None or result.objective < best.objective:
            best = result
    return best


def _refine(x: np.ndarray, result: KMeansResult) -> KMeansResult:
    """Hartigan-style pass: move single points while that lowers the objective.

    The objective equals ``n - sum_c |S_c|`` with S_c the member sum of cluster c.
    """
    k = len(result.centroids)
    labels = result.labels.copy()
    sums = scatter_rows(labels, x, k)
    counts = np.bincount(labels, minlength=k)
    norms = np.linalg.norm(sums, axis=1)
    moved = True
    while moved:
        moved = False
        for i in range(len(x)):
            a = labels[i]
            if counts[a] == 1:
                continue
            gain_in = np.linalg.norm(sums + x[i], axis=1) - norms
            gain_in[a] = -np.inf
            b = int(np.argmax(gain_in))
            if np.linalg.norm(sums[a] - x[i]) - norms[a] + gain_in[b] > 1e-12:
                sums[a] -= x[i]
                sums[b] += x[i]
                norms[[a, b]] = np.linalg.norm(sums[[a, b]], axis=1)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moved = True
    centroids = normalize(sums)
    objective = float((1.0 - (x * centroids[labels]).sum(axis=1)).sum())
    return KMeansResult(labels, centroids, result.objectives + [objective])


def _lloyd(x: np.ndarray, centroids: np.ndarray, iters: int) -> KMeansResult:
    n, k = len(x), len(centroids)
    labels = np.argmax(x @ centroids.T, axis=1)
    objectives = []
    for _ in range(max(iters, 1)):
        sums = scatter_rows(labels, x, k)
        filled = np.bincount(labels, minlength=k) > 0
        centroids[filled] = normalize(sums[filled])
        sims = x @ centroids.T
        new = np.argmax(sims, axis=1)
        counts = np.bincount(new, minlength=k)
        for c in np.nonzero(counts == 0)[0]:
            own = sims[np.arange(n), new]
            movable = counts[new] > 1
            if not movable.any():
                break
            far = int(np.argmin(np.where(movable, own, np.inf)))
            counts[new[far]] -= 1
            new[far] = c
            counts[c] = 1
            centroids[c] = x[far]
            sims[far, c] = 1.0
        own = np.take_along_axis(sims, new[:, None], axis=1)
        objectives.append(float((1.0 - own).sum()))
        stable = np.array_equal(new, labels)
        labels = new
        if stable:
            break
    return KMeansResult(labels, centroids, objectives)


def split_components(cluster_map: np.ndarray) -> SegmentMap:
    """Turn a cluster label image into a SegmentMap of 4-connected components."""
    out = np.zeros(cluster_map.shape, dtype=np.int64)
    offset = 0
    for c in np.unique(cluster_map):
        comp, n = ndimage.label(cluster_map == c)
        out[comp > 0] = comp[comp > 0] - 1 + offset
        offset += n
    ids, count = _relabel_raster(out)
    return SegmentMap(ids, count)


def kmeans_segment(emb: EmbeddingField, k: int = 25, iters: int = 50, seed: int = 0,
                   restarts: int = 1, refine: bool = False) -> SegmentMap:
    result = spherical_kmeans(emb.flat(), k, iters, seed, restarts, refine)
    return split_components(result.labels.reshape(emb.height, emb.width))


def segment_majority(labels: np.ndarray, seg: SegmentMap, num_classes: int,
                     ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Majority ground-truth class per segment, ignoring ``ignore_id``; -1 if all ignored."""
    lab = labels.ravel().astype(np.int64)
    ids = seg.ids.ravel()
    keep = lab != ignore_id
    counts = np.zeros((seg.segment_count, num_classes), dtype=np.int64)
    np.add.at(counts, (ids[keep], lab[keep]), 1)
    out = np.argmax(counts, axis=1)
    out[counts.sum(axis=1) == 0] = -1
    return out


@dataclass
class RetrievalIndex:
    vectors: np.ndarray  # (N, D) unit rows
    classes: np.ndarray  # (N,)

    def __post_init__(self):
        self.vectors = normalize(np.asarray(self.vectors, dtype=np.float64))
        self.classes = np.asarray(self.classes, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.classes)


def knn_label(queries: np.ndarray, index: RetrievalIndex, k_neighbors: int = 15) -> np.ndarray:
    """Majority class among the ``k_neighbors`` most cosine-similar index entries.

    Neighbour selection breaks similarity ties by class id; vote ties go to the
    larger summed similarity, then the lower class id.
    """
    if len(index) == 0:
        raise ValueError("retrieval index is empty")
    q = normalize(np.asarray(queries, dtype=np.float64))
    out = np.empty(len(q), dtype=np.int64)
    step = max(1, 2_000_000 // max(len(index), 1))
    for lo in range(0, len(q), step):
        sims = q[lo:lo + step] @ index.vectors.T
        out[lo:lo + step] = _vote(sims, np.broadcast_to(index.classes, sims.shape), k_neighbors)
    return out


def _vote(sims: np.ndarray, classes: np.ndarray, k: int) -> np.ndarray:
    """Row-wise k-NN vote given candidate similarities and their classes (-inf = unusable)."""
    n, m = sims.shape
    k = min(k, m)
    # the vote only depends on which entries are in the top k, not their order;
    # rows with a tie straddling the k-th place get an exact sort
    order = np.argpartition(-sims, k - 1, axis=1)[:, :k]
    kth = np.take_along_axis(sims, order, axis=1).min(axis=1)
    tied = (sims >= kth[:, None]).sum(axis=1) > k
    if tied.any():
        rows = np.nonzero(tied)[0]
        order[rows] = np.lexsort((classes[rows], -sims[rows]), axis=-1)[:, :k]
    top_sim = np.take_along_axis(sims, order, axis=1)
    top_cls = np.take_along_axis(classes, order, axis=1)
    valid = np.isfinite(top_sim)
    n_cls = int(classes.max()) + 1
    rows = np.repeat(np.arange(n), k)
    votes = np.zeros((n, n_cls))
    weight = np.zeros((n, n_cls))
    np.add.at(votes, (rows, top_cls.ravel()), valid.ravel().astype(float))
    np.add.at(weight, (rows, top_cls.ravel()), np.where(valid, top_sim, 0.0).ravel())
    best = votes.max(axis=1, keepdims=True)
    cand_weight = np.where(votes == best, weight, -np.inf)
    return np.argmax(cand_weight, axis=1)


# --- linear probe ------------------------------------------------------------------------------

@dataclass
class LinearProbe:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    losses: list[float] = field(default_factory=list)

    @property
    def class_count(self) -> int:
        return len(self.bias)

    def scores(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights.T + self.bias

    def apply(self, emb: EmbeddingField) -> np.ndarray:
        return np.argmax(self.scores(emb.flat()), axis=1).reshape(emb.height, emb.width)


def softmax_loss(probe: LinearProbe, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradients with respect to weights and bias."""
    s = probe.scores(x)
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.log(p[np.arange(n), y] + 1e-300).mean())
    p[np.arange(n), y] -= 1.0
    p /= n
    return loss, p.T @ x, p.sum(axis=0)


def linear_probe_train(x: np.ndarray, y: np.ndarray, num_classes: int, epochs: int = 300,
                       lr: float = 1.0, ignore_id: int = IGNORE_ID) -> LinearProbe:
    """Full-batch gradient descent on multinomial logistic regression over frozen embeddings."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    keep = y != ignore_id
    x, y = x[keep], y[keep]
    if len(np.unique(y)) < 2:
        raise ValueError("linear probe needs at least two classes in the training data")
    probe = LinearProbe(np.zeros((num_classes, x.shape[1])), np.zeros(num_classes))
    for _ in range(epochs):
        loss, gw, gb = softmax_loss(probe, x, y)
        probe.losses.append(loss)
        probe.weights -= lr * gw
        probe.bias -= lr * gb
    probe.losses.append(softmax_loss(probe, x, y)[0])
    return probe


def linear_probe_apply(emb: EmbeddingField, probe: LinearProbe) -> np.ndarray:
    return probe.apply(emb)


# --- mask propagation --------------------------------------------------------------------------

@dataclass
class PropagationStats:
    fallback_pixels: int = 0


def _window_candidates(query: np.ndarray, ref: np.ndarray, ref_labels: np.ndarray,
                       radius: int) -> tuple[np.ndarray, np.ndarray]:
    """Similarities (H, W, M) and labels of reference pixels in the (2r+1)^2 window."""
    h, w, d = query.shape
    side = 2 * radius + 1
    pad_ref = np.zeros((h + 2 * radius, w + 2 * radius, d))
    pad_ref[radius:radius + h, radius:radius + w] = ref
    pad_lab = np.full((h + 2 * radius, w + 2 * radius), -1, dtype=np.int64)
    pad_lab[radius:radius + h, radius:radius + w] = ref_labels
    sims = np.empty((h, w, side * side))
    labs = np.empty((h, w, side * side), dtype=np.int64)
    i = 0
    for dy in range(side):
        for dx in range(side):
            r = pad_ref[dy:dy + h, dx:dx + w]
            lab = pad_lab[dy:dy + h, dx:dx + w]
            sims[..., i] = np.where(lab >= 0, (query * r).sum(axis=2), -np.inf)
            labs[..., i] = np.maximum(lab, 0)
            i += 1
    return sims, labs


def propagate_masks(fields: list[EmbeddingField], first_mask: np.ndarray, k_neighbors: int = 5,
                    window_radius: int = 12, stats: PropagationStats | None = None
                    ) -> list[np.ndarray]:
    """Label every frame from the first-frame masks by k-NN over pixel embeddings.

    References for frame ``t`` are frame 0 (given masks) and frame ``t-1``
    (its propagated masks), restricted to a square window around each pixel.
    """
    if not fields:
        return []
    shape = fields[0].values.shape
    if any(f.values.shape != shape for f in fields):
        raise ValueError("all frames must share dimensions")
    first_mask = np.asarray(first_mask).astype(np.int64)
    if first_mask.shape != shape[:2]:
        raise ValueError("first-frame mask does not match the frame size")
    stats = stats if stats is not None else PropagationStats()
    unit = [normalize(f.values) for f in fields]
    out = [first_mask.copy()]
    for t in range(1, len(fields)):
        refs = [(unit[0], first_mask), (unit[t - 1], out[t - 1])]
        sims, labs = zip(*(_window_candidates(unit[t], r, lab, window_radius) for r, lab in refs))
        sims = np.concatenate(sims, axis=2).reshape(-1, 2 * (2 * window_radius + 1) ** 2)
        labs = np.concatenate(labs, axis=2).reshape(sims.shape)
        pred = _vote(sims, labs, k_neighbors)
        empty = ~np.isfinite(sims).any(axis=1)
        if empty.any():
            stats.fallback_pixels += int(empty.sum())
            q = unit[t].reshape(-1, shape[2])[empty]
            full_sims = np.concatenate([q @ r.reshape(-1, shape[2]).T for r, _ in refs], axis=1)
            full_labs = np.concatenate([lab.ravel() for _, lab in refs])
            pred[empty] = _vote(full_sims, np.broadcast_to(full_labs, full_sims.shape),
                                k_neighbors)
        out.append(pred.reshape(shape[:2]))
    return out
