"""Evaluation protocols built from the inference and metrics primitives."""

from __future__ import annotations

import numpy as np

from .concepts import Codebook, assign
from .embeddings import EmbeddingField, segment_means
from .inference import (IGNORE_ID, RetrievalIndex, kmeans_segment, knn_label,
                        linear_probe_train, propagate_masks, segment_majority,
                        split_components)
from .metrics import iou_from_confusion, confusion_matrix, j_f_scores, purity


def embed_all(encoder, images, keys=None) -> list[EmbeddingField]:
    keys = range(len(images)) if keys is None else keys
    return [encoder.embed(im, key) for im, key in zip(images, keys)]


def build_index(fields, labels, num_classes: int, k: int = 25, iters: int = 50,
                seed: int = 0) -> RetrievalIndex:
    """Segment means of k-means segments from labelled images, with majority classes."""
    vecs, classes = [], []
    for i, (f, lab) in enumerate(zip(fields, labels)):
        seg = kmeans_segment(f, k, iters, seed + i)
        maj = segment_majority(lab, seg, num_classes)
        keep = maj >= 0
        vecs.append(segment_means(f, seg).vectors[keep])
        classes.append(maj[keep])
    return RetrievalIndex(np.concatenate(vecs), np.concatenate(classes))


def predict_kmeans(emb: EmbeddingField, index: RetrievalIndex, k: int = 25, iters: int = 50,
                   k_neighbors: int = 15, seed: int = 0) -> np.ndarray:
    seg = kmeans_segment(emb, k, iters, seed)
    cls = knn_label(segment_means(emb, seg).vectors, index, k_neighbors)
    return cls[seg.ids]


def eval_kmeans(encoder, train_images, train_labels, val_images, val_labels, num_classes: int,
                k: int = 25, iters: int = 50, k_neighbors: int = 15, seed: int = 0,
                train_keys=None, val_keys=None, keep_predictions: bool = False) -> dict:
    """k-means segmentation of val images labelled by k-NN over train segments."""
    index = build_index(embed_all(encoder, train_images, train_keys), train_labels,
                        num_classes, k, iters, seed)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    preds = []
    val_fields = embed_all(encoder, val_images, val_keys)
    for i, (f, lab) in enumerate(zip(val_fields, val_labels)):
        pred = predict_kmeans(f, index, k, iters, k_neighbors, seed + 100_000 + i)
        cm += confusion_matrix(lab, pred, num_classes)
        if keep_predictions:
            preds.append(pred)
    per_class, mean = iou_from_confusion(cm)
    out = {"miou": mean, "per_class": per_class, "index_size": len(index)}
    if keep_predictions:
        out["predictions"] = preds
        out["index"] = index
    return out


def eval_linear(encoder, train_images, train_labels, val_images, val_labels, num_classes: int,
                pixels_per_image: int = 512, epochs: int = 300, lr: float = 2.0, seed: int = 0,
                train_keys=None, val_keys=None, keep_predictions: bool = False) -> dict:
    """Softmax probe on frozen embeddings of sampled train pixels, scored on val."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for f, lab in zip(embed_all(encoder, train_images, train_keys), train_labels):
        flat, y = f.flat(), lab.ravel()
        take = rng.choice(len(y), size=min(pixels_per_image, len(y)), replace=False)
        xs.append(flat[take])
        ys.append(y[take])
    probe = linear_probe_train(np.concatenate(xs), np.concatenate(ys), num_classes, epochs, lr)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    preds = []
    for f, lab in zip(embed_all(encoder, val_images, val_keys), val_labels):
        pred = probe.apply(f)
        cm += confusion_matrix(lab, pred, num_classes)
        if keep_predictions:
            preds.append(pred)
    per_class, mean = iou_from_confusion(cm)
    out = {"miou": mean, "per_class": per_class, "probe_loss": probe.losses[-1]}
    if keep_predictions:
        out["predictions"] = preds
    return out


def concept_segments(emb: EmbeddingField, codebook: Codebook, k: int = 25, iters: int = 50,
                     seed: int = 0):
    """k-means segments mapped to their nearest concept; touching same-concept segments merge."""
    seg = kmeans_segment(emb, k, iters, seed)
    concepts = assign(codebook, segment_means(emb, seg).vectors, update=False)
    concept_map = concepts[seg.ids]
    merged = split_components(concept_map)
    first = np.zeros(merged.segment_count, dtype=np.int64)
    first[merged.ids.ravel()] = concept_map.ravel()
    return merged, first


def concept_purity(encoder, codebook: Codebook, images, labels, num_classes: int,
                   k: int = 25, iters: int = 50, seed: int = 0, keys=None):
    all_concepts, all_classes = [], []
    for i, (f, lab) in enumerate(zip(embed_all(encoder, images, keys), labels)):
        seg, concepts = concept_segments(f, codebook, k, iters, seed + i)
        all_concepts.append(concepts)
        all_classes.append(segment_majority(lab, seg, num_classes, IGNORE_ID))
    return purity(np.concatenate(all_concepts), np.concatenate(all_classes))


def track_video(encoder, frames, masks, k_neighbors: int = 5, window_radius: int = 12) -> dict:
    """Propagate frame-0 masks and score frames 1.. against ground truth."""
    fields = [encoder.embed(f) for f in frames]
    pred = propagate_masks(fields, masks[0], k_neighbors, window_radius)
    objects = sorted(set(np.unique(masks[0]).tolist()) - {0})
    scores = j_f_scores(pred[1:], [np.asarray(m, np.int64) for m in masks[1:]], objects)
    scores["predictions"] = pred
    return scores
