"""Pixel embedding functions trained by the losses.

``PixelMLP`` maps hand-made local colour features through a two-layer
perceptron onto the unit sphere, so it can embed images it never saw.
``PixelTable`` keeps one free unit vector per source pixel of each training
image; views sample it through their geometric transform.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .augment import ViewTransform
from .embeddings import EmbeddingField, normalize, scatter_rows

# the smallest scale stands in for a receptive field: raw pixel noise would make
# k-means at inference shatter flat regions into speckle
FEATURE_SIGMAS = (1.0, 2.0, 4.0)


def pixel_features(image: np.ndarray) -> np.ndarray:
    """(H, W, 3 * len(FEATURE_SIGMAS)) centred colours blurred at several scales."""
    feats = [ndimage.gaussian_filter(image, sigma=(s, s, 0), mode="nearest") - 0.5
             for s in FEATURE_SIGMAS]
    return np.concatenate(feats, axis=2)


class PixelMLP:
    kind = "mlp"

    def __init__(self, dim: int, hidden: int = 64, seed: int = 0):
        if dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        rng = np.random.default_rng([seed, 0xE11C])
        n_in = 3 * len(FEATURE_SIGMAS)
        self.dim = dim
        self.params = {
            "w1": rng.standard_normal((n_in, hidden)) * np.sqrt(2.0 / n_in) * 3.0,
            "b1": np.zeros(hidden),
            "w2": rng.standard_normal((hidden, dim)) * np.sqrt(1.0 / hidden),
            "b2": np.zeros(dim),
        }
        self.zero_grad()

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _forward(self, image: np.ndarray):
        x = pixel_features(image).reshape(-1, self.params["w1"].shape[0])
        h = np.tanh(x @ self.params["w1"] + self.params["b1"])
        u = h @ self.params["w2"] + self.params["b2"]
        return x, h, u

    def embed(self, image: np.ndarray, key=None) -> EmbeddingField:
        _, _, u = self._forward(image)
        return EmbeddingField(normalize(u).reshape(image.shape[0], image.shape[1], self.dim))

    def embed_view(self, key, view_image: np.ndarray, transform: ViewTransform):
        x, h, u = self._forward(view_image)
        norm = np.linalg.norm(u, axis=1, keepdims=True)
        z = u / norm
        return z.reshape(view_image.shape[0], view_image.shape[1], self.dim), (x, h, z, norm)

    def accumulate(self, grad_z: np.ndarray, ctx) -> None:
        x, h, z, norm = ctx
        g = grad_z.reshape(-1, self.dim)
        gu = (g - (g * z).sum(axis=1, keepdims=True) * z) / norm
        self.grads["w2"] += h.T @ gu
        self.grads["b2"] += gu.sum(axis=0)
        gh = (gu @ self.params["w2"].T) * (1.0 - h * h)
        self.grads["w1"] += x.T @ gh
        self.grads["b1"] += gh.sum(axis=0)

    def step(self, lr: float) -> None:
        for k in self.params:
            self.params[k] -= lr * self.grads[k]
        self.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(sum((g ** 2).sum() for g in self.grads.values())))

    def state(self) -> dict:
        return {"kind": self.kind, "dim": self.dim,
                **{k: v.copy() for k, v in self.params.items()}}

    @classmethod
    def from_state(cls, state: dict) -> "PixelMLP":
        enc = cls(int(state["dim"]), hidden=state["w1"].shape[1])
        for k in enc.params:
            enc.params[k] = np.asarray(state[k], dtype=np.float64).copy()
        return enc


class PixelTable:
    """Free per-source-pixel unit embeddings, one table per training image."""

    kind = "table"

    def __init__(self, dim: int, shapes: dict, seed: int = 0):
        if dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        self.dim = dim
        self.tables = {}
        for key, (h, w) in shapes.items():
            rng = np.random.default_rng([seed, 0x7AB1E, int(key)])
            self.tables[key] = normalize(rng.standard_normal((h, w, dim)))
        self.zero_grad()

    def zero_grad(self) -> None:
        self.grads = {}

    def embed(self, image: np.ndarray | None = None, key=None) -> EmbeddingField:
        if key not in self.tables:
            raise KeyError(f"no embedding table for image {key!r}; tables only cover "
                           "training images")
        return EmbeddingField(self.tables[key].copy())

    def embed_view(self, key, view_image, transform: ViewTransform):
        return transform.warp(self.tables[key]), (key, transform.source_index())

    def accumulate(self, grad_z: np.ndarray, ctx) -> None:
        key, src = ctx
        table = self.tables[key]
        g = self.grads.setdefault(key, np.zeros((table.shape[0] * table.shape[1], self.dim)))
        g += scatter_rows(src.ravel(), grad_z.reshape(-1, self.dim), len(g))

    def step(self, lr: float) -> None:
        for key, g in self.grads.items():
            table = self.tables[key]
            flat = table.reshape(-1, self.dim) - lr * g
            self.tables[key] = normalize(flat).reshape(table.shape)
        self.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(sum((g ** 2).sum() for g in self.grads.values())))

    def state(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim}
        for key, t in self.tables.items():
            out[f"table_{key}"] = t.copy()
        return out

    @classmethod
    def from_state(cls, state: dict) -> "PixelTable":
        enc = cls(int(state["dim"]), {})
        for k, v in state.items():
            if k.startswith("table_"):
                enc.tables[int(k[6:])] = np.asarray(v, dtype=np.float64).copy()
        return enc


def encoder_from_state(state: dict):
    kind = str(state["kind"])
    if kind == "mlp":
        return PixelMLP.from_state(state)
    if kind == "table":
        return PixelTable.from_state(state)
    raise ValueError(f"unknown encoder kind {kind!r}")
