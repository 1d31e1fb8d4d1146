"""Random small loss configurations and a finite-difference checker.

Loss values for the finite differences come from ``reference_terms``, an
independent per-segment evaluation that shares no code with the library.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from conceptseg.augment import ViewTransform
from conceptseg.concepts import assign, init_codebook
from conceptseg.losses import (LossWeights, MemoryBank, batch_cooccurrence, build_batch,
                               compute_losses, cooccurrence_loss, local_segmentation_loss,
                               vq_loss)
from conceptseg.pseudoseg import SegmentMap, relabel_dense, transfer_segments


@dataclass
class Config:
    batch: object
    codebook: object
    bank: MemoryBank
    index: object
    weights: LossWeights


def random_config(seed: int, view: int = 8, dim: int = 8, k: int = 8,
                  weights: LossWeights | None = None) -> Config:
    rng = np.random.default_rng(seed)
    src = 12
    coarse = rng.integers(0, 10, size=(4, 4))
    ids, uniq = relabel_dense(np.kron(coarse, np.ones((3, 3), dtype=np.int64)))
    seg = SegmentMap(ids, len(uniq))
    maps, fields = [], []
    for _ in range(2):
        size = int(rng.integers(6, 13))
        top, left = rng.integers(0, src - size + 1, size=2)
        t = ViewTransform((src, src), (int(top), int(left), size, size), (view, view),
                          flip=bool(rng.random() < 0.5))
        maps.append(transfer_segments(seg, t))
        fields.append(rng.standard_normal((view, view, dim)))
    batch = build_batch(fields, maps, [0, 0], None)
    codebook = init_codebook(k, dim, seed=int(rng.integers(1 << 30)))
    batch.concept_ids = assign(codebook, batch.means(), update=False)
    bank = MemoryBank(1, dim)
    nb = int(rng.integers(2, 8))
    bank.push(rng.standard_normal((nb, dim)), rng.integers(1, 3, size=nb),
              rng.integers(0, k, size=nb), rng.integers(1, 20, size=nb))
    index = batch_cooccurrence(batch, bank, k)
    return Config(batch, codebook, bank, index, weights or LossWeights())


def positive_masks(cfg: Config) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel positive candidates for both contrastive terms, by direct enumeration."""
    b = cfg.batch
    cand_concepts = list(b.concept_ids) + list(cfg.bank.concept_ids)
    pairs = {(int(a), int(c)) for a, c in zip(*np.nonzero(cfg.index.matrix))}
    own = np.zeros((len(b.pixel_segment), len(cand_concepts)), dtype=bool)
    cooc = np.zeros_like(own)
    for p, s in enumerate(b.pixel_segment):
        own[p, s] = True
        for j, c in enumerate(cand_concepts):
            cooc[p, j] = (int(b.concept_ids[s]), int(c)) in pairs
    return own, cooc


def reference_terms(pixels, codes, cfg: Config, masks) -> np.ndarray:
    """[l_s, l_c, VQ codebook part, VQ commitment part] evaluated from scratch.

    ``pixels`` (..., P, D) and ``codes`` (..., K, D) may carry leading batch
    dimensions; the result then has shape (..., 4).
    """
    b, w = cfg.batch, cfg.weights
    own, cooc = masks
    onehot = np.eye(b.segment_count)[b.pixel_segment]
    sizes = onehot.sum(axis=0)
    means = np.einsum("ps,...pd->...sd", onehot, pixels) / sizes[:, None]
    bank = np.broadcast_to(cfg.bank.vectors, means.shape[:-2] + cfg.bank.vectors.shape)
    cand = np.concatenate([means, bank], axis=-2)
    unit = lambda x: x / np.linalg.norm(x, axis=-1, keepdims=True)
    logits = w.kappa * (unit(pixels) @ np.swapaxes(unit(cand), -1, -2))
    full = logsumexp(logits, axis=-1)
    ls = full - logsumexp(np.where(own, logits, -np.inf), axis=-1)
    lc = full - logsumexp(np.where(cooc, logits, -np.inf), axis=-1)
    e = codes[..., b.concept_ids, :]
    sim_v = (unit(means) * unit(e)).sum(axis=-1)
    code_part = (sizes / sizes.sum() * (1 - sim_v)).sum(axis=-1)
    parts = np.broadcast_arrays(ls.mean(axis=-1), lc.mean(axis=-1), code_part,
                                w.beta * code_part)
    return np.stack(parts, axis=-1)


def central_diff(f, x: np.ndarray, eps: float = 1e-5, chunk: int = 256) -> np.ndarray:
    """Jacobian (outputs, *x.shape) of a vector-valued f by central differences.

    ``f`` is called on stacks of perturbed copies of ``x`` and must map a leading
    batch dimension through.
    """
    n = x.size
    cols = []
    for start in range(0, n, chunk):
        idx = np.arange(start, min(n, start + chunk))
        step = np.zeros((len(idx), n))
        step[np.arange(len(idx)), idx] = eps
        step = step.reshape((len(idx),) + x.shape)
        cols.append((f(x + step) - f(x - step)) / (2 * eps))
    return np.concatenate(cols).T.reshape((-1,) + x.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest componentwise deviation relative to the largest gradient entry of the block."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max())
    if scale < 1e-12:
        return float(np.abs(analytic - numeric).max())
    return float(np.abs(analytic - numeric).max() / scale)


def check_config(cfg: Config, eps: float = 1e-5) -> dict:
    """Max relative errors per term (over pixel and codebook blocks) and the value mismatch."""
    b, w = cfg.batch, cfg.weights
    means = b.means()
    terms = {
        "l_s": local_segmentation_loss(b, cfg.bank, w.kappa, means),
        "l_v": vq_loss(b, cfg.codebook, w.beta, means),
        "l_c": cooccurrence_loss(b, cfg.index, cfg.bank, w.kappa, means),
    }
    report = compute_losses(b, cfg.codebook, cfg.bank, w, cfg.index)
    masks = positive_masks(cfg)
    px, cb = b.pixels.copy(), cfg.codebook.vectors.copy()
    ref = reference_terms(px, cb, cfg, masks)
    value_err = max(abs(report.l_s - ref[0]), abs(report.l_c - ref[1]),
                    abs(report.l_v - ref[2] - ref[3]))
    j_pix = central_diff(lambda p: reference_terms(p, cb, cfg, masks), px, eps)
    j_code = central_diff(lambda c: reference_terms(px, c, cfg, masks), cb, eps)
    # stop-gradient split: the commitment part moves pixels, the codebook part moves codes
    numeric = {
        "l_s": (j_pix[0], np.zeros_like(cb)),
        "l_c": (j_pix[1], np.zeros_like(cb)),
        "l_v": (j_pix[3], j_code[2]),
        "total": (w.lambda_s * j_pix[0] + w.lambda_v * j_pix[3] + w.lambda_c * j_pix[1],
                  w.lambda_v * j_code[2]),
    }
    analytic = {name: (t.grad_pixels, t.grad_codebook if t.grad_codebook is not None
                       else np.zeros_like(cb)) for name, t in terms.items()}
    analytic["total"] = (report.grad_pixels, report.grad_codebook)
    errors = {name: max(rel_error(analytic[name][0], numeric[name][0]),
                        rel_error(analytic[name][1], numeric[name][1]))
              for name in numeric}
    return {"errors": errors, "value_err": value_err}
