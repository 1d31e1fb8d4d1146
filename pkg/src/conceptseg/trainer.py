"""Self-supervised training loop over augmented view pairs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, ViewTransform, random_view
from .concepts import Codebook, assign, init_codebook, reseed_dead_codes
from .embeddings import normalize
from .encoder import PixelMLP, PixelTable
from .losses import (LossWeights, MemoryBank, TermResult, batch_cooccurrence, build_batch,
                     cooccurrence_loss, local_segmentation_loss, total_loss, vq_loss)
from .pseudoseg import SegmentMap, felzenszwalb_segment, transfer_segments

class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns non-finite; ``dump`` describes the step."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    base_lr: float = 0.5
    poly_power: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    num_concepts: int = 32
    dim: int = 16
    bank_batches: int = 2
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    pixel_sample_count: int = 256
    encoder: str = "mlp"
    hidden: int = 64
    codebook_lr_scale: float = 1.0
    staleness_threshold: float = 200
    felz_scale: float = 50.0
    felz_min_size: int = 20
    felz_sigma: float = 0.8

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.augment, dict):
            aug = {k: tuple(v) if isinstance(v, list) else v for k, v in self.augment.items()}
            self.augment = AugmentConfig(**aug)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.encoder not in ("mlp", "table"):
            raise ValueError(f"unknown encoder {self.encoder!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Full-scale settings: D=32, K=512, batch 8, 5k iterations."""
        return cls(**{"iterations": 5000, "batch_size": 8, "dim": 32,
                      "num_concepts": 512, **overrides})


def lr_schedule(step: int, total: int, base_lr: float, power: float) -> float:
    """Poly decay ``base_lr * (1 - step/total) ** power``."""
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    return base_lr * (1.0 - step / total) ** power


@dataclass
class TrainResult:
    encoder: object
    codebook: Codebook
    log: list[dict]
    bank: MemoryBank
    config: TrainConfig
    segments: list[SegmentMap]


def pseudo_segments(images, config: TrainConfig) -> list[SegmentMap]:
    return [felzenszwalb_segment(im, config.felz_scale, config.felz_min_size, config.felz_sigma)
            for im in images]


def _make_encoder(config: TrainConfig, images):
    if config.encoder == "mlp":
        return PixelMLP(config.dim, config.hidden, config.seed)
    return PixelTable(config.dim, {i: im.shape[:2] for i, im in enumerate(images)}, config.seed)


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    """Endless stream of batches drawn from shuffled epochs."""
    order = []
    while True:
        while len(order) < batch_size:
            order.extend(rng.permutation(n).tolist())
        yield order[:batch_size]
        order = order[batch_size:]


def view_consistency(t1: ViewTransform, t2: ViewTransform, z1: np.ndarray, z2: np.ndarray
                     ) -> float:
    """Mean cosine between the two views' embeddings of shared source pixels."""
    s1, s2 = t1.source_index().ravel(), t2.source_index().ravel()
    common, i1, i2 = np.intersect1d(s1, s2, return_indices=True)
    if len(common) == 0:
        return float("nan")
    a = z1.reshape(-1, z1.shape[-1])[i1]
    b = z2.reshape(-1, z2.shape[-1])[i2]
    return float((normalize(a) * normalize(b)).sum(axis=1).mean())


def _check_finite(step: int, report, batch, codebook) -> None:
    bad = [name for name, v in (("l_s", report.l_s), ("l_v", report.l_v),
                                ("l_c", report.l_c), ("total", report.total))
           if not np.isfinite(v)]
    if not np.all(np.isfinite(report.grad_pixels)):
        bad.append("grad_pixels")
    if not np.all(np.isfinite(report.grad_codebook)):
        bad.append("grad_codebook")
    if bad:
        dump = {"step": step, "non_finite": bad, "record": report.as_record(),
                "segments": int(batch.segment_count),
                "nonfinite_pixels": int((~np.isfinite(batch.pixels)).any(axis=1).sum()),
                "codebook_nonfinite": int((~np.isfinite(codebook.vectors)).sum())}
        raise TrainingDiverged(f"non-finite {', '.join(bad)} at step {step}", dump)


def _zero_term(batch) -> TermResult:
    dim = batch.pixels.shape[1]
    return TermResult(0.0, np.zeros_like(batch.pixels), np.zeros((batch.segment_count, dim)))


def train(images: list[np.ndarray], config: TrainConfig,
          segments: list[SegmentMap] | None = None, log_path: Path | None = None,
          callback=None) -> TrainResult:
    """Optimize the encoder and codebook on ``images`` (float RGB in [0, 1]).

    Every step draws two views per image, merges their pseudo segments, assigns
    concepts, evaluates the weighted losses, takes an SGD step with the poly
    schedule and pushes the batch segments into the memory bank.
    ``callback(step, record, encoder, codebook, bank)`` runs after every step.
    """
    if len(images) < config.batch_size:
        raise ValueError(f"need at least {config.batch_size} images, got {len(images)}")
    if segments is None:
        segments = pseudo_segments(images, config)
    rng = np.random.default_rng(config.seed)
    encoder = _make_encoder(config, images)
    bank = MemoryBank(config.bank_batches, config.dim)
    codebook = None
    w = config.weights
    records = []
    sink = open(log_path, "w") if log_path else None
    batches = _batches(rng, len(images), config.batch_size)
    try:
        for step in range(config.iterations):
            picks = next(batches)
            fields_, maps, owners, origins, ctxs, views = [], [], [], [], [], []
            for j, i in enumerate(picks):
                instance = step * config.batch_size + j
                shape = images[i].shape[:2]
                for _ in range(2):
                    t = (random_view(rng, shape, config.augment) if config.augment
                         else ViewTransform.identity(*shape))
                    z, ctx = encoder.embed_view(i, t.apply(images[i]), t)
                    fields_.append(z)
                    maps.append(transfer_segments(segments[i], t))
                    owners.append(instance)
                    origins.append(i)
                    ctxs.append(ctx)
                    views.append(t)
            batch = build_batch(fields_, maps, owners, config.pixel_sample_count, rng, origins)
            means = batch.means()
            if codebook is None:
                codebook = init_codebook(config.num_concepts, config.dim, config.seed, means)
            batch.concept_ids = assign(codebook, means)

            ls = (local_segmentation_loss(batch, bank, w.kappa, means)
                  if w.lambda_s else _zero_term(batch))
            lv = vq_loss(batch, codebook, w.beta, means)
            if w.lambda_c:
                index = batch_cooccurrence(batch, bank, codebook.size)
                lc = cooccurrence_loss(batch, index, bank, w.kappa, means)
            else:
                lc = _zero_term(batch)
            report = total_loss(ls, lv, lc, w, codebook.vectors.shape)
            _check_finite(step, report, batch, codebook)

            offset = 0
            for z, ctx in zip(fields_, ctxs):
                n = z.shape[0] * z.shape[1]
                encoder.accumulate(report.grad_pixels[offset:offset + n], ctx)
                offset += n
            lr = lr_schedule(step, config.iterations, config.base_lr, config.poly_power)
            enc_grad = encoder.grad_norm()
            encoder.step(lr)
            codebook.vectors = normalize(
                codebook.vectors - lr * config.codebook_lr_scale * report.grad_codebook)
            reseeded = reseed_dead_codes(codebook, means, config.staleness_threshold, rng)
            bank.push(means, batch.segment_image, batch.concept_ids, batch.sizes(),
                      batch.segment_origin)

            rec = {"step": step, "lr": lr, **report.as_record(), "encoder_grad": enc_grad,
                   "segments": int(batch.segment_count), "bank_segments": len(bank),
                   "bank_batches": bank.num_batches, "reseeded": reseeded,
                   "active_concepts": int(len(np.unique(batch.concept_ids))),
                   "consistency": view_consistency(views[0], views[1], fields_[0], fields_[1])}
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec) + "\n")
            if callback:
                callback(step, rec, encoder, codebook, bank)
    finally:
        if sink:
            sink.close()
    return TrainResult(encoder, codebook, records, bank, config, segments)


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    """Copy of ``config`` with top-level or loss-weight fields replaced."""
    weight_keys = {f.name for f in fields(LossWeights)}
    wkw = {k: kw.pop(k) for k in list(kw) if k in weight_keys}
    if wkw:
        kw["weights"] = replace(config.weights, **wkw)
    return replace(config, **kw)
