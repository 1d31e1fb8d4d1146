"""Hyper-parameter sweeps: one training run per value, scored with both protocols."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .pipeline import eval_kmeans, eval_linear
from .trainer import TrainConfig, TrainingDiverged, train, with_overrides

PARAMETERS = {"lambda_v": "lambda_v", "lambda_c": "lambda_c", "K": "num_concepts",
              "beta": "beta", "bank_batches": "bank_batches"}
PROTOCOLS = ("kmeans", "linear")


@dataclass
class SweepSpec:
    parameter: str
    values: list
    base: TrainConfig = field(default_factory=TrainConfig)
    protocols: tuple = PROTOCOLS

    def __post_init__(self):
        if self.parameter not in PARAMETERS:
            raise ValueError(f"unknown sweep parameter {self.parameter!r}; "
                             f"expected one of {sorted(PARAMETERS)}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if isinstance(self.base, dict):
            self.base = TrainConfig.from_dict(self.base)
        self.protocols = tuple(self.protocols)
        bad = set(self.protocols) - set(PROTOCOLS)
        if bad or not self.protocols:
            raise ValueError(f"protocols must be a nonempty subset of {PROTOCOLS}")

    def config_for(self, value) -> TrainConfig:
        return with_overrides(self.base, **{PARAMETERS[self.parameter]: value})

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        unknown = set(d) - {"parameter", "values", "base", "protocols"}
        if unknown:
            raise ValueError(f"unknown sweep keys: {sorted(unknown)}")
        return cls(d["parameter"], list(d["values"]), d.get("base", {}),
                   d.get("protocols", PROTOCOLS))


@dataclass
class SweepResult:
    parameter: str
    rows: list[dict]
    runs: list[dict]  # one entry per training run, in execution order

    def to_json(self) -> dict:
        return {"parameter": self.parameter, "rows": self.rows, "runs": self.runs}

    def table(self) -> str:
        """Aligned text table: value | mIoU k-means | mIoU LC, scores in percent."""
        header = [self.parameter, "mIoU k-means", "mIoU LC"]
        body = []
        for r in self.rows:
            if r["error"]:
                body.append([_fmt_value(r["value"]), "failed", "failed"])
                continue
            body.append([_fmt_value(r["value"]), _fmt_score(r["miou_kmeans"]),
                         _fmt_score(r["miou_linear"])])
        widths = [max(len(row[c]) for row in [header] + body) for c in range(3)]
        lines = [" | ".join(h.ljust(w) if c == 0 else h.rjust(w)
                            for c, (h, w) in enumerate(zip(row, widths)))
                 for row in [header] + body]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def save(self, out_dir) -> None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"sweep_{self.parameter}.json").write_text(json.dumps(self.to_json(), indent=1))
        (out / f"sweep_{self.parameter}.txt").write_text(self.table())


def _fmt_value(v) -> str:
    return f"{v:g}" if isinstance(v, float) else str(v)


def _fmt_score(s) -> str:
    return "-" if s is None else f"{100 * s:.2f}"


@dataclass
class SweepData:
    train_images: list
    train_labels: list
    val_images: list
    val_labels: list
    num_classes: int
    segments: list | None = None


def run_cell(config: TrainConfig, data: SweepData, protocols=PROTOCOLS) -> dict:
    """Train one model and score it; failures are returned, not raised."""
    row = {"miou_kmeans": None, "miou_linear": None, "error": None, "iterations": 0}
    try:
        res = train(data.train_images, config, data.segments)
        row["iterations"] = len(res.log)
        args = (res.encoder, data.train_images, data.train_labels, data.val_images,
                data.val_labels, data.num_classes)
        if "kmeans" in protocols:
            row["miou_kmeans"] = eval_kmeans(*args, seed=config.seed)["miou"]
        if "linear" in protocols:
            row["miou_linear"] = eval_linear(*args, seed=config.seed)["miou"]
    except TrainingDiverged as err:
        row["error"] = f"diverged: {err}"
    except (ValueError, RuntimeError, FloatingPointError) as err:
        row["error"] = f"{type(err).__name__}: {err}"
    return row


def run_sweep(sweep: SweepSpec, data: SweepData, workers: int = 1) -> SweepResult:
    """One training run per value, all sharing dataset, segments and seed."""
    configs = [sweep.config_for(v) for v in sweep.values]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(run_cell, configs, [data] * len(configs),
                                  [sweep.protocols] * len(configs)))
    else:
        cells = [run_cell(c, data, sweep.protocols) for c in configs]
    rows, runs = [], []
    for value, cfg, cell in zip(sweep.values, configs, cells):
        rows.append({"value": value, "miou_kmeans": cell["miou_kmeans"],
                     "miou_linear": cell["miou_linear"], "error": cell["error"]})
        runs.append({"value": value, "seed": cfg.seed, "iterations": cell["iterations"]})
    return SweepResult(sweep.parameter, rows, runs)
