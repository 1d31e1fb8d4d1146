"""Command-line entry point: ``conceptseg <command> [options]``.

Exit codes: 0 ok, 1 usage error, 2 runtime error, 3 training aborted on NaN.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import io
from .data import DatasetManifest, SceneSpec, write_dataset
from .pipeline import build_index, embed_all, eval_kmeans, eval_linear, track_video
from .pseudoseg import felzenszwalb_segment
from .runtime import tune_allocator
from .sweep import SweepData, SweepSpec, run_sweep
from .trainer import TrainConfig, TrainingDiverged, train, with_overrides
from .visualize import concept_sheet, panel, usage_order

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

THREADS_ENV = "CONCEPTSEG_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NAN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def read_config(path) -> dict:
    """JSON or TOML file, chosen by extension."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        if path.suffix == ".toml":
            return tomllib.loads(path.read_text())
        return json.loads(path.read_text())
    except (ValueError, tomllib.TOMLDecodeError) as err:
        raise UsageError(f"cannot parse {path}: {err}") from err


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def train_config(args) -> TrainConfig:
    try:
        cfg = TrainConfig.from_dict(read_config(args.config)) if args.config else TrainConfig()
        overrides = {}
        for item in args.set or []:
            key, sep, val = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects key=value, got {item!r}")
            overrides[key] = _parse_value(val)
        if args.seed is not None:
            overrides["seed"] = args.seed
        return with_overrides(cfg, **overrides)
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from err


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _dataset(args):
    manifest = DatasetManifest.load(args.data)
    train_imgs, train_labs = manifest.load_images("train")
    val_imgs, val_labs = manifest.load_images("val")
    return manifest, train_imgs, train_labs, val_imgs, val_labs


def _segments(manifest, split="train"):
    entries = manifest.split(split)
    if not entries or any(e.seg is None for e in entries):
        return None
    return [io.load_segment_map(manifest.root / e.seg) for e in entries]


def _train_keys(train_images):
    return list(range(len(train_images)))


def cmd_gen_data(args) -> int:
    spec = SceneSpec()
    if args.spec:
        try:
            spec = SceneSpec.from_dict(read_config(args.spec))
        except (TypeError, ValueError) as err:
            raise UsageError(f"bad scene spec: {err}") from err
    seed = 0 if args.seed is None else args.seed
    m = write_dataset(Path(args.out), spec, args.count, args.val_count, seed,
                      args.videos, args.frames)
    print(f"wrote {len(m.entries)} images and {len(m.videos)} videos to {m.root}")
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = train_config(args)
    manifest = DatasetManifest.load(args.data)
    (manifest.root / "segs").mkdir(exist_ok=True)
    for e in manifest.entries:
        image = io.load_rgb(manifest.root / e.image)
        seg = felzenszwalb_segment(image, cfg.felz_scale, cfg.felz_min_size, cfg.felz_sigma)
        e.seg = f"segs/{e.id}.png"
        io.save_segment_map(manifest.root / e.seg, seg)
    manifest.save()
    print(f"segmented {len(manifest.entries)} images")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = train_config(args)
    manifest = DatasetManifest.load(args.data)
    images, _ = manifest.load_images("train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = train(images, cfg, _segments(manifest), log_path=out / "log.jsonl")
    except TrainingDiverged as err:
        _write_json(out / "diverged.json", err.dump)
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_NAN
    io.save_model(out, res)
    _write_json(out / "data.json", {"data": str(manifest.root.resolve())})
    if args.save_fields:
        (out / "fields").mkdir(exist_ok=True)
        for e, f in zip(manifest.split("train"), embed_all(res.encoder, images,
                                                           _train_keys(images))):
            io.save_field(out / "fields" / f"{e.id}.bin", f.values)
    print(f"trained {len(res.log)} iterations; final loss {res.log[-1]['total']:.6f}")
    return EXIT_OK


def _save_predictions(out: Path, entries, preds) -> None:
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    for e, p in zip(entries, preds):
        io.save_label(out / "predictions" / f"{e.id}.png", p)


def _per_class(manifest, per_class: dict) -> dict:
    return {manifest.classes[c]: v for c, v in sorted(per_class.items())}


def cmd_eval_kmeans(args) -> int:
    encoder, _, cfg = io.load_model(args.model)
    manifest, ti, tl, vi, vl = _dataset(args)
    seed = cfg.seed if args.seed is None else args.seed
    res = eval_kmeans(encoder, ti, tl, vi, vl, len(manifest.classes), args.k, args.iters,
                      args.neighbors, seed, train_keys=_train_keys(ti), keep_predictions=True)
    out = Path(args.out)
    _save_predictions(out, manifest.split("val"), res["predictions"])
    io.save_index(out / "index.npz", res["index"])
    _write_json(out / "metrics.json", {"protocol": "kmeans", "miou": res["miou"],
                                       "per_class": _per_class(manifest, res["per_class"]),
                                       "index_size": res["index_size"]})
    print(f"k-means mIoU {100 * res['miou']:.2f}")
    return EXIT_OK


def cmd_eval_linear(args) -> int:
    encoder, _, cfg = io.load_model(args.model)
    manifest, ti, tl, vi, vl = _dataset(args)
    seed = cfg.seed if args.seed is None else args.seed
    res = eval_linear(encoder, ti, tl, vi, vl, len(manifest.classes), seed=seed,
                      train_keys=_train_keys(ti), keep_predictions=True)
    out = Path(args.out)
    _save_predictions(out, manifest.split("val"), res["predictions"])
    _write_json(out / "metrics.json", {"protocol": "linear", "miou": res["miou"],
                                       "per_class": _per_class(manifest, res["per_class"]),
                                       "probe_loss": res["probe_loss"]})
    print(f"linear mIoU {100 * res['miou']:.2f}")
    return EXIT_OK


def cmd_track(args) -> int:
    encoder, _, _ = io.load_model(args.model)
    manifest = DatasetManifest.load(args.data)
    if not manifest.videos:
        raise FileNotFoundError(f"dataset {manifest.root} has no videos")
    out = Path(args.out)
    videos = []
    for v in range(len(manifest.videos)):
        frames, masks = manifest.load_video(v)
        scores = track_video(encoder, frames, masks, args.neighbors, args.radius)
        vdir = out / "videos" / f"{v:03d}"
        vdir.mkdir(parents=True, exist_ok=True)
        for t, p in enumerate(scores.pop("predictions")):
            io.save_label(vdir / f"mask_{t:03d}.png", p)
        videos.append(scores)
    summary = {"J_mean": float(np.mean([s["J_mean"] for s in videos])),
               "F_mean": float(np.mean([s["F_mean"] for s in videos])), "videos": videos}
    _write_json(out / "metrics.json", summary)
    print(f"J {summary['J_mean']:.3f}  F {summary['F_mean']:.3f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    raw = read_config(args.config)
    try:
        sweep = SweepSpec.from_dict(raw)
        if args.seed is not None:
            sweep.base = with_overrides(sweep.base, seed=args.seed)
    except (KeyError, TypeError, ValueError) as err:
        raise UsageError(f"bad sweep config: {err}") from err
    manifest, ti, tl, vi, vl = _dataset(args)
    data = SweepData(ti, tl, vi, vl, len(manifest.classes), _segments(manifest))
    result = run_sweep(sweep, data, args.workers)
    result.save(args.out)
    print(result.table(), end="")
    return EXIT_RUNTIME if all(r["error"] for r in result.rows) else EXIT_OK


def _pick(images, spec: str | None):
    ids = list(range(min(4, len(images)))) if spec is None else \
        [int(s) for s in spec.split(",") if s.strip()]
    for i in ids:
        if not 0 <= i < len(images):
            raise UsageError(f"image id {i} out of range 0..{len(images) - 1}")
    return ids


def cmd_visualize(args) -> int:
    encoder, _, cfg = io.load_model(args.model)
    manifest, ti, tl, vi, vl = _dataset(args)
    images = ti if args.split == "train" else vi
    ids = _pick(images, args.images)
    keys = ids if args.split == "train" else None
    if args.index:
        index = io.load_index(args.index)
    else:
        index = build_index(embed_all(encoder, ti, _train_keys(ti)), tl,
                            len(manifest.classes), seed=cfg.seed)
    sheet = panel(encoder, [images[i] for i in ids], keys, index, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_rgb(out / "panel.png", sheet)
    print(f"wrote {out / 'panel.png'}")
    return EXIT_OK


def cmd_dump_concepts(args) -> int:
    encoder, codebook, cfg = io.load_model(args.model)
    manifest = DatasetManifest.load(args.data)
    images, _ = manifest.load_images(args.split)
    keys = _train_keys(images) if args.split == "train" else None
    sheet, order = concept_sheet(encoder, codebook, images, keys, args.top,
                                 args.max_concepts, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_rgb(out / "concepts.png", sheet)
    _write_json(out / "concepts.json", {
        "rows": order, "usage": codebook.usage.tolist(),
        "usage_order": usage_order(codebook)})
    print(f"wrote {len(order)} concept rows to {out / 'concepts.png'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        # accepted before or after the subcommand; the subcommand copy only
        # sets a value when the flag is actually given there
        p = _Parser(add_help=False)
        p.add_argument("--seed", type=int, default=default, help="override the random seed")
        p.add_argument("--threads", type=int, default=default,
                       help=f"BLAS thread limit (default: ${THREADS_ENV} or unlimited)")
        p.add_argument("--out", default=default, help="output directory")
        return p

    common = global_flags(argparse.SUPPRESS)
    parser = _Parser(prog="conceptseg", description=__doc__.splitlines()[0],
                     parents=[global_flags(None)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text, needs_out=True):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func, needs_out=needs_out)
        return p

    def model_and_data(p):
        p.add_argument("--model", required=True, help="directory written by `train`")
        p.add_argument("--data", required=True, help="dataset directory or manifest.json")

    def config_opts(p):
        p.add_argument("--config", help="TrainConfig as JSON or TOML")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (repeatable)")

    p = add("gen-data", cmd_gen_data, "generate a synthetic dataset")
    p.add_argument("--spec", help="SceneSpec as JSON or TOML")
    p.add_argument("--count", type=int, default=200, help="training images")
    p.add_argument("--val-count", type=int, default=50, help="validation images")
    p.add_argument("--videos", type=int, default=0)
    p.add_argument("--frames", type=int, default=20)

    p = add("segment", cmd_segment, "compute pseudo segments for every image",
            needs_out=False)
    p.add_argument("--data", required=True)
    config_opts(p)

    p = add("train", cmd_train, "train pixel embeddings and concepts")
    p.add_argument("--data", required=True)
    config_opts(p)
    p.add_argument("--save-fields", action="store_true",
                   help="also write embedding fields of the training images")

    p = add("eval-kmeans", cmd_eval_kmeans, "k-means + nearest-neighbour evaluation")
    model_and_data(p)
    p.add_argument("--k", type=int, default=25, help="k-means clusters per image")
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--neighbors", type=int, default=15)

    p = add("eval-linear", cmd_eval_linear, "linear probe evaluation")
    model_and_data(p)

    p = add("track", cmd_track, "propagate first-frame masks through videos")
    model_and_data(p)
    p.add_argument("--neighbors", type=int, default=5)
    p.add_argument("--radius", type=int, default=12)

    p = add("sweep", cmd_sweep, "train and evaluate one model per parameter value")
    p.add_argument("--config", required=True, help="SweepSpec as JSON or TOML")
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = add("visualize", cmd_visualize, "image | PCA | segments | labels panel")
    model_and_data(p)
    p.add_argument("--images", help="comma-separated image indices within the split")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--index", help="index.npz written by eval-kmeans")

    p = add("dump-concepts", cmd_dump_concepts, "contact sheet of segments per concept")
    model_and_data(p)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--top", type=int, default=8)
    p.add_argument("--max-concepts", type=int, default=None)
    return parser


def _thread_limit(n):
    if n is None:
        n = os.environ.get(THREADS_ENV)
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    tune_allocator()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.needs_out and not args.out:
            raise UsageError(f"{args.command} requires --out")
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as err:
        print(f"conceptseg: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, KeyError) as err:
        print(f"conceptseg: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
