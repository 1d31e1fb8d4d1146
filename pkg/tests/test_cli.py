import json

import numpy as np
import pytest

from conceptseg import io
from conceptseg.cli import main
from conceptseg.concepts import assign, init_codebook
from conceptseg.data import DatasetManifest, SceneSpec, generate_scene
from conceptseg.encoder import PixelMLP
from conceptseg.pipeline import eval_kmeans, eval_linear
from conceptseg.sweep import SweepData, SweepSpec, run_sweep
from conceptseg.trainer import TrainConfig, train
from conceptseg.visualize import concept_sheet, panel, usage_order

TINY = ["--set", "iterations=4", "--set", "batch_size=2", "--set", "num_concepts=8",
        "--set", "dim=8", "--set", "hidden=16"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--count", "6", "--val-count", "3", "--videos", "1",
                 "--frames", "3", "--seed", "1", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def model(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--threads", "1"] + TINY) == 0
    return out


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestExitCodes:
    def test_usage(self, capsys):
        assert main(["frobnicate"]) == 1
        assert main(["train", "--data", "x"]) == 1  # missing --out
        assert main([]) == 1

    def test_bad_config_key(self, dataset, tmp_path):
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path),
                     "--set", "bogus=1"]) == 1

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 2

    def test_missing_model(self, dataset, tmp_path):
        assert main(["eval-kmeans", "--model", str(tmp_path), "--data", str(dataset),
                     "--out", str(tmp_path / "o")]) == 2

    def test_nan_abort(self, dataset, tmp_path):
        # a NaN step size poisons the weights after the first update
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path),
                     "--set", "base_lr=NaN"] + TINY) == 3
        dump = json.loads((tmp_path / "diverged.json").read_text())
        assert dump["step"] == 1 and dump["non_finite"]
        assert not (tmp_path / "encoder.npz").exists()


def test_gen_data_reproducible(tmp_path):
    args = ["gen-data", "--count", "3", "--val-count", "1", "--videos", "1", "--frames", "2",
            "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_toml_spec(tmp_path):
    (tmp_path / "spec.toml").write_text(
        'num_classes = 2\nkinds = ["disk", "ring"]\nshapes_per_image = [1, 2]\n')
    assert main(["gen-data", "--spec", str(tmp_path / "spec.toml"), "--count", "2",
                 "--val-count", "1", "--out", str(tmp_path / "d")]) == 0
    assert DatasetManifest.load(tmp_path / "d").classes == ["background", "disk_1", "ring_2"]


def test_train_reproducible(dataset, model, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--threads", "1"]
                + TINY) == 0
    assert _tree(tmp_path) == _tree(model)


def test_global_flags_before_command(dataset, tmp_path):
    assert main(["--seed", "5", "--out", str(tmp_path), "train", "--data", str(dataset)]
                + TINY) == 0
    assert json.loads((tmp_path / "config.json").read_text())["seed"] == 5


def test_config_file(dataset, tmp_path):
    cfg = TrainConfig(iterations=2, batch_size=2, num_concepts=8, dim=8, hidden=16)
    (tmp_path / "cfg.json").write_text(json.dumps(cfg.to_dict()))
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(dataset),
                 "--out", str(tmp_path / "m")]) == 0
    assert len((tmp_path / "m" / "log.jsonl").read_text().splitlines()) == 2


def test_segment_then_train_uses_saved_segments(dataset, tmp_path):
    assert main(["segment", "--data", str(dataset)]) == 0
    m = DatasetManifest.load(dataset)
    assert all(e.seg is not None for e in m.entries)
    seg = io.load_segment_map(m.root / m.entries[0].seg)
    seg.validate(connected=True)
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path)] + TINY) == 0


@pytest.mark.parametrize("command", [["eval-kmeans", "--k", "5", "--iters", "10"],
                                     ["eval-linear"], ["track"], ["visualize"],
                                     ["dump-concepts"]])
def test_commands_reproducible(dataset, model, tmp_path, command):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        argv = [command[0], "--model", str(model), "--data", str(dataset), "--out", str(out),
                "--seed", "3", "--threads", "1"] + command[1:]
        assert main(argv) == 0
        outs.append(_tree(out))
    assert outs[0] == outs[1] and outs[0]


def test_eval_outputs(dataset, model, tmp_path):
    assert main(["eval-kmeans", "--model", str(model), "--data", str(dataset),
                 "--out", str(tmp_path), "--k", "5"]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert 0 <= metrics["miou"] <= 1
    assert len(list((tmp_path / "predictions").glob("*.png"))) == 3
    index = io.load_index(tmp_path / "index.npz")
    assert len(index) == metrics["index_size"]


def test_sweep_command(dataset, tmp_path):
    (tmp_path / "sweep.toml").write_text(
        'parameter = "beta"\nvalues = [0.1, 0.5]\nprotocols = ["kmeans"]\n'
        '[base]\niterations = 2\nbatch_size = 2\nnum_concepts = 8\ndim = 8\nhidden = 16\n')
    assert main(["sweep", "--config", str(tmp_path / "sweep.toml"), "--data", str(dataset),
                 "--out", str(tmp_path / "o")]) == 0
    js = json.loads((tmp_path / "o" / "sweep_beta.json").read_text())
    assert [r["value"] for r in js["rows"]] == [0.1, 0.5]
    assert len(js["runs"]) == 2
    assert (tmp_path / "o" / "sweep_beta.txt").read_text().startswith("beta")


def test_sweep_bad_parameter(dataset, tmp_path):
    (tmp_path / "s.json").write_text('{"parameter": "gamma", "values": [1]}')
    assert main(["sweep", "--config", str(tmp_path / "s.json"), "--data", str(dataset),
                 "--out", str(tmp_path)]) == 1


SCENES = [generate_scene(SceneSpec(image_size=(24, 24), size_range=(4, 7)), 0, i)
          for i in range(6)]
SMALL = TrainConfig(iterations=3, batch_size=2, num_concepts=8, dim=8, hidden=16,
                    pixel_sample_count=32)


@pytest.fixture(scope="module")
def sweep_data():
    imgs = [s.image / 255.0 for s in SCENES]
    labs = [s.label for s in SCENES]
    return SweepData(imgs[:4], labs[:4], imgs[4:], labs[4:], 5)


class TestSweep:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SweepSpec("beta", [])
        with pytest.raises(ValueError):
            SweepSpec("gamma", [1])
        with pytest.raises(ValueError):
            SweepSpec("beta", [0.1], protocols=("nope",))

    def test_single_value_matches_direct_run(self, sweep_data):
        sweep = SweepSpec("K", [6], SMALL)
        row = run_sweep(sweep, sweep_data).rows[0]
        res = train(sweep_data.train_images, TrainConfig(**{**SMALL.__dict__,
                                                            "num_concepts": 6}))
        args = (res.encoder, sweep_data.train_images, sweep_data.train_labels,
                sweep_data.val_images, sweep_data.val_labels, 5)
        assert row["miou_kmeans"] == eval_kmeans(*args, seed=SMALL.seed)["miou"]
        assert row["miou_linear"] == eval_linear(*args, seed=SMALL.seed)["miou"]

    def test_rows_in_input_order_one_run_each(self, sweep_data):
        values = [0.7, 0.1, 0.4]
        res = run_sweep(SweepSpec("beta", values, SMALL, ("kmeans",)), sweep_data)
        assert [r["value"] for r in res.rows] == values
        assert [r["value"] for r in res.runs] == values
        assert all(r["iterations"] == SMALL.iterations for r in res.runs)
        assert all(r["miou_linear"] is None for r in res.rows)
        assert len(res.table().splitlines()) == 2 + len(values)

    def test_failed_cell_recorded(self, sweep_data):
        # K=1 cannot build a codebook; the other cell still runs
        res = run_sweep(SweepSpec("K", [1, 4], SMALL, ("kmeans",)), sweep_data)
        assert res.rows[0]["error"] and res.rows[1]["error"] is None
        assert res.rows[1]["miou_kmeans"] is not None
        assert "failed" in res.table().splitlines()[2]

    def test_workers_match_serial(self, sweep_data):
        spec = SweepSpec("bank_batches", [0, 2], SMALL, ("kmeans",))
        assert run_sweep(spec, sweep_data, workers=2).rows == run_sweep(spec, sweep_data).rows

    def test_table_layout(self):
        from conceptseg.sweep import SweepResult

        res = SweepResult("beta", [{"value": 0.1, "miou_kmeans": 0.5, "miou_linear": 0.25,
                                    "error": None}], [])
        lines = res.table().splitlines()
        assert lines[0].split(" | ") == ["beta", "mIoU k-means", "mIoU LC"]
        assert lines[2].split("|")[1].strip() == "50.00"
        assert lines[2].split("|")[2].strip() == "25.00"


class TestVisualize:
    def test_random_encoder_panel(self):
        enc = PixelMLP(8, 16, seed=0)
        img = panel(enc, [SCENES[0].image / 255.0], k=4, iters=5)
        assert img.dtype == np.uint8 and img.shape == (24, 3 * 24 + 4, 3)

    def test_deterministic_png(self, tmp_path):
        enc = PixelMLP(8, 16, seed=0)
        for name in ("a.png", "b.png"):
            io.save_rgb(tmp_path / name, panel(enc, [s.image / 255.0 for s in SCENES[:2]],
                                               k=4, iters=5))
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_concept_sheet_usage_order(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            cb = init_codebook(6, 8, seed=int(rng.integers(100)))
            assign(cb, rng.standard_normal((int(rng.integers(1, 30)), 8)))
            sheet, rows = concept_sheet(PixelMLP(8, 16, seed=1), cb,
                                        [s.image / 255.0 for s in SCENES[:2]], top_n=3,
                                        tile=8, k=4, iters=5)
            counts = [int(cb.usage[c]) for c in rows]
            assert counts == sorted(counts, reverse=True) and min(counts) > 0
            assert rows == [c for c in usage_order(cb) if cb.usage[c] > 0]
            assert sheet.shape == (8 * len(rows), 24, 3)
