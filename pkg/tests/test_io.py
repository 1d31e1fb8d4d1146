import numpy as np
import pytest

from conceptseg import io
from conceptseg.concepts import assign, init_codebook
from conceptseg.encoder import PixelMLP, PixelTable
from conceptseg.inference import RetrievalIndex
from conceptseg.pseudoseg import SegmentMap, relabel_dense


def test_label_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(200):
        lab = rng.integers(0, 256, size=tuple(rng.integers(1, 12, size=2)))
        path = tmp_path / f"l{i % 3}.png"
        io.save_label(path, lab)
        back = io.load_label(path)
        assert back.dtype == np.uint8 and np.array_equal(back, lab)


def test_label_range():
    with pytest.raises(ValueError):
        io.save_label("unused.png", np.array([[256]]))


def test_rgb_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    io.save_rgb(tmp_path / "x.png", img)
    assert np.array_equal(np.round(io.load_rgb(tmp_path / "x.png") * 255), img)


def test_field_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    for _ in range(200):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=3))
        vals = rng.standard_normal(shape)
        io.save_field(tmp_path / "f.bin", vals)
        back = io.load_field(tmp_path / "f.bin")
        assert np.array_equal(back, vals.astype(np.float32))


def test_field_bad_magic(tmp_path):
    (tmp_path / "f.bin").write_bytes(b"nope" + bytes(20))
    with pytest.raises(ValueError):
        io.load_field(tmp_path / "f.bin")


def test_segment_map_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    for _ in range(200):
        ids, src = relabel_dense(rng.integers(0, 9, size=tuple(rng.integers(1, 10, size=2))))
        seg = SegmentMap(ids, len(src))
        io.save_segment_map(tmp_path / "s.png", seg)
        back = io.load_segment_map(tmp_path / "s.png")
        assert back.segment_count == seg.segment_count and np.array_equal(back.ids, seg.ids)
    raw = (tmp_path / "s.png.bin").read_bytes()
    h, w = back.ids.shape
    assert len(raw) == 16 + 4 * h * w


def test_codebook_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    for i in range(200):
        cb = init_codebook(int(rng.integers(2, 10)), int(rng.integers(2, 6)), seed=i)
        assign(cb, rng.standard_normal((5, cb.dim)))
        io.save_codebook(tmp_path / "c.bin", cb)
        back = io.load_codebook(tmp_path / "c.bin")
        assert np.array_equal(back.vectors, cb.vectors)
        assert np.array_equal(back.usage, cb.usage)
        assert np.array_equal(back.staleness, cb.staleness)


@pytest.mark.parametrize("make", [lambda: PixelMLP(6, 8, seed=1),
                                  lambda: PixelTable(4, {0: (3, 5), 7: (2, 2)}, seed=2)])
def test_encoder_round_trip(tmp_path, make):
    enc = make()
    io.save_encoder(tmp_path / "enc.npz", enc)
    back = io.load_encoder(tmp_path / "enc.npz")
    a, b = enc.state(), back.state()
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(np.asarray(a[k]), np.asarray(b[k]))


def test_index_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    idx = RetrievalIndex(rng.standard_normal((9, 3)), rng.integers(0, 4, size=9))
    io.save_index(tmp_path / "idx.npz", idx)
    back = io.load_index(tmp_path / "idx.npz")
    assert np.array_equal(back.vectors, idx.vectors) and np.array_equal(back.classes, idx.classes)
