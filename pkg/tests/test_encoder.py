import numpy as np
import pytest

from conceptseg.augment import ViewTransform
from conceptseg.encoder import PixelMLP, PixelTable, encoder_from_state, pixel_features


def _fd(loss, arr, eps=1e-6):
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + eps
        up = loss()
        arr[i] = old - eps
        down = loss()
        arr[i] = old
        out[i] = (up - down) / (2 * eps)
    return out


@pytest.mark.parametrize("seed", range(3))
def test_mlp_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((5, 6, 3))
    enc = PixelMLP(4, hidden=5, seed=seed)
    t = ViewTransform((5, 6), (1, 0, 4, 6), (5, 5), flip=True)
    view = t.apply(img)
    target = rng.standard_normal((5, 5, 4))
    z, ctx = enc.embed_view(0, view, t)
    enc.accumulate(target, ctx)
    loss = lambda: float((enc.embed_view(0, view, t)[0] * target).sum())
    for name, param in enc.params.items():
        numeric = _fd(loss, param)
        assert np.abs(enc.grads[name] - numeric).max() < 1e-7 * max(1, np.abs(numeric).max())


def test_table_backward_matches_finite_differences():
    rng = np.random.default_rng(4)
    enc = PixelTable(3, {0: (4, 5)}, seed=1)
    t = ViewTransform((4, 5), (0, 1, 3, 4), (6, 6), flip=False)
    target = rng.standard_normal((6, 6, 3))
    _, ctx = enc.embed_view(0, None, t)
    enc.accumulate(target, ctx)
    table = enc.tables[0]
    numeric = _fd(lambda: float((enc.embed_view(0, None, t)[0] * target).sum()), table)
    assert np.allclose(enc.grads[0].reshape(table.shape), numeric, atol=1e-8)


def test_identity_view_equals_embed():
    img = np.random.default_rng(5).random((7, 9, 3))
    enc = PixelMLP(6, 8, seed=2)
    z, _ = enc.embed_view(None, img, ViewTransform.identity(7, 9))
    assert np.array_equal(z, enc.embed(img).values)


def test_unit_norm_outputs():
    rng = np.random.default_rng(6)
    for i in range(200):
        h, w = (int(v) for v in rng.integers(1, 12, size=2))
        enc = PixelMLP(int(rng.integers(2, 9)), 4, seed=i)
        vals = enc.embed(rng.random((h, w, 3))).values
        assert np.allclose(np.linalg.norm(vals, axis=2), 1.0)


def test_features_shape_and_centre():
    f = pixel_features(np.full((4, 4, 3), 0.5))
    assert f.shape == (4, 4, 9) and np.allclose(f, 0.0)


def test_table_unknown_image():
    with pytest.raises(KeyError):
        PixelTable(3, {0: (2, 2)}).embed(key=1)


@pytest.mark.parametrize("cls,args", [(PixelMLP, (1,)), (PixelTable, (1, {}))])
def test_dimension_check(cls, args):
    with pytest.raises(ValueError):
        cls(*args)


def test_state_round_trip_and_step():
    enc = PixelMLP(4, 6, seed=3)
    img = np.random.default_rng(7).random((3, 3, 3))
    _, ctx = enc.embed_view(0, img, ViewTransform.identity(3, 3))
    enc.accumulate(np.ones((3, 3, 4)), ctx)
    assert enc.grad_norm() > 0
    enc.step(0.1)
    assert enc.grad_norm() == 0
    again = encoder_from_state(enc.state())
    assert np.array_equal(again.embed(img).values, enc.embed(img).values)
    with pytest.raises(ValueError):
        encoder_from_state({"kind": "cnn", "dim": 3})
