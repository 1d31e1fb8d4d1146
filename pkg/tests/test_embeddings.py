import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conceptseg.embeddings import (DegenerateCounter, EmbeddingField, cosine, init_field,
                                   normalize, pca_project, segment_means)
from conceptseg.pseudoseg import SegmentMap, relabel_dense
from oracles import segment_means_reference

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vec8 = arrays(np.float64, 8, elements=finite)


class TestInitField:
    def test_deterministic(self):
        a = init_field(4, 4, 8, seed=1)
        b = init_field(4, 4, 8, seed=1)
        assert np.array_equal(a.values, b.values)

    def test_unit_norm(self):
        f = init_field(5, 3, 16, seed=2)
        assert f.values.shape == (3, 5, 16)
        assert np.allclose(np.linalg.norm(f.values, axis=2), 1.0, atol=1e-6)

    def test_single_pixel(self):
        f = init_field(1, 1, 2, seed=0)
        assert f.values.shape == (1, 1, 2)
        assert abs(np.linalg.norm(f.values[0, 0]) - 1.0) < 1e-6

    def test_rejects_small_dim(self):
        with pytest.raises(ValueError):
            init_field(2, 2, 1, seed=0)


class TestSegmentMeans:
    def test_constant_segment(self):
        v = np.array([0.6, 0.8, 0.0])
        f = EmbeddingField(np.broadcast_to(v, (3, 3, 3)).copy())
        m = segment_means(f, SegmentMap(np.zeros((3, 3), dtype=np.int64), 1))
        assert np.allclose(m.vectors[0], v)
        assert m.sizes.tolist() == [9]

    def test_antipodal_pair_is_zero(self):
        v = np.array([1.0, 0.0])
        f = EmbeddingField(np.stack([v, -v]).reshape(1, 2, 2))
        m = segment_means(f, SegmentMap(np.zeros((1, 2), dtype=np.int64), 1))
        assert np.allclose(m.vectors[0], 0.0)

    def test_matches_summation_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            f = init_field(3, 3, 5, seed=int(rng.integers(1 << 30)))
            ids, _ = relabel_dense(rng.integers(0, 2, size=(3, 3)))
            count = ids.max() + 1
            m = segment_means(f, SegmentMap(ids, count))
            ref = segment_means_reference(f.values, ids, count)
            assert np.allclose(m.vectors, ref, rtol=0, atol=1e-14)
            assert m.sizes.sum() == 9

    def test_not_renormalized(self):
        f = init_field(4, 4, 6, seed=3)
        m = segment_means(f, SegmentMap(np.zeros((4, 4), dtype=np.int64), 1))
        assert np.linalg.norm(m.vectors[0]) < 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            segment_means(init_field(4, 4, 3, 0), SegmentMap(np.zeros((3, 4), dtype=np.int64), 1))

    def test_linear_in_field(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            h, w, d = rng.integers(1, 6), rng.integers(1, 6), rng.integers(2, 6)
            f1, f2 = rng.standard_normal((2, h, w, d))
            ids, src = relabel_dense(rng.integers(0, 4, size=(h, w)))
            seg = SegmentMap(ids, len(src))
            a, b = rng.uniform(-3, 3, size=2)
            lhs = segment_means(EmbeddingField(a * f1 + b * f2), seg).vectors
            rhs = (a * segment_means(EmbeddingField(f1), seg).vectors
                   + b * segment_means(EmbeddingField(f2), seg).vectors)
            assert np.allclose(lhs, rhs, atol=1e-12)


class TestCosine:
    def test_examples(self):
        v = np.array([0.3, -1.2, 2.0])
        assert cosine(v, v) == pytest.approx(1.0)
        assert cosine(v, -v) == pytest.approx(-1.0)
        assert cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_degenerate_counts(self):
        c = DegenerateCounter()
        assert cosine(np.zeros(3), np.ones(3), c) == 0.0
        assert cosine(np.full(3, 1e-14), np.ones(3), c) == 0.0
        assert c.count == 2

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            cosine(np.ones(2), np.ones(3))

    @settings(max_examples=300, deadline=None)
    @given(vec8, vec8, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_symmetric_and_scale_invariant(self, a, b, alpha, beta):
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        base = cosine(a, b)
        assert -1.0 <= base <= 1.0
        assert cosine(b, a) == pytest.approx(base, abs=1e-12)
        assert cosine(alpha * a, beta * b) == pytest.approx(base, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, (4, 6), elements=finite))
def test_normalize_idempotent(x):
    once = normalize(x)
    assert np.allclose(normalize(once), once, atol=1e-12, rtol=0)


class TestPCA:
    def test_constant_field_is_gray(self):
        f = EmbeddingField(np.broadcast_to([0.0, 1.0, 0.0, 0.0], (5, 5, 4)).copy())
        assert np.all(pca_project(f) == 0.5)

    def test_rank_one_varies_in_one_channel(self):
        t = np.linspace(-1, 1, 20).reshape(4, 5, 1)
        d = np.array([1.0, 2.0, -1.0, 0.5])
        f = EmbeddingField(0.3 + t * d)
        out = pca_project(f)
        spread = out.reshape(-1, 3).max(axis=0) - out.reshape(-1, 3).min(axis=0)
        assert spread[0] == pytest.approx(1.0)
        assert np.all(spread[1:] == 0)

    def test_three_components_beat_two(self):
        f = init_field(6, 6, 8, seed=4)
        x = f.flat() - f.flat().mean(axis=0)
        evals, evecs = np.linalg.eigh(x.T @ x)
        top = evecs[:, ::-1]

        def residual(n):
            p = top[:, :n]
            return np.linalg.norm(x - x @ p @ p.T)

        assert residual(3) <= residual(2)
        # the projection's channels span the same subspace as the oracle's top-3
        out = pca_project(f).reshape(-1, 3)
        proj = x @ top[:, :3]
        for c in range(3):
            corr = np.corrcoef(out[:, c], proj[:, c])[0, 1]
            assert abs(corr) == pytest.approx(1.0, abs=1e-9)
        assert out.min() >= 0 and out.max() <= 1
