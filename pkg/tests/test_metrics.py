import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from promptseg.embedding import EmbeddingBatch, SyntheticWorld, make_synthetic_encoder, make_two_cluster_corpus
from promptseg.metrics import (
    SegScore,
    boundary,
    dice,
    nsd,
    paired_ttest,
    retrieval_protocol,
    retrieval_topk,
    write_seg_report,
)

from oracles import boundary_oracle, dice_oracle, nsd_oracle


def square(side, r0, c0, k, shape=(16, 16)):
    m = np.zeros(shape, dtype=bool)
    m[r0 : r0 + k, c0 : c0 + side] = True
    return m


def rand_unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestDice:
    def test_examples(self):
        a = square(4, 4, 4, 4)
        assert dice(a, a) == 1.0
        assert dice(a, square(4, 10, 10, 4)) == 0.0
        x = np.zeros((1, 6), dtype=bool)
        y = np.zeros((1, 6), dtype=bool)
        x[0, :4] = True
        y[0, 2:6] = True
        assert dice(x, y) == 0.5
        assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_oracle(self, rng):
        for _ in range(50):
            a, b = rng.random((2, 12, 12)) < 0.3
            assert dice(a, b) == pytest.approx(dice_oracle(a, b), abs=1e-15)


class TestNSD:
    def test_identical(self):
        a = square(5, 3, 3, 5)
        assert nsd(a, a) == 1.0

    def test_far_single_pixels(self):
        a = np.zeros((16, 16), dtype=bool)
        b = a.copy()
        a[5, 5] = True
        b[5, 8] = True
        assert nsd(a, b, 2) == 0.0
        assert nsd(a, b, 3) == 1.0

    @pytest.mark.parametrize("k", [0, 1, 2])
    def test_shift_within_tolerance(self, k):
        assert nsd(square(5, 4, 4, 5), square(5, 4, 4 + k, 5), 2) == 1.0

    def test_empty_conventions(self):
        z = np.zeros((4, 4), dtype=bool)
        assert nsd(z, z) == 1.0
        assert nsd(z, square(2, 1, 1, 2, (4, 4))) == 0.0

    def test_negative_tolerance(self):
        with pytest.raises(ValueError):
            nsd(np.ones((2, 2)), np.ones((2, 2)), -1)

    def test_boundary_oracle(self, rng):
        for _ in range(30):
            m = rng.random((10, 14)) < 0.6
            np.testing.assert_array_equal(boundary(m), boundary_oracle(m))

    def test_brute_force_oracle(self, backend, rng):
        for _ in range(40):
            shape = tuple(rng.integers(2, 33, size=2))
            a = rng.random(shape) < rng.uniform(0.05, 0.6)
            b = rng.random(shape) < rng.uniform(0.05, 0.6)
            tol = int(rng.integers(0, 4))
            assert nsd(a, b, tol) == nsd_oracle(a, b, tol)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.bool_, (12, 12)), arrays(np.bool_, (12, 12)), st.integers(0, 3))
    def test_symmetric(self, a, b, tol):
        assert nsd(a, b, tol) == nsd(b, a, tol)
        assert dice(a, b) == dice(b, a)

    def test_translation_invariant(self, rng):
        a = np.zeros((32, 32), dtype=bool)
        b = a.copy()
        a[8:20, 8:20] = rng.random((12, 12)) < 0.6
        b[8:20, 8:20] = rng.random((12, 12)) < 0.6
        shift = lambda m: np.roll(m, (3, 5), axis=(0, 1))  # noqa: E731
        assert nsd(a, b) == nsd(shift(a), shift(b))
        assert dice(a, b) == dice(shift(a), shift(b))


class TestRetrieval:
    def test_identity(self):
        e = np.eye(8)
        r = retrieval_topk(EmbeddingBatch(e, e), 1)
        assert r.image_to_text == r.text_to_image == 100.0

    def test_k_too_large(self):
        e = np.eye(4)
        with pytest.raises(ValueError):
            retrieval_topk(EmbeddingBatch(e, e), 4)

    def test_chance_level(self):
        rng = np.random.default_rng(7)
        acc = [retrieval_topk(EmbeddingBatch(rand_unit(rng, 50, 16), rand_unit(rng, 50, 16)), 1)
               for _ in range(1000)]
        i2t = np.mean([a.image_to_text for a in acc])
        t2i = np.mean([a.text_to_image for a in acc])
        assert abs(i2t - 2.0) <= 1.0 and abs(t2i - 2.0) <= 1.0

    def test_top2_at_least_top1(self, rng):
        for _ in range(50):
            b = EmbeddingBatch(rand_unit(rng, 10, 4), rand_unit(rng, 10, 4))
            t1, t2 = retrieval_topk(b, 1), retrieval_topk(b, 2)
            assert t2.image_to_text >= t1.image_to_text and t2.text_to_image >= t1.text_to_image

    def test_rotation_invariant(self, rng):
        I, T = rand_unit(rng, 20, 8), rand_unit(rng, 20, 8)
        T = 0.6 * I + 0.4 * T
        T /= np.linalg.norm(T, axis=1, keepdims=True)
        Q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        for k in (1, 2, 5):
            a = retrieval_topk(EmbeddingBatch(I, T), k)
            b = retrieval_topk(EmbeddingBatch(I @ Q, T @ Q), k)
            assert a == pytest.approx(b)

    def test_ties_break_by_index(self):
        e = np.ones((3, 2)) / np.sqrt(2)
        r = retrieval_topk(EmbeddingBatch(e, e), 1)
        assert r.image_to_text == pytest.approx(100 / 3)

    def test_protocol_perfect(self):
        e = np.eye(120)
        rep = retrieval_protocol(None, None, runs=5, batch_size=50, embeddings=EmbeddingBatch(e, e))
        for v in (rep.top1_i2t, rep.top2_i2t, rep.top1_t2i, rep.top2_t2i):
            assert v == (100.0, 0.0)

    def test_protocol_too_few(self):
        e = np.eye(20)
        with pytest.raises(ValueError):
            retrieval_protocol(None, None, batch_size=50, embeddings=EmbeddingBatch(e, e))

    def test_protocol_drops_remainder(self):
        # with 60 pairs and batch 50, each run scores one batch of 50
        rng = np.random.default_rng(3)
        I = rand_unit(rng, 60, 6)
        T = rand_unit(rng, 60, 6)
        rep = retrieval_protocol(None, None, runs=2, batch_size=50, seed=1, embeddings=EmbeddingBatch(I, T))
        expect = []
        for r in range(2):
            idx = np.random.default_rng([1, r]).permutation(60)[:50]
            expect.append(retrieval_topk(EmbeddingBatch(I[idx], T[idx]), 1).image_to_text)
        assert rep.top1_i2t == pytest.approx((np.mean(expect), np.std(expect)))

    def test_protocol_reproducible(self):
        world = SyntheticWorld(seed=0, side=32)
        pairs = make_two_cluster_corpus(60, seed=0, world=world)
        enc = make_synthetic_encoder(0, 16, side=32, patch=8)
        a = retrieval_protocol(enc, pairs, runs=3, batch_size=20, seed=5)
        b = retrieval_protocol(enc, pairs, runs=3, batch_size=20, seed=5)
        assert a.to_json() == b.to_json()
        assert a.top2_i2t[0] >= a.top1_i2t[0]


class TestTTest:
    def test_reference_example(self):
        a = np.array([3.0, 1.0, 4.0, 2.0, 5.0])
        b = a - np.array([1, -1, 2, 0, 1])
        r = paired_ttest(a, b)
        assert r.t == pytest.approx(1.1767, abs=1e-4)
        assert r.p == pytest.approx(0.3046, abs=1e-4)

    def test_matches_scipy(self, rng):
        for _ in range(30):
            n = int(rng.integers(2, 40))
            a, b = rng.standard_normal((2, n))
            ref = stats.ttest_rel(a, b)
            r = paired_ttest(a, b)
            assert r.t == pytest.approx(ref.statistic, rel=1e-10)
            assert r.p == pytest.approx(ref.pvalue, rel=1e-8, abs=1e-14)

    def test_degenerate(self):
        assert paired_ttest([1, 2, 3], [1, 2, 3]) == (0.0, 1.0, False)
        r = paired_ttest([2, 3, 4, 5], [1, 2, 3, 4])
        assert r.t == np.inf and r.p == 0.0 and r.infinite

    def test_errors(self):
        with pytest.raises(ValueError):
            paired_ttest([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            paired_ttest([1], [2])


def test_seg_report(tmp_path):
    scores = [("a", SegScore(1.0, 1.0, 3)), ("b", SegScore(0.5, 0.25, 3))]
    summary = write_seg_report(scores, tmp_path / "m.csv", tmp_path / "s.json", 3)
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows == [["image_id", "dsc", "nsd"], ["a", "1.0", "1.0"], ["b", "0.5", "0.25"]]
    assert json.loads((tmp_path / "s.json").read_text()) == summary
    assert summary == {"n": 2, "tolerance": 3, "dsc": {"mean": 0.75, "std": 0.25}, "nsd": {"mean": 0.625, "std": 0.375}}
