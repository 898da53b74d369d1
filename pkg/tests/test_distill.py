import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerprune import autodiff as ad
from layerprune import distill
from layerprune.autodiff import Tensor
from layerprune.distill import (
    CacheError,
    LogitCache,
    adaptive_kd_loss,
    chunk_stream,
    dump_topk_logits,
    entropy_weight,
    kd_loss,
    kl_topk_loss,
    topk_records,
)
from layerprune.model import ModelConfig, forward, init_params

CFG = ModelConfig(n_layers=3, d_model=16, n_heads=2, d_ff=32, vocab=37, max_seq=16)


def random_cache(seed, n=50, K=5, V=37):
    r = np.random.default_rng(seed)
    ids, probs = topk_records(r.normal(size=(n, V)) * 2, K)
    return LogitCache(K, V, ids, probs)


class TestKLTopK:
    def test_worked_example(self):
        # ids {2, 3}: the vocabulary has only four entries
        loss = kl_topk_loss(Tensor(np.zeros(4)), np.array([2, 3]), np.array([0.9, 0.1]))
        expected = 0.9 * math.log(0.9 / 0.25) + 0.1 * math.log(0.1 / 0.25)
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)
        assert float(loss.data) == pytest.approx(1.0612, abs=1e-3)

    def test_identical_distributions(self):
        z = np.random.default_rng(0).normal(size=9)
        p = np.exp(z - z.max())
        p /= p.sum()
        ids, probs = topk_records(z, 9)
        assert abs(float(kl_topk_loss(Tensor(z), ids, p[ids]).data)) < 1e-12

    def test_truncation_constant(self):
        # teacher mass s < 1 on the support; student puts the same ratios there
        V = 6
        ids = np.array([4, 1, 3])
        p = np.array([0.4, 0.25, 0.15])
        s = p.sum()
        q_support = p / s
        logits = np.full(V, -1e3)
        logits[ids] = np.log(q_support)
        brute = 0.0
        for c, pc in zip(ids, p):
            q = math.exp(logits[c]) / math.fsum(math.exp(v) for v in logits)
            brute += pc * math.log(pc / q)
        got = float(kl_topk_loss(Tensor(logits), ids, p).data)
        assert got == pytest.approx(brute, abs=1e-12)
        assert got == pytest.approx(s * math.log(s), abs=1e-12)

    def test_gradient(self):
        r = np.random.default_rng(1)
        ids, probs = topk_records(r.normal(size=(4, 11)), 3)

        def loss(z):
            return adaptive_kd_loss(z, ids, probs)

        for seed in range(5):
            z = np.random.default_rng(seed).normal(size=(4, 11))
            assert ad.finite_diff_check(loss, {"z": z}, ["z"]) < 1e-4

    def test_underflow_clamped_and_counted(self):
        before = distill.underflow.count
        logits = np.array([0.0, -1e4, 0.0])
        loss = kl_topk_loss(Tensor(logits), np.array([1]), np.array([0.5]))
        assert distill.underflow.count == before + 1
        assert np.isfinite(loss.data)
        assert float(loss.data) == pytest.approx(0.5 * (math.log(0.5) - math.log(1e-30)), rel=1e-12)

    def test_no_underflow_nominal(self):
        before = distill.underflow.count
        c = random_cache(2)
        kd_loss(np.random.default_rng(2).normal(size=(50, 37)), c.ids, c.probs)
        assert distill.underflow.count == before

    def test_misaligned(self):
        with pytest.raises(CacheError):
            kl_topk_loss(Tensor(np.zeros((3, 5))), np.zeros((2, 2), int), np.zeros((2, 2)))


class TestEntropyWeight:
    def test_extremes(self):
        assert entropy_weight(np.array([1.0, 0, 0, 0])) == 0.0
        assert entropy_weight(np.full(10, 0.1)) == pytest.approx(math.log(10), abs=1e-12)
        assert entropy_weight(np.array([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-12)

    def test_renormalised(self):
        # [0.3, 0.3] renormalises to [0.5, 0.5]
        assert entropy_weight(np.array([0.3, 0.3])) == pytest.approx(math.log(2), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
    def test_bounds(self, probs):
        p = np.sort(np.array(probs))[::-1]
        if p.sum() == 0:
            return
        h = entropy_weight(p)
        assert -1e-12 <= h <= math.log(len(p)) + 1e-12


class TestAdaptiveKD:
    def test_unit_weights_bitwise(self):
        c = random_cache(3)
        z = np.random.default_rng(3).normal(size=(50, 37))
        a = adaptive_kd_loss(z, c.ids, c.probs, weights=np.ones(50))
        b = kd_loss(z, c.ids, c.probs)
        assert a.data.tobytes() == b.data.tobytes()

    def test_one_hot_records_zero(self):
        ids = np.tile(np.arange(4), (6, 1))
        probs = np.tile([1.0, 0, 0, 0], (6, 1))
        z = np.random.default_rng(4).normal(size=(6, 9)) * 5
        assert float(adaptive_kd_loss(z, ids, probs).data) == 0.0

    def test_shared_distribution(self):
        ids = np.tile([3, 0, 5], (8, 1))
        probs = np.tile([0.5, 0.3, 0.1], (8, 1))
        z = np.random.default_rng(5).normal(size=(8, 7))
        h = entropy_weight(probs[0])
        a = float(adaptive_kd_loss(z, ids, probs).data)
        b = float(kd_loss(z, ids, probs).data)
        assert a == pytest.approx(h * b, rel=1e-14)

    def test_mixed_batch_compositional(self):
        c = random_cache(6, n=12)
        z = np.random.default_rng(6).normal(size=(12, 37))
        per = [float(kl_topk_loss(Tensor(z[i]), c.ids[i], c.probs[i]).data) for i in range(12)]
        w = [entropy_weight(c.probs[i]) for i in range(12)]
        expected = math.fsum(a * b for a, b in zip(per, w)) / 12
        assert float(adaptive_kd_loss(z, c.ids, c.probs).data) == pytest.approx(expected, rel=1e-12)

    def test_empty(self):
        with pytest.raises(CacheError):
            adaptive_kd_loss(np.zeros((0, 4)), np.zeros((0, 2), int), np.zeros((0, 2)))


class TestCache:
    def test_full_vocab_sums_to_one(self):
        p = init_params(CFG, 0)
        c = dump_topk_logits(p, np.arange(200) % 37, 37, 16)
        np.testing.assert_allclose(c.probs.astype(np.float64).sum(axis=1), 1.0, atol=1e-6)

    def test_records_match_teacher(self):
        p = init_params(CFG, 1, np.float64)
        stream = np.random.default_rng(1).integers(0, 37, size=100)
        c = dump_topk_logits(p, stream, 10, 16, batch=2)
        assert c.token_count == ((100 - 1) // 16) * 16
        logits = forward(p, None, stream[16:32]).data[5]
        q = np.exp(logits - logits.max())
        q /= q.sum()
        ids, probs = c.record(16 + 5)
        np.testing.assert_array_equal(ids, np.argsort(-q, kind="stable")[:10])
        np.testing.assert_allclose(probs, q[ids], rtol=1e-6)
        c.validate()

    def test_dump_deterministic(self):
        p = init_params(CFG, 2)
        s = np.random.default_rng(2).integers(0, 37, size=300)
        assert dump_topk_logits(p, s, 10, 16).to_bytes() == dump_topk_logits(p, s, 10, 16).to_bytes()

    def test_k_errors(self):
        p = init_params(CFG, 0)
        with pytest.raises(CacheError):
            dump_topk_logits(p, np.arange(50) % 37, 38, 16)
        with pytest.raises(CacheError):
            dump_topk_logits(p, np.arange(50) % 37, 0, 16)

    def test_roundtrip(self, tmp_path):
        c = random_cache(7)
        c.save(tmp_path / "c.e3lc")
        raw = (tmp_path / "c.e3lc").read_bytes()
        d = LogitCache.load(tmp_path / "c.e3lc")
        assert d.ids.tobytes() == c.ids.tobytes() and d.probs.tobytes() == c.probs.tobytes()
        assert d.to_bytes() == raw

    def test_header_layout(self):
        c = random_cache(8, n=3, K=2, V=37)
        raw = c.to_bytes()
        assert raw[:4] == b"E3LC"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 37
        assert int.from_bytes(raw[16:24], "little") == 3
        first = np.frombuffer(raw[24:40], dtype="<u4")
        np.testing.assert_array_equal(first[:2], c.ids[0])
        np.testing.assert_array_equal(first[2:].view("<f4"), c.probs[0])

    def test_corrupt(self):
        raw = random_cache(9).to_bytes()
        with pytest.raises(CacheError):
            LogitCache.from_bytes(b"XXXX" + raw[4:])
        with pytest.raises(CacheError):
            LogitCache.from_bytes(raw[:-3])
        with pytest.raises(CacheError):
            LogitCache.from_bytes(raw[:10])

    def test_validate(self):
        with pytest.raises(CacheError):
            LogitCache(2, 5, np.array([[1, 1]]), np.array([[0.5, 0.2]])).validate()
        with pytest.raises(CacheError):
            LogitCache(2, 5, np.array([[1, 2]]), np.array([[0.2, 0.5]])).validate()
        with pytest.raises(CacheError):
            LogitCache(2, 5, np.array([[1, 7]]), np.array([[0.5, 0.2]])).validate()

    def test_chunk_stream(self):
        ch = chunk_stream(np.arange(50), 16)
        assert ch.shape == (3, 16)
        with pytest.raises(CacheError):
            chunk_stream(np.arange(10), 16)
