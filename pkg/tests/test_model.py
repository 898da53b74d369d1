import math

import numpy as np
import pytest

from layerprune import autodiff as ad
from layerprune import checkpoint
from layerprune.autodiff import Tensor
from layerprune.model import (
    ModelConfig,
    ModelError,
    apply,
    forward,
    init_params,
    lm_loss,
    load_checkpoint,
    remove_layers,
    save_checkpoint,
    scale_block_output,
)

SMALL = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ff=32, vocab=23, max_seq=16)


def random_mask(r, L, protected):
    m = (r.random(L) < 0.6).astype(np.float64)
    m[list(protected)] = 1
    return m


def noisy_params(cfg, seed, dtype=np.float32):
    """init_params with every tensor perturbed so LayerNorm affines and biases are non-trivial."""
    p = init_params(cfg, seed, dtype)
    r = np.random.default_rng(seed + 1000)
    for k, v in p.tensors.items():
        p.tensors[k] = (v + r.normal(size=v.shape) * 0.05).astype(dtype)
    return p


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab, c.max_seq) == (8, 64, 4, 256, 256, 128)
        assert c.protected == (0, 7)
        assert c.prunable == (1, 2, 3, 4, 5, 6)

    def test_invalid(self):
        with pytest.raises(ModelError):
            ModelConfig(n_layers=1)
        with pytest.raises(ModelError):
            ModelConfig(d_model=10, n_heads=4)
        with pytest.raises(ModelError):
            ModelConfig(n_layers=4, protected=(0, 4))

    def test_dict_roundtrip(self):
        c = ModelConfig(n_layers=5, protected=(1, 3))
        assert ModelConfig.from_dict(c.to_dict()) == c


class TestForward:
    def test_shapes(self):
        p = init_params(SMALL, 0)
        assert forward(p, None, np.arange(5)).shape == (5, 23)
        assert forward(p, None, np.zeros((3, 7), dtype=int)).shape == (3, 7, 23)

    def test_all_ones_bit_identical(self):
        p = noisy_params(SMALL, 1)
        x = np.random.default_rng(0).integers(0, 23, size=(2, 9))
        base = forward(p, None, x).data
        assert forward(p, [1.0] * 4, x).data.tobytes() == base.tobytes()
        assert forward(p, Tensor(np.ones(4, np.float32)), x).data.tobytes() == base.tobytes()

    def test_all_skip(self):
        cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab=11, max_seq=8)
        p = noisy_params(cfg, 2, np.float64)
        toks = np.array([3, 1, 4, 1, 5])
        w = p.tensors
        x = w["tok_emb"][toks] + w["pos_emb"][:5]
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        h = (x - mu) / np.sqrt(var + 1e-5) * w["ln_f.weight"] + w["ln_f.bias"]
        np.testing.assert_allclose(forward(p, [0.0, 0.0], toks).data, h @ w["lm_head"], atol=1e-12)

    def test_causal(self):
        p = noisy_params(SMALL, 3, np.float64)
        a = forward(p, None, np.array([1, 2, 3, 4, 5])).data
        b = forward(p, None, np.array([1, 2, 3, 9, 9])).data
        np.testing.assert_array_equal(a[:3], b[:3])
        assert not np.allclose(a[3:], b[3:])

    def test_errors(self):
        p = init_params(SMALL, 0)
        with pytest.raises(ModelError):
            forward(p, [1.0] * 3, np.arange(4))
        with pytest.raises(ModelError):
            forward(p, None, np.array([0, 23]))
        with pytest.raises(ModelError):
            forward(p, [1.0, 1.5, 1.0, 1.0], np.arange(4))
        with pytest.raises(ModelError):
            forward(p, None, np.arange(17) % 5)

    def test_mask_gradient_matches_finite_differences(self):
        p = noisy_params(SMALL, 4, np.float64)
        toks = np.random.default_rng(1).integers(0, 23, size=(2, 6))
        tgt = np.random.default_rng(2).integers(0, 23, size=(2, 6))

        def loss(m):
            return lm_loss(apply(SMALL, p.tensors, m, toks), tgt)

        m0 = np.array([0.9, 0.3, 0.7, 0.6])
        assert ad.finite_diff_check(loss, {"m": m0}, ["m"]) < 1e-4

    def test_gradients_reach_params_and_mask(self):
        p = noisy_params(SMALL, 5, np.float64)
        w = {k: Tensor(v, requires_grad=True) for k, v in p.tensors.items()}
        m = Tensor(np.array([1.0, 0.5, 0.0, 1.0]), requires_grad=True)
        lm_loss(apply(SMALL, w, m, np.arange(6)), np.arange(1, 7)).backward()
        assert np.all(m.grad != 0)
        assert np.any(w["layers.1.mlp.w1"].grad != 0)
        # a zero gate blocks every gradient into that block
        assert all(np.all(w[f"layers.2.{k}"].grad == 0) for k in ("attn.wq", "mlp.w1", "mlp.w2"))


class TestLoss:
    def test_uniform(self):
        assert float(lm_loss(Tensor(np.zeros((4, 50))), np.arange(4)).data) == pytest.approx(math.log(50), abs=1e-12)

    def test_margin_limit(self):
        losses = []
        for margin in (1.0, 10.0, 100.0):
            logits = np.zeros((3, 7))
            logits[np.arange(3), [1, 2, 3]] = margin
            losses.append(float(lm_loss(Tensor(logits), np.array([1, 2, 3])).data))
        assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-40

    def test_reference(self):
        r = np.random.default_rng(7)
        logits, tgt = r.normal(size=(2, 5, 9)) * 3, r.integers(0, 9, size=(2, 5))
        flat = logits.reshape(-1, 9)
        ref = np.mean([math.log(math.fsum(math.exp(v) for v in row)) - row[t] for row, t in zip(flat, tgt.reshape(-1))])
        assert abs(float(lm_loss(Tensor(logits), tgt).data) - ref) < 1e-10

    def test_empty(self):
        with pytest.raises(ModelError):
            lm_loss(Tensor(np.zeros((0, 3))), np.zeros(0, dtype=int))


class TestRemoveLayers:
    def test_identity(self):
        p = noisy_params(SMALL, 0)
        q = remove_layers(p, np.ones(4))
        assert q.config == p.config
        assert all(np.array_equal(p.tensors[k], q.tensors[k]) for k in p.tensors)

    def test_prune_two_of_eight(self):
        cfg = ModelConfig(d_model=16, n_heads=2, d_ff=32, vocab=31, max_seq=16)
        p = noisy_params(cfg, 1)
        mask = np.array([1, 1, 1, 0, 1, 0, 1, 1.0])
        q = remove_layers(p, mask)
        assert q.config.n_layers == 6 and q.config.protected == (0, 5)
        r = np.random.default_rng(0)
        for _ in range(5):
            x = r.integers(0, 31, size=(3, 12))
            assert np.max(np.abs(forward(p, mask, x).data - forward(q, None, x).data)) <= 1e-6

    def test_keep_only_protected(self):
        cfg = ModelConfig(d_model=16, n_heads=2, d_ff=32, vocab=31, max_seq=16)
        q = remove_layers(init_params(cfg, 0), np.array([1, 0, 0, 0, 0, 0, 0, 1.0]))
        assert q.config.n_layers == 2

    def test_protected_error(self):
        with pytest.raises(ModelError):
            remove_layers(init_params(SMALL, 0), np.array([0, 1, 1, 1.0]))
        with pytest.raises(ModelError):
            remove_layers(init_params(SMALL, 0), np.array([1, 0.5, 1, 1.0]))

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
    def test_equivalence_random(self, dtype, tol):
        r = np.random.default_rng(11)
        for trial in range(20):
            L = int(r.integers(3, 7))
            cfg = ModelConfig(n_layers=L, d_model=8, n_heads=2, d_ff=16, vocab=13, max_seq=10)
            p = noisy_params(cfg, trial, dtype)
            m = random_mask(r, L, cfg.protected)
            x = r.integers(0, 13, size=(2, int(r.integers(1, 10))))
            dev = np.max(np.abs(forward(p, m, x).data - forward(remove_layers(p, m), None, x).data))
            assert dev <= tol

    def test_zero_output_block_is_noop(self):
        p = noisy_params(SMALL, 6, np.float64)
        z = scale_block_output(p, [2], 0.0)
        x = np.arange(8) % 23
        np.testing.assert_array_equal(forward(z, None, x).data, forward(z, [1, 1, 0, 1.0], x).data)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        p = noisy_params(SMALL, 0)
        save_checkpoint(tmp_path / "m.ckpt", p, extra={"note": 1})
        q = load_checkpoint(tmp_path / "m.ckpt")
        assert q.config == p.config
        assert all(p.tensors[k].tobytes() == q.tensors[k].tobytes() and p.tensors[k].dtype == q.tensors[k].dtype for k in p.tensors)
        save_checkpoint(tmp_path / "n.ckpt", q, extra={"note": 1})
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()

    def test_wrong_kind(self, tmp_path):
        checkpoint.save(tmp_path / "x.ckpt", {"kind": "other"}, {})
        with pytest.raises(checkpoint.CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")
