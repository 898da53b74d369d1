import numpy as np
import pytest

from layerprune.config import PipelineConfig
from layerprune.distill import dump_topk_logits
from layerprune.harness import Corpus, SyntheticCorpusSpec, gen_corpus, train_teacher
from layerprune.model import ModelConfig, block_name, init_params, remove_layers
from layerprune.pipeline import (
    STATE_FILE,
    Interrupted,
    PipelineError,
    TrainData,
    Trainer,
    finetune_stage,
    initial_scores,
    lr_at,
    read_csv_rows,
    run,
    search_stage,
)
from layerprune.sampler import schedule_k, topk_indicator

BASE = dict(
    n_layers=6, k=4, d_model=16, n_heads=2, d_ff=32, vocab=31, max_seq=16, seq_len=16, batch_size=4,
    T=40, T_M=12, warmup=5, lr=3e-3, lr_floor=3e-4, eval_every=0, eval_tokens=0, K=5, calib_count=8,
    teacher_steps=80, teacher_warmup=10, teacher_eval_every=0,
)


def make_cfg(**kw):
    d = dict(BASE)
    d.update(kw)
    return PipelineConfig(**d)


@pytest.fixture(scope="module")
def setup():
    cfg = make_cfg()
    corpus = gen_corpus(SyntheticCorpusSpec(vocab=31, length=6000, seed=2))
    teacher = train_teacher(cfg, corpus).params
    cache = dump_topk_logits(teacher, corpus.train, cfg.K, cfg.seq_len)
    return corpus, teacher, cache


def data_for(cfg, setup):
    corpus, _, cache = setup
    return TrainData(corpus.train, corpus.heldout, cache if cfg.objective != "sft" else None)


def run_cfg(cfg, setup, **kw):
    return run(cfg, teacher=setup[1], data=data_for(cfg, setup), **kw)


class TestSchedule:
    def test_lr_example(self):
        cfg = PipelineConfig(T=1200, T_M=120, warmup=60, lr=1e-4, lr_floor=1e-6)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(60, cfg) == pytest.approx(1e-4, abs=1e-18)
        assert lr_at(1200, cfg) == pytest.approx(1e-6, abs=1e-18)

    def test_horizons(self, setup):
        cfg = make_cfg(T=100, T_M=10)
        tr = Trainer(cfg, setup[1], np.zeros(6), data_for(cfg, setup))
        assert tr.k_at(10) == 4 and tr.k_at(0) == 6
        assert tr.tau_at(100) == pytest.approx(0.1)
        tr.cfg = cfg.replace(tau_horizon="search")
        assert tr.tau_at(10) == pytest.approx(0.1)


class TestInitialScores:
    def test_kl_standardised(self, setup):
        s = initial_scores(make_cfg(), setup[1], setup[0].train)
        assert np.isposinf(s[0]) and np.isposinf(s[5])
        assert abs(s[1:5].mean()) < 1e-12 and abs(s[1:5].std() - 1) < 1e-9

    def test_zero_and_bi(self, setup):
        z = initial_scores(make_cfg(init="zero"), setup[1], setup[0].train)
        np.testing.assert_array_equal(z[1:5], 0.0)
        b = initial_scores(make_cfg(init="bi", standardize_scores=False), setup[1], setup[0].train)
        assert np.all(b[1:5] <= 1 + 1e-9) and np.all(b[1:5] >= -1 - 1e-9)


class TestSearch:
    def test_cardinality_every_step(self, setup):
        cfg = make_cfg()
        art = run_cfg(cfg, setup)
        assert len(art.trajectory) == cfg.T_M
        ks = []
        for row in art.trajectory:
            t, kp, mask = row[0], row[2], row[3 + 6 :]
            assert sum(mask) == kp == schedule_k(t, cfg.T_M, 6, cfg.k)
            assert mask[0] == 1 and mask[5] == 1
            ks.append(kp)
        assert all(a >= b for a, b in zip(ks, ks[1:]))

    def test_zero_gate_layers_untouched_on_first_step(self, setup):
        # Adam's first update is zero wherever the gradient is zero
        cfg = make_cfg(init="zero", T_M=20, T=30)
        tr = Trainer(cfg, setup[1], initial_scores(cfg, setup[1], setup[0].train), data_for(cfg, setup))
        before = tr.params.copy()
        # force a pruned layer on the first step by starting past the k' = L plateau
        tr.t = 10
        tr.step()
        mask = tr.trajectory[-1][3 + 6 :]
        assert 0 in mask
        for l, m in enumerate(mask):
            same = all(
                np.array_equal(tr.params.tensors[block_name(l, key)], before.tensors[block_name(l, key)])
                for key in ("attn.wq", "attn.wo", "mlp.w1", "mlp.w2")
            )
            assert same == (m == 0)

    def test_protected_scores_stay_infinite(self, setup):
        art = run_cfg(make_cfg(), setup)
        assert np.isposinf(art.scores[0]) and np.isposinf(art.scores[5])

    def test_frozen_mask_is_topk_of_scores(self, setup):
        cfg = make_cfg()
        s0 = initial_scores(cfg, setup[1], setup[0].train)
        params, scores, mask, _ = search_stage(cfg, setup[1], s0, data_for(cfg, setup))
        np.testing.assert_array_equal(mask, topk_indicator(scores, cfg.k, (0, 5)))
        assert params.config.n_layers == 6
        art = run_cfg(cfg, setup)
        np.testing.assert_array_equal(art.mask, mask)

    def test_search_budget_zero(self, setup):
        cfg = make_cfg(T_M=0, T=5)
        s0 = initial_scores(cfg, setup[1], setup[0].train)
        art = run_cfg(cfg, setup, init_scores=s0)
        np.testing.assert_array_equal(art.mask, topk_indicator(s0, cfg.k, (0, 5)))
        assert art.trajectory == []
        assert art.params.config.n_layers == cfg.k


class TestHandoff:
    def test_finetune_starts_at_search_loss(self, setup):
        cfg = make_cfg()
        tr = Trainer(cfg, setup[1], initial_scores(cfg, setup[1], setup[0].train), data_for(cfg, setup))
        tr.run_until(cfg.T_M + 1)
        gated, pruned = tr.handoff
        assert abs(gated - pruned) <= 1e-6
        assert tr.metrics[cfg.T_M]["loss"] == pruned
        assert tr.metrics[cfg.T_M]["stage"] == "finetune"

    def test_moments_carried_through_removal(self, setup):
        cfg = make_cfg()
        tr = Trainer(cfg, setup[1], initial_scores(cfg, setup[1], setup[0].train), data_for(cfg, setup))
        tr.run_until(cfg.T_M)
        kept = [l for l in range(6) if tr.mask[l] == 1]
        assert tr.params.config.n_layers == cfg.k
        assert set(tr.opt.m) == set(tr.params.tensors)
        assert tr.opt.step_count == cfg.T_M and kept[0] == 0 and kept[-1] == 5


class TestObjectives:
    def test_teacher_as_student_zero_loss(self, setup):
        cfg = make_cfg(k=6, T_M=0, T=1, warmup=0)
        art = run_cfg(cfg, setup, init_scores=np.zeros(6))
        assert art.params.config.n_layers == 6
        assert abs(art.metrics[0]["loss"]) < 1e-5

    def test_no_pruning_when_k_equals_L(self, setup):
        cfg = make_cfg(k=6, T_M=6, T=8)
        art = run_cfg(cfg, setup)
        assert art.mask.tolist() == [1] * 6
        assert art.params.config == setup[1].config
        assert all(row[2] == 6 for row in art.trajectory)

    def test_sft_overfits(self):
        s = np.random.default_rng(0).integers(0, 31, size=161)
        corpus = Corpus(SyntheticCorpusSpec(vocab=31, length=161), s, s)
        cfg = make_cfg(
            n_layers=4, k=3, d_model=32, d_ff=64, objective="sft", T_M=0, T=1200, warmup=20, batch_size=10, lr_floor=1e-3
        )
        mask = np.array([1, 1, 0, 1])
        mcfg = ModelConfig(n_layers=4, d_model=32, n_heads=2, d_ff=64, vocab=31, max_seq=16)
        params = remove_layers(init_params(mcfg, 0), mask)
        _, tr = finetune_stage(cfg, params, mask, TrainData(corpus.train, corpus.heldout))
        losses = np.array([m["loss"] for m in tr.metrics])
        windows = losses.reshape(-1, 100).mean(axis=1)
        reached = np.flatnonzero(windows < 0.1)
        assert reached.size, f"window means {windows}"
        head = windows[: reached[0] + 1]
        assert np.all(np.diff(head) < 0)

    def test_kd_needs_cache(self, setup):
        cfg = make_cfg(objective="kd")
        with pytest.raises(PipelineError, match=r"\[setup\]"):
            run(cfg, teacher=setup[1], data=TrainData(setup[0].train, setup[0].heldout))


class TestErrors:
    def test_misaligned_cache(self, setup, tmp_path):
        corpus, teacher, _ = setup
        short = dump_topk_logits(teacher, corpus.train[:-200], 5, 16)
        cfg = make_cfg(run_dir=str(tmp_path / "r"))
        with pytest.raises(PipelineError, match=r"\[setup\].*cache holds"):
            run(cfg, teacher=teacher, data=TrainData(corpus.train, corpus.heldout, short))
        assert not (tmp_path / "r").exists()

    def test_vocab_mismatch(self, setup):
        corpus, teacher, cache = setup
        with pytest.raises(PipelineError, match="vocab"):
            TrainData(corpus.train, corpus.heldout, cache).check(make_cfg(vocab=40))

    def test_nan_aborts_with_state(self, setup, tmp_path):
        bad = setup[1].copy()
        bad.tensors["lm_head"] = bad.tensors["lm_head"].copy()
        bad.tensors["lm_head"][0, 0] = np.nan
        cfg = make_cfg(run_dir=str(tmp_path))
        with pytest.raises(PipelineError, match=r"\[search\] loss is nan"):
            run(cfg, teacher=bad, data=data_for(cfg, setup), init_scores=np.zeros(6))
        assert (tmp_path / STATE_FILE).exists()

    def test_finetune_shape_check(self, setup):
        cfg = make_cfg()
        with pytest.raises(PipelineError, match=r"\[finetune\]"):
            finetune_stage(cfg, setup[1], np.ones(6), data_for(cfg, setup))

    def test_missing_teacher(self):
        with pytest.raises(PipelineError, match=r"\[setup\]"):
            run(make_cfg())


class TestReproducibility:
    def outputs(self, d):
        return [(d / n).read_bytes() for n in ("metrics.csv", "trajectory.csv", "model.ckpt")]

    def test_two_runs_identical(self, setup, tmp_path):
        a = make_cfg(run_dir=str(tmp_path / "a"), eval_every=10, eval_tokens=2000)
        b = a.replace(run_dir=str(tmp_path / "b"))
        run_cfg(a, setup)
        run_cfg(b, setup)
        assert self.outputs(tmp_path / "a") == self.outputs(tmp_path / "b")
        rows = read_csv_rows(tmp_path / "a" / "metrics.csv")
        assert [r["t"] for r in rows if r["eval_ppl"]] == ["10", "20", "30", "40"]

    def test_seed_changes_run(self, setup, tmp_path):
        run_cfg(make_cfg(run_dir=str(tmp_path / "a")), setup)
        run_cfg(make_cfg(run_dir=str(tmp_path / "b"), seed=1), setup)
        assert self.outputs(tmp_path / "a")[0] != self.outputs(tmp_path / "b")[0]

    @pytest.mark.parametrize("stop", [1, 7, 12, 13, 29])
    def test_resume_identical(self, setup, tmp_path, stop):
        full = make_cfg(run_dir=str(tmp_path / "full"))
        run_cfg(full, setup)
        part = full.replace(run_dir=str(tmp_path / "part"))
        with pytest.raises(Interrupted):
            run_cfg(part, setup, stop_at=stop)
        assert not (tmp_path / "part" / "model.ckpt").exists()
        run_cfg(part, setup, resume=True)
        assert self.outputs(tmp_path / "full") == self.outputs(tmp_path / "part")
