"""Joint mask search, mask freeze, physical pruning and recovery training.

Steps ``1..T_M`` train the model weights and the layer scores together: each
step samples a straight-through mask from the scores, runs the masked forward
and updates both. At ``T_M`` the mask is frozen to the top-k of the scores,
the dropped blocks are removed, and steps ``T_M+1..T`` fine-tune the smaller
model. Every random draw is a function of ``(seed, t)``, so a run resumed from
its state checkpoint replays the remaining steps exactly.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .config import PipelineConfig
from .distill import LogitCache, adaptive_kd_loss, kd_loss
from .harness import Corpus, batch_at, eval_perplexity
from .importance import CalibrationSet, bi_scores, kl_layer_importance, standardize
from .model import BLOCK_KEYS, ModelParams, apply, block_name, lm_loss, remove_layers, save_checkpoint
from .optim import SGD, Adam, clip_by_global_norm
from .optim import lr_at as _lr_at
from .sampler import anneal_tau, gumbel_noise, mix_seed, sample_mask, schedule_k, topk_indicator

log = logging.getLogger(__name__)

METRICS_HEADER = ["t", "stage", "loss", "lr", "tau", "k_prime", "eval_ppl"]
STATE_FILE = "state.ckpt"
HANDOFF_TOL = 1e-6


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class Interrupted(Exception):
    """Raised when ``stop_at`` is reached; the state checkpoint is on disk."""


def lr_at(t: int, cfg: PipelineConfig) -> float:
    return _lr_at(t, cfg.lr, cfg.warmup, cfg.T, cfg.lr_floor)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class TrainData:
    """Training stream, optional teacher cache and held-out stream, aligned by position."""

    train: np.ndarray
    heldout: np.ndarray
    cache: LogitCache | None = None

    @classmethod
    def from_config(cls, cfg: PipelineConfig, corpus: Corpus | None = None, cache: LogitCache | None = None):
        if corpus is None:
            if not cfg.corpus:
                raise PipelineError("setup", "no corpus given")
            corpus = Corpus.load(cfg.corpus)
        if cache is None and cfg.objective != "sft":
            if not cfg.cache:
                raise PipelineError("setup", f"objective {cfg.objective} needs a logit cache")
            cache = LogitCache.load(cfg.cache)
        data = cls(corpus.train, corpus.heldout, cache)
        data.check(cfg)
        return data

    def check(self, cfg: PipelineConfig) -> None:
        if self.cache is None:
            if cfg.objective != "sft":
                raise PipelineError("setup", f"objective {cfg.objective} needs a logit cache")
            return
        n = ((np.asarray(self.train).size - 1) // cfg.seq_len) * cfg.seq_len
        if self.cache.token_count != n:
            raise PipelineError(
                "setup",
                f"cache holds {self.cache.token_count} records but the corpus chunks into {n} positions "
                f"at seq_len={cfg.seq_len}",
            )
        if self.cache.vocab != cfg.vocab:
            raise PipelineError("setup", f"cache vocab {self.cache.vocab} != model vocab {cfg.vocab}")

    def batch(self, cfg: PipelineConfig, t: int):
        idx, inputs, targets = batch_at(self.train, cfg.seq_len, cfg.batch_size, mix_seed(cfg.seed, 2), t)
        rec = None
        if self.cache is not None:
            pos = (idx[:, None] * cfg.seq_len + np.arange(cfg.seq_len)[None, :]).reshape(-1)
            rec = (self.cache.ids[pos], self.cache.probs[pos])
        return inputs, targets, rec


def objective_loss(cfg: PipelineConfig, logits: ad.Tensor, targets, rec) -> ad.Tensor:
    if cfg.objective == "sft":
        return lm_loss(logits, targets)
    flat = ad.reshape(logits, (-1, logits.shape[-1]))
    ids, probs = rec
    if cfg.objective == "kd":
        return kd_loss(flat, ids, probs)
    return adaptive_kd_loss(flat, ids, probs)


def initial_scores(cfg: PipelineConfig, params: ModelParams, train: np.ndarray) -> np.ndarray:
    """Layer scores before search, standardised over prunable layers when configured."""
    protected = params.config.protected
    if cfg.init == "zero":
        raw = np.zeros(params.config.n_layers)
    else:
        calib = CalibrationSet.from_stream(train, cfg.calib_count, cfg.seq_len, seed=mix_seed(cfg.seed, 3))
        if cfg.init == "kl":
            raw = kl_layer_importance(params, calib)
        else:
            # higher similarity means more redundant, so negate to get importance
            raw = -bi_scores(params, calib)
    raw = raw.astype(np.float64)
    raw[list(protected)] = np.inf
    return standardize(raw, protected) if cfg.standardize_scores else raw


def _make_optimizer(cfg: PipelineConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return SGD()


@dataclass
class SearchState:
    t: int
    params: ModelParams
    scores: np.ndarray
    tau: float = 1.0
    k_prime: int = 0
    frozen: bool = False
    mask: np.ndarray | None = None


@dataclass
class RunArtifact:
    params: ModelParams
    mask: np.ndarray
    scores: np.ndarray
    init_scores: np.ndarray
    metrics: list[dict] = field(default_factory=list)
    trajectory: list[list] = field(default_factory=list)
    run_dir: Path | None = None


class Trainer:
    """Holds the mutable state of one pruning run and steps through it."""

    def __init__(self, cfg: PipelineConfig, params: ModelParams, scores: np.ndarray, data: TrainData):
        self.cfg = cfg
        self.data = data
        self.params = params.copy()
        self.L = params.config.n_layers
        self.protected = params.config.protected
        self.init_scores = np.asarray(scores, dtype=np.float64).copy()
        self.scores = self.init_scores.astype(params.dtype)
        self.opt = _make_optimizer(cfg)
        self.score_opt = _make_optimizer(cfg)
        self.t = 0
        self.mask: np.ndarray | None = None
        self.metrics: list[dict] = []
        self.trajectory: list[list] = []
        self.on_step: Callable[["Trainer"], None] | None = None
        self.handoff: tuple[float, float] | None = None

    @property
    def frozen(self) -> bool:
        return self.mask is not None

    # -- horizons -----------------------------------------------------------

    def tau_at(self, t: int) -> float:
        cfg = self.cfg
        horizon = cfg.T if cfg.tau_horizon == "total" else max(cfg.T_M, 1)
        return anneal_tau(min(t, horizon), horizon, cfg.beta)

    def k_at(self, t: int) -> int:
        cfg = self.cfg
        horizon = cfg.T_M if cfg.k_horizon == "search" else cfg.T
        return schedule_k(t, horizon, self.L, cfg.k)

    # -- steps --------------------------------------------------------------

    def _grads_step(self, loss: ad.Tensor, w: dict, lr: float) -> None:
        loss.backward()
        grads = {n: (w[n].grad if w[n].grad is not None else np.zeros_like(w[n].data)) for n in w}
        clip_by_global_norm(grads, self.cfg.grad_clip)
        self.opt.step(self.params.tensors, grads, lr)

    def search_step(self, t: int) -> dict:
        cfg = self.cfg
        tau, kp = self.tau_at(t), self.k_at(t)
        lr = lr_at(t, cfg)
        dtype = self.params.dtype
        noise = gumbel_noise(self.L, mix_seed(cfg.seed, 4, t), dtype=dtype)
        S = ad.Tensor(self.scores.copy(), requires_grad=True)
        hard, _ = sample_mask(S, tau, kp, noise, self.protected)
        inputs, targets, rec = self.data.batch(cfg, t)
        w = {n: ad.Tensor(a, requires_grad=True) for n, a in self.params.tensors.items()}
        loss = objective_loss(cfg, apply(self.params.config, w, hard, inputs), targets, rec)
        if not np.isfinite(loss.data):
            raise PipelineError("search", f"loss is {float(loss.data)} at t={t}")
        self._grads_step(loss, w, lr)
        if S.grad is not None:
            grad_s = np.where(np.isfinite(self.scores), S.grad, 0).astype(dtype)
            scores = {"scores": self.scores}
            self.score_opt.step(scores, {"scores": grad_s}, lr)
            self.scores = scores["scores"]
        used = hard.data.astype(np.int64)
        if int(used.sum()) != kp:
            raise PipelineError("search", f"mask keeps {int(used.sum())} layers, expected {kp}")
        self.trajectory.append([t, tau, kp, *S.data.astype(np.float64).tolist(), *used.tolist()])
        return {"t": t, "stage": "search", "loss": float(loss.data), "lr": lr, "tau": tau, "k_prime": kp}

    def freeze(self) -> None:
        """Fix the mask to the noise-free top-k of the scores and drop the pruned blocks."""
        self.mask = topk_indicator(self.scores, self.cfg.k, self.protected)
        kept = [l for l in range(self.L) if self.mask[l] == 1]
        rename = {n: n for n in self.params.tensors if not n.startswith("layers.")}
        for new, old in enumerate(kept):
            for key in BLOCK_KEYS:
                rename[block_name(old, key)] = block_name(new, key)
        inputs, targets, rec = self.data.batch(self.cfg, self.t + 1)
        gated_logits = apply(self.params.config, self.params.tensors, self.mask.tolist(), inputs)
        gated = objective_loss(self.cfg, gated_logits, targets, rec)
        self.params = remove_layers(self.params, self.mask)
        self.opt.rename(rename)
        pruned = objective_loss(self.cfg, apply(self.params.config, self.params.tensors, None, inputs), targets, rec)
        # the pruned model must pick up exactly where the gated one left off
        self.handoff = (float(gated.data), float(pruned.data))
        if abs(self.handoff[0] - self.handoff[1]) > HANDOFF_TOL:
            raise PipelineError("freeze", f"hand-off loss moved from {self.handoff[0]} to {self.handoff[1]}")

    def finetune_step(self, t: int) -> dict:
        cfg = self.cfg
        lr = lr_at(t, cfg)
        inputs, targets, rec = self.data.batch(cfg, t)
        w = {n: ad.Tensor(a, requires_grad=True) for n, a in self.params.tensors.items()}
        loss = objective_loss(cfg, apply(self.params.config, w, None, inputs), targets, rec)
        if not np.isfinite(loss.data):
            raise PipelineError("finetune", f"loss is {float(loss.data)} at t={t}")
        self._grads_step(loss, w, lr)
        return {"t": t, "stage": "finetune", "loss": float(loss.data), "lr": lr, "tau": None, "k_prime": cfg.k}

    def eval_ppl(self) -> float:
        cfg = self.cfg
        mask = None
        if not self.frozen:
            mask = topk_indicator(self.scores, self.k_at(self.t), self.protected).tolist()
        return eval_perplexity(self.params, self.data.heldout, cfg.seq_len, mask=mask, max_tokens=cfg.eval_tokens)

    def step(self) -> dict:
        cfg = self.cfg
        t = self.t + 1
        if t <= cfg.T_M:
            row = self.search_step(t)
        else:
            if not self.frozen:
                self.freeze()
            row = self.finetune_step(t)
        self.t = t
        if t == cfg.T_M and not self.frozen:
            self.freeze()
        row["eval_ppl"] = self.eval_ppl() if cfg.eval_every and (t % cfg.eval_every == 0 or t == cfg.T) else None
        self.metrics.append(row)
        return row

    def run_until(self, stop: int, run_dir: Path | None = None, stop_at: int | None = None) -> None:
        if self.t == 0 and self.cfg.T_M == 0 and not self.frozen:
            self.freeze()
        while self.t < stop:
            try:
                self.step()
            except PipelineError:
                # keep the last good state so the failure can be inspected or resumed
                if run_dir is not None:
                    self.save_state(run_dir / STATE_FILE)
                    self.write_logs(run_dir)
                raise
            if self.on_step:
                self.on_step(self)
            if run_dir is not None:
                ck = self.cfg.ckpt_every
                if (ck and self.t % ck == 0) or self.t == stop or self.t == stop_at:
                    self.save_state(run_dir / STATE_FILE)
                    self.write_logs(run_dir)
            if stop_at is not None and self.t >= stop_at:
                raise Interrupted(f"stopped at t={self.t}")

    # -- persistence ----------------------------------------------------------

    def save_state(self, path: Path) -> None:
        opt_meta, opt_tensors = self.opt.state()
        sopt_meta, sopt_tensors = self.score_opt.state()
        tensors = {f"p.{k}": v for k, v in self.params.tensors.items()}
        tensors.update({f"o.{k}": v for k, v in opt_tensors.items()})
        tensors.update({f"so.{k}": v for k, v in sopt_tensors.items()})
        tensors["scores"] = self.scores
        tensors["init_scores"] = self.init_scores
        if self.mask is not None:
            tensors["mask"] = self.mask
        meta = {
            "kind": "train_state",
            "t": self.t,
            "model_config": self.params.config.to_dict(),
            "opt": opt_meta,
            "score_opt": sopt_meta,
            "config": self.cfg.to_dict(),
        }
        checkpoint.save(path, meta, tensors)

    @classmethod
    def from_state(cls, path: Path, cfg: PipelineConfig, data: TrainData) -> "Trainer":
        from .model import ModelConfig

        meta, tensors = checkpoint.load(path)
        if meta.get("kind") != "train_state":
            raise PipelineError("resume", f"{path} is not a training state")
        params = ModelParams(
            ModelConfig.from_dict(meta["model_config"]),
            {k[2:]: v for k, v in tensors.items() if k.startswith("p.")},
        )
        self = cls.__new__(cls)
        self.cfg = cfg
        self.data = data
        self.params = params
        self.init_scores = tensors["init_scores"]
        self.scores = tensors["scores"]
        self.L = self.scores.shape[0]
        self.protected = tuple(cfg.protected_layers)
        self.opt = _make_optimizer(cfg)
        self.opt.load_state(meta["opt"], {k[2:]: v for k, v in tensors.items() if k.startswith("o.")})
        self.score_opt = _make_optimizer(cfg)
        self.score_opt.load_state(meta["score_opt"], {k[3:]: v for k, v in tensors.items() if k.startswith("so.")})
        self.t = int(meta["t"])
        self.mask = tensors.get("mask")
        self.metrics = []
        self.trajectory = []
        self.on_step = None
        self.handoff = None
        return self

    def write_logs(self, run_dir: Path) -> None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics.csv").write_text(metrics_csv(self.metrics))
        (run_dir / "trajectory.csv").write_text(trajectory_csv(self.trajectory, self.L))


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([_fmt(r.get(h)) for h in METRICS_HEADER])
    return buf.getvalue()


def trajectory_csv(rows: list[list], L: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "tau", "k_prime", *[f"s_{l}" for l in range(L)], *[f"m_{l}" for l in range(L)]])
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def search_stage(cfg: PipelineConfig, params: ModelParams, init_scores, data: TrainData):
    """Steps ``1..T_M`` of joint search; returns ``(params', scores', hard_mask, trainer)``.

    ``params'`` still has all ``L`` blocks; the mask is the frozen top-k.
    """
    tr = Trainer(cfg, params, init_scores, data)
    while tr.t < cfg.T_M:
        tr.t += 1
        row = tr.search_step(tr.t)
        row["eval_ppl"] = None
        tr.metrics.append(row)
    mask = topk_indicator(tr.scores, cfg.k, tr.protected)
    return tr.params, tr.scores, mask, tr


def finetune_stage(cfg: PipelineConfig, params: ModelParams, mask, data: TrainData):
    """Steps ``T_M+1..T`` on the physically pruned model; returns ``(params', trainer)``.

    ``params`` is the model after ``remove_layers``; ``mask`` must keep ``cfg.k`` layers.
    """
    mask = np.asarray(mask)
    if int(mask.sum()) != cfg.k or params.config.n_layers != cfg.k:
        raise PipelineError("finetune", f"expected a {cfg.k}-layer model and mask, got {params.config.n_layers}")
    data.check(cfg)
    tr = Trainer(cfg, params, np.zeros(params.config.n_layers), data)
    tr.mask = mask
    tr.t = cfg.T_M
    while tr.t < cfg.T:
        tr.t += 1
        row = tr.finetune_step(tr.t)
        row["eval_ppl"] = tr.eval_ppl() if cfg.eval_every and (tr.t % cfg.eval_every == 0 or tr.t == cfg.T) else None
        tr.metrics.append(row)
    return tr.params, tr


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (PipelineError, Interrupted):
        raise
    except Exception as exc:  # re-tag with the stage that failed
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc


def run(
    cfg: PipelineConfig,
    teacher: ModelParams | None = None,
    data: TrainData | None = None,
    init_scores: np.ndarray | None = None,
    resume: bool = False,
    stop_at: int | None = None,
) -> RunArtifact:
    """Importance -> search -> freeze/remove -> fine-tune, writing artefacts to ``cfg.run_dir``."""
    from .model import load_checkpoint

    run_dir = Path(cfg.run_dir) if cfg.run_dir else None
    if teacher is None:
        if not cfg.teacher:
            raise PipelineError("setup", "no teacher checkpoint given")
        teacher = _stage("setup", load_checkpoint, cfg.teacher)
    if data is None:
        data = _stage("setup", TrainData.from_config, cfg)
    else:
        _stage("setup", data.check, cfg)

    state_path = run_dir / STATE_FILE if run_dir else None
    if resume and state_path is not None and state_path.exists():
        tr = _stage("resume", Trainer.from_state, state_path, cfg, data)
        tr.metrics = [
            _parse_metric(r) for r in read_csv_rows(run_dir / "metrics.csv") if int(r["t"]) <= tr.t
        ]
        tr.trajectory = [
            _parse_traj(r, tr.L) for r in read_csv_rows(run_dir / "trajectory.csv") if int(r["t"]) <= tr.t
        ]
    else:
        if init_scores is None:
            init_scores = _stage("importance", initial_scores, cfg, teacher, data.train)
        tr = Trainer(cfg, teacher, init_scores, data)
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)

    stage = "search" if tr.t < cfg.T_M else "finetune"
    try:
        tr.run_until(cfg.T, run_dir, stop_at)
    except (PipelineError, Interrupted):
        raise
    except Exception as exc:
        raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc

    if run_dir is not None:
        save_checkpoint(run_dir / "model.ckpt", tr.params, extra={"mask": tr.mask.astype(int).tolist()})
        tr.write_logs(run_dir)
    return RunArtifact(tr.params, tr.mask, tr.scores, tr.init_scores, tr.metrics, tr.trajectory, run_dir)


def _parse_metric(r: dict) -> dict:
    def num(x, cast=float):
        return cast(x) if x != "" else None

    return {
        "t": int(r["t"]),
        "stage": r["stage"],
        "loss": float(r["loss"]),
        "lr": float(r["lr"]),
        "tau": num(r["tau"]),
        "k_prime": num(r["k_prime"], int),
        "eval_ppl": num(r["eval_ppl"]),
    }


def _parse_traj(r: dict, L: int) -> list:
    return [
        int(r["t"]),
        float(r["tau"]),
        int(r["k_prime"]),
        *[float(r[f"s_{l}"]) for l in range(L)],
        *[int(r[f"m_{l}"]) for l in range(L)],
    ]
