"""Synthetic corpora, teacher training, exhaustive mask oracle and evaluation."""

from __future__ import annotations

import bisect
import itertools
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .distill import chunk_stream
from .model import ModelConfig, ModelParams, apply, init_params, lm_loss
from .optim import Adam, clip_by_global_norm, lr_at
from .sampler import mix_seed

log = logging.getLogger(__name__)

KINDS = ("markov-chain", "copy-task", "arithmetic-mod-p")
HELDOUT_FRACTION = 0.05
ORACLE_LIMIT = 10_000


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    kind: str = "markov-chain"
    vocab: int = 256
    length: int = 1_000_000
    seed: int = 0
    branching: int = 4
    copy_min: int = 4
    copy_max: int = 16
    modulus: int = 97

    def __post_init__(self):
        if self.kind not in KINDS:
            raise HarnessError(f"unknown corpus kind {self.kind!r}; expected one of {KINDS}")
        if self.length < 2:
            raise HarnessError("corpus length must be >= 2")
        if self.kind == "arithmetic-mod-p" and self.vocab < self.modulus + 3:
            raise HarnessError(f"arithmetic-mod-p needs vocab >= modulus + 3 = {self.modulus + 3}")
        if self.kind == "copy-task" and self.vocab < 4:
            raise HarnessError("copy-task needs vocab >= 4")


@dataclass
class Corpus:
    spec: SyntheticCorpusSpec
    train: np.ndarray
    heldout: np.ndarray

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "train.npy", self.train)
        np.save(d / "heldout.npy", self.heldout)
        (d / "corpus.json").write_text(json.dumps(asdict(self.spec), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "Corpus":
        d = Path(directory)
        if not (d / "train.npy").exists():
            raise HarnessError(f"{d} holds no corpus (missing train.npy)")
        spec = SyntheticCorpusSpec(**json.loads((d / "corpus.json").read_text()))
        return cls(spec, np.load(d / "train.npy"), np.load(d / "heldout.npy"))


def markov_matrix(vocab: int, branching: int, seed: int) -> np.ndarray:
    """Sparse row-stochastic transition matrix; every row includes its ring successor."""
    rng = np.random.default_rng(mix_seed(seed, 101))
    P = np.zeros((vocab, vocab))
    b = min(branching, vocab)
    for i in range(vocab):
        succ = {(i + 1) % vocab}
        others = rng.permutation(vocab)
        for j in others:
            if len(succ) >= b:
                break
            succ.add(int(j))
        succ = sorted(succ)
        P[i, succ] = rng.dirichlet(np.ones(len(succ)))
    return P


def _markov_stream(spec: SyntheticCorpusSpec) -> np.ndarray:
    P = markov_matrix(spec.vocab, spec.branching, spec.seed)
    rng = np.random.default_rng(mix_seed(spec.seed, 102))
    rows = []
    for i in range(spec.vocab):
        nz = np.flatnonzero(P[i])
        cdf = np.cumsum(P[i, nz])
        cdf[-1] = 1.0
        rows.append((nz.tolist(), cdf.tolist()))
    u = rng.random(spec.length).tolist()
    out = [0] * spec.length
    state = int(rng.integers(spec.vocab))
    for n in range(spec.length):
        out[n] = state
        succ, cdf = rows[state]
        state = succ[bisect.bisect_right(cdf, u[n]) if u[n] < 1.0 else len(succ) - 1]
    return np.asarray(out, dtype=np.uint16)


def _copy_stream(spec: SyntheticCorpusSpec) -> np.ndarray:
    # 0 separates source from copy, 1 ends the example; payload uses 2..V-1
    rng = np.random.default_rng(mix_seed(spec.seed, 103))
    out: list[int] = []
    while len(out) < spec.length:
        n = int(rng.integers(spec.copy_min, spec.copy_max + 1))
        payload = rng.integers(2, spec.vocab, size=n).tolist()
        out.extend(payload + [0] + payload + [1])
    return np.asarray(out[: spec.length], dtype=np.uint16)


def _arith_stream(spec: SyntheticCorpusSpec) -> np.ndarray:
    p = spec.modulus
    plus, eq, end = p, p + 1, p + 2
    rng = np.random.default_rng(mix_seed(spec.seed, 104))
    n = spec.length // 6 + 1
    a = rng.integers(0, p, size=n)
    b = rng.integers(0, p, size=n)
    rows = np.stack([a, np.full(n, plus), b, np.full(n, eq), (a + b) % p, np.full(n, end)], axis=1)
    return rows.reshape(-1)[: spec.length].astype(np.uint16)


def gen_corpus(spec: SyntheticCorpusSpec) -> Corpus:
    """Deterministic stream for ``spec``; the last 5% is held out."""
    stream = {
        "markov-chain": _markov_stream,
        "copy-task": _copy_stream,
        "arithmetic-mod-p": _arith_stream,
    }[spec.kind](spec)
    cut = int(round(stream.size * (1 - HELDOUT_FRACTION)))
    return Corpus(spec, stream[:cut], stream[cut:])


def batch_at(stream: np.ndarray, seq_len: int, batch_size: int, seed: int, t: int):
    """Chunk indices, inputs [B, T] and next-token targets for step ``t``."""
    chunks = chunk_stream(stream, seq_len)
    rng = np.random.default_rng(mix_seed(seed, 1, t))
    idx = np.sort(rng.integers(0, chunks.shape[0], size=batch_size))
    inputs = chunks[idx]
    pos = idx[:, None] * seq_len + np.arange(seq_len)[None, :]
    targets = np.asarray(stream, dtype=np.int64)[pos + 1]
    return idx, inputs, targets


def eval_batches(stream: np.ndarray, seq_len: int, max_tokens: int | None = None, batch: int = 32):
    chunks = chunk_stream(stream, seq_len)
    if max_tokens:
        chunks = chunks[: max(1, max_tokens // seq_len)]
    s = np.asarray(stream, dtype=np.int64)
    for lo in range(0, chunks.shape[0], batch):
        idx = np.arange(lo, min(lo + batch, chunks.shape[0]))
        pos = idx[:, None] * seq_len + np.arange(seq_len)[None, :]
        yield chunks[idx], s[pos + 1]


def mean_loss(params: ModelParams, stream: np.ndarray, seq_len: int, mask=None, max_tokens: int | None = None) -> float:
    total = 0.0
    n = 0
    for inputs, targets in eval_batches(stream, seq_len, max_tokens):
        logits = apply(params.config, params.tensors, mask, inputs)
        total += float(lm_loss(logits, targets).data) * targets.size
        n += targets.size
    if n == 0:
        raise HarnessError("empty evaluation stream")
    return total / n


def eval_perplexity(params: ModelParams, stream: np.ndarray, seq_len: int = 64, mask=None, max_tokens: int | None = None) -> float:
    """exp(mean next-token cross-entropy) over ``stream``."""
    if np.asarray(stream).size < 2:
        raise HarnessError("evaluation stream must hold at least 2 tokens")
    seq_len = min(seq_len, np.asarray(stream).size - 1)
    return math.exp(mean_loss(params, stream, seq_len, mask, max_tokens))


@dataclass
class OracleResult:
    best_mask: np.ndarray
    best_loss: float
    ranked: list[tuple[tuple[int, ...], float]] = field(default_factory=list)

    def rank_of(self, mask) -> int:
        key = tuple(int(x) for x in np.asarray(mask))
        for i, (m, _) in enumerate(self.ranked):
            if m == key:
                return i
        raise KeyError(f"mask {key} was not enumerated")


def admissible_masks(L: int, k: int, protected: Sequence[int]):
    protected = sorted(set(protected))
    free = [l for l in range(L) if l not in protected]
    need = k - len(protected)
    if need < 0 or need > len(free):
        raise HarnessError(f"no mask keeps {k} of {L} layers with protected {protected}")
    for keep in itertools.combinations(free, need):
        m = [0] * L
        for l in protected + list(keep):
            m[l] = 1
        yield tuple(m)


def oracle_batch(stream: np.ndarray, n: int, seq_len: int, seed: int):
    """Fixed evaluation batch for the oracle: ``n`` seeded chunks and their targets."""
    _, inputs, targets = batch_at(stream, seq_len, n, mix_seed(seed, 7), 0)
    return inputs, targets


def oracle_best_mask(params: ModelParams, inputs, targets, k: int, protected: Sequence[int] | None = None) -> OracleResult:
    """Mean LM loss of every admissible k-layer mask; exact minimiser.

    Ties are broken towards the lexicographically smallest mask.
    """
    cfg = params.config
    protected = cfg.protected if protected is None else tuple(protected)
    n_free = cfg.n_layers - len(set(protected))
    count = math.comb(n_free, k - len(set(protected))) if k >= len(set(protected)) else 0
    if count > ORACLE_LIMIT:
        raise HarnessError(f"{count} candidate masks exceed the oracle limit of {ORACLE_LIMIT}; shrink L")
    results = []
    for m in admissible_masks(cfg.n_layers, k, protected):
        logits = apply(cfg, params.tensors, [float(x) for x in m], inputs)
        results.append((m, float(lm_loss(logits, targets).data)))
    results.sort(key=lambda r: (r[1], r[0]))
    best, loss = results[0]
    return OracleResult(np.array(best, dtype=np.float64), loss, results)


@dataclass
class TeacherResult:
    params: ModelParams
    history: list[dict]
    heldout_ppl: float
    untrained_ppl: float
    reached_target: bool


def train_teacher(cfg, corpus: Corpus, dtype=np.float32, steps: int | None = None) -> TeacherResult:
    """Dense LM training with Adam and warmup-cosine LR; returns the best held-out checkpoint.

    ``cfg`` is a :class:`~layerprune.config.PipelineConfig`.
    """
    mcfg: ModelConfig = cfg.model_config()
    params = init_params(mcfg, seed=mix_seed(cfg.seed, 11), dtype=dtype)
    steps = cfg.teacher_steps if steps is None else steps
    opt = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    seq_len = cfg.seq_len

    def heldout():
        return eval_perplexity(params, corpus.heldout, seq_len, max_tokens=cfg.eval_tokens)

    untrained = heldout()
    best_ppl, best = untrained, params.copy()
    history = []
    for t in range(1, steps + 1):
        _, inputs, targets = batch_at(corpus.train, seq_len, cfg.batch_size, mix_seed(cfg.seed, 12), t)
        w = {n: ad.Tensor(a, requires_grad=True) for n, a in params.tensors.items()}
        loss = lm_loss(apply(mcfg, w, None, inputs), targets)
        loss.backward()
        grads = {n: w[n].grad for n in w}
        clip_by_global_norm(grads, cfg.grad_clip)
        lr = lr_at(t, cfg.teacher_lr, cfg.teacher_warmup, steps, cfg.teacher_lr_floor)
        opt.step(params.tensors, grads, lr)
        row = {"t": t, "loss": float(loss.data), "lr": lr}
        if (cfg.teacher_eval_every and t % cfg.teacher_eval_every == 0) or t == steps:
            ppl = heldout()
            row["heldout_ppl"] = ppl
            if ppl < best_ppl:
                best_ppl, best = ppl, params.copy()
            log.info("teacher step %d loss %.4f heldout ppl %.3f", t, row["loss"], ppl)
        history.append(row)
    reached = cfg.teacher_target_ppl <= 0 or best_ppl <= cfg.teacher_target_ppl
    if not reached:
        warnings.warn(
            f"teacher held-out ppl {best_ppl:.3f} missed target {cfg.teacher_target_ppl}; keeping best checkpoint",
            RuntimeWarning,
            stacklevel=2,
        )
    return TeacherResult(best, history, best_ppl, untrained, reached)


def plant_redundancy(params: ModelParams, layers: Sequence[int], scale: float = 1e-3) -> ModelParams:
    """Scale the residual-writing projections of ``layers`` so they become near no-ops."""
    from .model import scale_block_output

    return scale_block_output(params, layers, scale)
