"""Offline top-K teacher cache and the distillation losses built on it.

Cache file (little-endian)::

    b"E3LC" | version u32 = 1 | K u32 | vocab u32 | token_count u64
    token_count x ([K x u32 ids] [K x f32 probs])

Stored probabilities come from the teacher's full softmax and are not
renormalised, so the per-token loss is a truncated KL over the top-K support.
The entropy weight, in contrast, renormalises over that support.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelParams, apply

MAGIC = b"E3LC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
# floor on gathered student probabilities
Q_FLOOR = 1e-30
_LOG_Q_FLOOR = math.log(Q_FLOOR)


class CacheError(ValueError):
    pass


@dataclass
class LogitCache:
    """Top-K teacher distribution for every position of a token stream."""

    K: int
    vocab: int
    ids: np.ndarray  # [N, K] uint32, descending teacher probability
    probs: np.ndarray  # [N, K] float32

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint32)
        self.probs = np.ascontiguousarray(self.probs, dtype=np.float32)
        if self.ids.shape != self.probs.shape or self.ids.ndim != 2 or self.ids.shape[1] != self.K:
            raise CacheError(f"ids {self.ids.shape} / probs {self.probs.shape} do not match K={self.K}")

    @property
    def token_count(self) -> int:
        return self.ids.shape[0]

    def __len__(self):
        return self.token_count

    def record(self, position: int) -> tuple[np.ndarray, np.ndarray]:
        return self.ids[position], self.probs[position]

    def validate(self) -> None:
        if self.token_count and int(self.ids.max()) >= self.vocab:
            raise CacheError("token id out of range")
        if np.any(self.probs < 0) or np.any(np.diff(self.probs, axis=1) > 0):
            raise CacheError("probabilities must be non-negative and non-increasing")
        if np.any(self.probs.astype(np.float64).sum(axis=1) > 1 + 1e-6):
            raise CacheError("probabilities sum to more than 1")
        sorted_ids = np.sort(self.ids, axis=1)
        if np.any(sorted_ids[:, 1:] == sorted_ids[:, :-1]):
            raise CacheError("duplicate ids within a record")

    def to_bytes(self) -> bytes:
        rec = np.empty((self.token_count, 2 * self.K), dtype="<u4")
        rec[:, : self.K] = self.ids
        rec[:, self.K :] = self.probs.astype("<f4").view("<u4")
        return _HEADER.pack(MAGIC, VERSION, self.K, self.vocab, self.token_count) + rec.tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "LogitCache":
        if len(raw) < _HEADER.size:
            raise CacheError("truncated header")
        magic, version, K, vocab, n = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise CacheError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CacheError(f"unsupported cache version {version}")
        expected = _HEADER.size + n * K * 8
        if len(raw) != expected:
            raise CacheError(f"cache holds {len(raw)} bytes, header implies {expected}")
        rec = np.frombuffer(raw, dtype="<u4", offset=_HEADER.size).reshape(n, 2 * K)
        return cls(K, vocab, rec[:, :K].astype(np.uint32), rec[:, K:].copy().view("<f4").astype(np.float32))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "LogitCache":
        return cls.from_bytes(Path(path).read_bytes())


def topk_records(logits: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-K ids and full-softmax probabilities per row, ties to the lowest id."""
    logits = np.asarray(logits, dtype=np.float64)
    V = logits.shape[-1]
    if K > V:
        raise CacheError(f"K={K} exceeds vocab {V}")
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    flat = p.reshape(-1, V)
    order = np.argsort(-flat, axis=-1, kind="stable")[:, :K]
    probs = np.take_along_axis(flat, order, axis=-1)
    shape = logits.shape[:-1] + (K,)
    return order.astype(np.uint32).reshape(shape), probs.astype(np.float32).reshape(shape)


def chunk_stream(stream: np.ndarray, seq_len: int) -> np.ndarray:
    """Disjoint ``seq_len`` chunks; the last token is held back as a target."""
    stream = np.asarray(stream, dtype=np.int64)
    n = (stream.size - 1) // seq_len
    if n < 1:
        raise CacheError(f"stream of {stream.size} tokens holds no chunk of {seq_len}")
    return stream[: n * seq_len].reshape(n, seq_len)


def dump_topk_logits(teacher: ModelParams, stream: np.ndarray, K: int, seq_len: int, batch: int = 16) -> LogitCache:
    """Teacher top-K distribution at every position of the chunked stream.

    Record ``i`` is the teacher's prediction for token ``i + 1`` given the
    chunk prefix ending at ``i``.
    """
    cfg = teacher.config
    if K < 1:
        raise CacheError("K must be >= 1")
    if K > cfg.vocab:
        raise CacheError(f"K={K} exceeds vocab {cfg.vocab}")
    chunks = chunk_stream(stream, seq_len)
    ids = np.empty((chunks.size, K), dtype=np.uint32)
    probs = np.empty((chunks.size, K), dtype=np.float32)
    for start in range(0, chunks.shape[0], batch):
        part = chunks[start : start + batch]
        logits = apply(cfg, teacher.tensors, None, part).data
        i, p = topk_records(logits.reshape(-1, cfg.vocab), K)
        lo = start * seq_len
        ids[lo : lo + i.shape[0]] = i
        probs[lo : lo + p.shape[0]] = p
    return LogitCache(K, cfg.vocab, ids, probs)


class UnderflowCounter:
    """Counts gathered student probabilities that had to be floored."""

    def __init__(self):
        self.count = 0


underflow = UnderflowCounter()


def kl_topk_loss(student_logits, ids, probs) -> Tensor:
    """Truncated KL per token: sum over the stored ids of p * log(p / q).

    ``student_logits`` is [..., V]; ``ids``/``probs`` are [..., K]. Returns a
    Tensor of shape [...] (a scalar for a single record). ``q`` is the
    student's full-vocabulary softmax gathered at ``ids``.
    """
    logits = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    ids = np.asarray(ids).astype(np.int64)
    p = np.asarray(probs, dtype=np.float64)
    if ids.shape != p.shape or ids.shape[:-1] != logits.shape[:-1]:
        raise CacheError(f"records {ids.shape} do not align with student logits {logits.shape}")
    log_q = ad.gather(ad.log_softmax(logits), ids)
    low = log_q.data < _LOG_Q_FLOOR
    if low.any():
        underflow.count += int(low.sum())
        log_q = ad.clip(log_q, lo=_LOG_Q_FLOOR)
    with np.errstate(divide="ignore"):
        log_p = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
    p_c = p.astype(logits.dtype)
    # p * (log p - log q), with 0 log 0 = 0
    const = (p * log_p).sum(axis=-1).astype(logits.dtype)
    cross = ad.sum(ad.mul(log_q, p_c), axis=-1)
    return ad.sub(const, cross) if const.ndim else ad.sub(float(const), cross)


def entropy_weight(probs) -> np.ndarray:
    """Entropy (nats) of the stored top-K probabilities renormalised over K."""
    p = np.asarray(probs, dtype=np.float64)
    total = p.sum(axis=-1, keepdims=True)
    ph = np.divide(p, total, out=np.zeros_like(p), where=total > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(ph > 0, ph * np.log(np.where(ph > 0, ph, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def kd_loss(student_logits, ids, probs) -> Tensor:
    """Mean truncated KL over all tokens (plain offline KD)."""
    per_token = kl_topk_loss(student_logits, ids, probs)
    n = per_token.data.size
    if n == 0:
        raise CacheError("no tokens")
    return ad.mul(ad.sum(per_token), 1.0 / n)


def adaptive_kd_loss(student_logits, ids, probs, weights=None) -> Tensor:
    """Mean of entropy-weighted truncated KL over all tokens.

    ``weights`` overrides the entropy weights (same shape as the token axes).
    """
    per_token = kl_topk_loss(student_logits, ids, probs)
    n = per_token.data.size
    if n == 0:
        raise CacheError("no tokens")
    w = entropy_weight(probs) if weights is None else np.asarray(weights, dtype=np.float64)
    w = np.broadcast_to(w, per_token.shape).astype(per_token.dtype)
    return ad.mul(ad.sum(ad.mul(per_token, w)), 1.0 / n)
