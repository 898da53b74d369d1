"""Per-layer importance from calibration data.

``kl_layer_importance`` ablates one block at a time and measures how far the
output distribution moves (KL of ablated against full, per token, averaged).
``bi_scores`` is the calibration-only block-influence baseline: mean cosine
similarity between a block's input and output residual stream. The two have
opposite polarity: a large KL means important, a large BI means redundant.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ModelParams, apply

SENTINEL = float("inf")


class CalibrationError(ValueError):
    pass


@dataclass
class CalibrationSet:
    samples: list[np.ndarray]

    def __post_init__(self):
        if not self.samples:
            raise CalibrationError("calibration set is empty")
        self.samples = [np.asarray(s, dtype=np.int64) for s in self.samples]
        if any(s.ndim != 1 or s.size == 0 for s in self.samples):
            raise CalibrationError("calibration sequences must be non-empty 1-D token arrays")

    @property
    def count(self) -> int:
        return len(self.samples)

    @classmethod
    def from_stream(cls, stream: np.ndarray, count: int, seq_len: int, seed: int = 0) -> "CalibrationSet":
        """``count`` windows of ``seq_len`` tokens at seeded random offsets."""
        stream = np.asarray(stream)
        if stream.size < seq_len:
            raise CalibrationError(f"stream of {stream.size} tokens is shorter than seq_len={seq_len}")
        starts = np.random.default_rng(seed).integers(0, stream.size - seq_len + 1, size=count)
        return cls([stream[s : s + seq_len].astype(np.int64) for s in starts])


def _log_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _batches(calib: CalibrationSet):
    """Equal-length samples batched together, in a canonical order.

    Sorting makes the reduction order, and so every bit of the result,
    independent of the order the samples were supplied in.
    """
    by_len: dict[int, list[np.ndarray]] = {}
    for s in calib.samples:
        by_len.setdefault(s.size, []).append(s)
    for n in sorted(by_len):
        yield np.stack(sorted(by_len[n], key=lambda a: a.tobytes()))


def token_kl(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """KL(p || q) per row over the last axis, from log-probabilities."""
    return (np.exp(log_p) * (log_p - log_q)).sum(axis=-1)


def kl_layer_importance(params: ModelParams, calib: CalibrationSet, skip_protected: bool = True) -> np.ndarray:
    """Mean token KL(ablated || full) for every layer; protected layers get +inf."""
    cfg = params.config
    L = cfg.n_layers
    totals = np.zeros(L, dtype=np.float64)
    n_tokens = 0
    for tokens in _batches(calib):
        full = _log_probs(apply(cfg, params.tensors, None, tokens).data.astype(np.float64))
        n_tokens += tokens.size
        for l in range(L):
            if skip_protected and l in cfg.protected:
                continue
            mask = [1.0] * L
            mask[l] = 0.0
            ablated = _log_probs(apply(cfg, params.tensors, mask, tokens).data.astype(np.float64))
            totals[l] += token_kl(ablated, full).sum()
    scores = totals / n_tokens
    np.maximum(scores, 0.0, out=scores)  # rounding can leave -1e-17
    if skip_protected:
        scores[list(cfg.protected)] = SENTINEL
    return scores


def cosine_redundancy(x_in: np.ndarray, x_out: np.ndarray) -> tuple[float, int]:
    """Sum of per-token cosine similarity and the number of tokens used.

    Tokens where either vector has zero norm are skipped.
    """
    x_in = x_in.reshape(-1, x_in.shape[-1]).astype(np.float64)
    x_out = x_out.reshape(-1, x_out.shape[-1]).astype(np.float64)
    n_in = np.linalg.norm(x_in, axis=-1)
    n_out = np.linalg.norm(x_out, axis=-1)
    ok = (n_in > 0) & (n_out > 0)
    if not ok.all():
        warnings.warn(f"skipped {int((~ok).sum())} zero-norm activation(s)", RuntimeWarning, stacklevel=2)
    cos = (x_in[ok] * x_out[ok]).sum(axis=-1) / (n_in[ok] * n_out[ok])
    return float(cos.sum()), int(ok.sum())


def bi_scores(params: ModelParams, calib: CalibrationSet) -> np.ndarray:
    """Mean cosine similarity between each block's input and output activations."""
    L = params.config.n_layers
    sums = np.zeros(L)
    counts = np.zeros(L, dtype=np.int64)
    for tokens in _batches(calib):
        _, res = apply(params.config, params.tensors, None, tokens, return_residuals=True)
        for l in range(L):
            s, n = cosine_redundancy(res[l].data, res[l + 1].data)
            sums[l] += s
            counts[l] += n
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def standardize(scores: np.ndarray, protected: Sequence[int] = ()) -> np.ndarray:
    """Zero mean, unit variance over the non-protected entries.

    Protected entries keep the sentinel. A constant vector is only centred.
    """
    s = np.asarray(scores, dtype=np.float64).copy()
    free = np.array([i for i in range(s.size) if i not in set(protected)], dtype=np.int64)
    if free.size:
        v = s[free]
        v = v - v.mean()
        sd = v.std()
        s[free] = v / sd if sd > 0 else v
    s[list(protected)] = SENTINEL
    return s


def write_scores_csv(path, kl: np.ndarray, bi: np.ndarray, protected: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer_index", "kl_importance", "bi_redundancy", "protected_flag"])
        for l in range(len(kl)):
            w.writerow([l, repr(float(kl[l])), repr(float(bi[l])), int(l in set(protected))])


def read_scores_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "kl": np.array([float(r["kl_importance"]) for r in rows]),
        "bi": np.array([float(r["bi_redundancy"]) for r in rows]),
        "protected": np.array([int(r["protected_flag"]) for r in rows], dtype=bool),
    }
