"""Gumbel-TopK relaxation of layer selection, plus its schedules.

The soft mask is accumulated over ``k`` tempered softmaxes; after each one the
selected mass is suppressed by adding ``log(1 - p)`` to the running scores::

    m <- m + softmax(s / tau)
    s <- s + log(1 - softmax(s / tau))

starting from ``s = scores + gumbel_noise`` and ``m = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# cap on a selected element's probability before log(1 - p)
P_MAX = 1.0 - 1e-12
_U_EPS = 1e-12


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    T_M: int = 100
    beta: float = 0.9
    k: int = 6
    L: int = 8
    seed: int = 0
    protected: tuple[int, ...] = (0, 7)

    def __post_init__(self):
        if not 0 <= self.T_M <= self.T or self.T <= 0:
            raise SamplerError(f"need 0 <= T_M <= T and T > 0, got T_M={self.T_M}, T={self.T}")
        if not 0 < self.beta < 1:
            raise SamplerError(f"beta must be in (0, 1), got {self.beta}")
        if not len(self.protected) <= self.k <= self.L:
            raise SamplerError(f"need |protected| <= k <= L, got k={self.k}")


def mix_seed(seed: int, *keys: int) -> int:
    """Deterministic 63-bit child seed for ``(seed, *keys)``."""
    ss = np.random.SeedSequence([int(seed), *map(int, keys)])
    return int(ss.generate_state(2, np.uint64)[0] >> np.uint64(1))


def gumbel_noise(L: int, seed: int, dtype=np.float64) -> np.ndarray:
    """``-log(-log(u))`` for ``L`` uniforms from a generator seeded with ``seed``."""
    if L < 1:
        raise SamplerError("L must be >= 1")
    u = np.random.default_rng(seed).random(L)
    u = np.clip(u, _U_EPS, 1.0 - _U_EPS)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_topk(scores, tau: float, k: int, noise=None) -> Tensor:
    """Soft k-hot mask from ``scores`` (array or Tensor); sums to ``k``.

    The running scores are centred on their maximum before the noise goes in.
    That is a constant shift, so the result is unchanged mathematically, and it
    makes exactly representable shifts of ``scores`` produce identical bits.
    """
    if tau <= 0:
        raise SamplerError(f"tau must be positive, got {tau}")
    s = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))
    if s.ndim != 1:
        raise SamplerError(f"scores must be a vector, got shape {s.shape}")
    L = s.shape[0]
    if not 1 <= k <= L:
        raise SamplerError(f"k must be in [1, {L}], got {k}")
    if noise is None:
        noise = np.zeros(L, s.dtype)
    noise = np.asarray(noise, dtype=s.dtype)
    if noise.shape != (L,):
        raise SamplerError(f"noise has shape {noise.shape}, expected ({L},)")

    s = ad.add(ad.sub(s, s.data.max()), noise)
    inv_tau = 1.0 / tau
    m = None
    for _ in range(k):
        p = ad.softmax(ad.mul(s, inv_tau))
        m = p if m is None else ad.add(m, p)
        s = ad.add(s, ad.log(ad.sub(1.0, ad.clip(p, hi=P_MAX))))
    return m


def topk_indicator(values, k: int, protected: Iterable[int] = ()) -> np.ndarray:
    """Binary top-k of ``values`` with ``protected`` forced on and counted in ``k``.

    Ties go to the lowest index.
    """
    v = np.asarray(values, dtype=np.float64)
    protected = sorted(set(protected))
    if k < len(protected):
        raise SamplerError(f"k={k} is smaller than the {len(protected)} protected layers")
    if k > v.shape[0]:
        raise SamplerError(f"k={k} exceeds length {v.shape[0]}")
    out = np.zeros(v.shape[0], dtype=np.float64)
    out[protected] = 1.0
    free = np.array([i for i in range(v.shape[0]) if i not in protected], dtype=np.int64)
    need = k - len(protected)
    if need:
        # stable sort on -v: equal values keep index order
        order = free[np.argsort(-v[free], kind="stable")]
        out[order[:need]] = 1.0
    return out


def ste_discretize(m_soft, k: int, protected: Iterable[int] = ()) -> Tensor:
    """Hard top-k of the soft mask in the forward pass, identity backward."""
    soft = m_soft if isinstance(m_soft, Tensor) else Tensor(np.asarray(m_soft, dtype=np.float64))
    return ad.ste(soft, topk_indicator(soft.data, k, protected))


def anneal_tau(t: int, T: int, beta: float) -> float:
    if not 0 <= t <= T:
        raise SamplerError(f"t={t} outside [0, {T}]")
    return 1.0 - beta * (t / T)


def schedule_k(t: int, horizon: int, L: int, k: int) -> int:
    """Retained layers at step ``t``: ``L - ceil((L - k) * t / horizon)``."""
    if horizon <= 0:
        return k
    t = min(max(t, 0), horizon)
    return L - (-(-(L - k) * t // horizon))


def sample_mask(scores, tau: float, k: int, noise, protected: Iterable[int]) -> tuple[Tensor, Tensor]:
    """Gumbel-TopK over the prunable layers only; protected layers are fixed at 1.

    Returns ``(hard, soft)`` over all layers. ``hard`` is the straight-through
    mask whose backward reaches ``scores`` through the soft relaxation.
    """
    s = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))
    L = s.shape[0]
    protected = sorted(set(protected))
    free = [i for i in range(L) if i not in protected]
    need = k - len(protected)
    if need < 0:
        raise SamplerError(f"k={k} is smaller than the {len(protected)} protected layers")
    dtype = s.dtype
    pieces_soft = []
    if need == 0 or not free:
        soft_free = ad.mul(ad.getitem(s, np.array(free, dtype=np.int64)), 0.0)
    else:
        sub_noise = np.asarray(noise, dtype=dtype)[free]
        soft_free = gumbel_topk(ad.getitem(s, np.array(free, dtype=np.int64)), tau, need, sub_noise)
    # scatter back into layer order
    idx_free = {l: j for j, l in enumerate(free)}
    ones = Tensor(np.ones(1, dtype))
    for l in range(L):
        if l in idx_free:
            pieces_soft.append(ad.reshape(ad.getitem(soft_free, slice(idx_free[l], idx_free[l] + 1)), (1,)))
        else:
            pieces_soft.append(ones)
    soft = ad.concat(pieces_soft, axis=0)
    hard = ste_discretize(soft, k, protected)
    return hard, soft
