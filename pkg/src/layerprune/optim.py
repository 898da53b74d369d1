"""Optimisers and the learning-rate schedule."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np


def lr_at(t: int, peak: float, warmup: int, T: int, floor: float) -> float:
    """Linear warmup 0 -> ``peak`` over ``warmup`` steps, then cosine to ``floor`` at ``T``."""
    if t < warmup:
        return peak * t / warmup
    if T <= warmup:
        return peak
    progress = min(1.0, (t - warmup) / (T - warmup))
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the norm."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return total


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[name], self.v[name] = m, v
            finite = np.isfinite(p)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = np.where(finite, p - update, p).astype(p.dtype)

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        tensors = {f"m.{k}": v for k, v in self.m.items()}
        tensors.update({f"v.{k}": v for k, v in self.v.items()})
        return {"kind": "adam", "step_count": self.step_count}, tensors

    def load_state(self, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
        self.step_count = int(meta["step_count"])
        self.m = {k[2:]: v for k, v in tensors.items() if k.startswith("m.")}
        self.v = {k[2:]: v for k, v in tensors.items() if k.startswith("v.")}

    def rename(self, mapping: Mapping[str, str]) -> None:
        """Carry moments across a parameter renaming; unmapped entries are dropped."""
        self.m = {mapping[k]: v for k, v in self.m.items() if k in mapping}
        self.v = {mapping[k]: v for k, v in self.v.items() if k in mapping}


class SGD:
    def __init__(self):
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        for name, g in grads.items():
            p = params[name]
            params[name] = np.where(np.isfinite(p), p - lr * g, p).astype(p.dtype)

    def state(self):
        return {"kind": "sgd", "step_count": self.step_count}, {}

    def load_state(self, meta, tensors) -> None:
        self.step_count = int(meta["step_count"])

    def rename(self, mapping) -> None:
        pass
