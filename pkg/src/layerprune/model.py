"""Tiny pre-norm transformer LM with a multiplicative gate on every block.

Block ``l`` updates the residual stream as ``x <- x + m_l * f(x; theta_l)``
where ``f`` is causal self-attention followed by a GELU MLP, each behind its
own LayerNorm. A gate of exactly 0 skips the block, which is what makes the
masked forward and :func:`remove_layers` agree bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor

BLOCK_KEYS = (
    "ln1.weight",
    "ln1.bias",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ln2.weight",
    "ln2.bias",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
)
# projections writing into the residual stream; zero them and the block is a no-op
OUTPUT_KEYS = ("attn.wo", "mlp.w2", "mlp.b2")

_NEG = -1e9
_MASK_SLACK = 1e-9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab: int = 256
    max_seq: int = 128
    protected: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.n_layers < 2:
            raise ModelError("need at least 2 layers")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        prot = (0, self.n_layers - 1) if self.protected is None else self.protected
        prot = tuple(sorted(set(int(p) for p in prot)))
        if any(p < 0 or p >= self.n_layers for p in prot):
            raise ModelError(f"protected layers {prot} outside 0..{self.n_layers - 1}")
        object.__setattr__(self, "protected", prot)

    @property
    def prunable(self) -> tuple[int, ...]:
        return tuple(l for l in range(self.n_layers) if l not in self.protected)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["protected"] = list(self.protected)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["protected"] = tuple(d.get("protected") or ())
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def layer(self, l: int) -> dict[str, np.ndarray]:
        return {k: self.tensors[f"layers.{l}.{k}"] for k in BLOCK_KEYS}


def block_name(l: int, key: str) -> str:
    return f"layers.{l}.{key}"


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    D, F, V, L = config.d_model, config.d_ff, config.vocab, config.n_layers
    std = 0.02
    out_std = std / math.sqrt(2 * L)

    def normal(shape, s):
        return (rng.standard_normal(shape) * s).astype(dtype)

    t = {
        "tok_emb": normal((V, D), std),
        "pos_emb": normal((config.max_seq, D), std / 2),
    }
    for l in range(L):
        t[block_name(l, "ln1.weight")] = np.ones(D, dtype)
        t[block_name(l, "ln1.bias")] = np.zeros(D, dtype)
        t[block_name(l, "attn.wq")] = normal((D, D), std)
        t[block_name(l, "attn.wk")] = normal((D, D), std)
        t[block_name(l, "attn.wv")] = normal((D, D), std)
        t[block_name(l, "attn.wo")] = normal((D, D), out_std)
        t[block_name(l, "ln2.weight")] = np.ones(D, dtype)
        t[block_name(l, "ln2.bias")] = np.zeros(D, dtype)
        t[block_name(l, "mlp.w1")] = normal((D, F), std)
        t[block_name(l, "mlp.b1")] = np.zeros(F, dtype)
        t[block_name(l, "mlp.w2")] = normal((F, D), out_std)
        t[block_name(l, "mlp.b2")] = np.zeros(D, dtype)
    t["ln_f.weight"] = np.ones(D, dtype)
    t["ln_f.bias"] = np.zeros(D, dtype)
    t["lm_head"] = normal((D, V), std)
    return ModelParams(config, t)


def scale_block_output(params: ModelParams, layers: Sequence[int], scale: float) -> ModelParams:
    """Copy of ``params`` with the residual-writing projections of ``layers`` scaled."""
    out = params.copy()
    for l in layers:
        for key in OUTPUT_KEYS:
            name = block_name(l, key)
            out.tensors[name] = (out.tensors[name] * scale).astype(out.tensors[name].dtype)
    return out


def _causal(T: int, dtype) -> np.ndarray:
    return np.triu(np.full((T, T), _NEG, dtype=dtype), k=1)


def _gates(config: ModelConfig, mask) -> list:
    L = config.n_layers
    if mask is None:
        return [1.0] * L
    if isinstance(mask, Tensor):
        if mask.shape != (L,):
            raise ModelError(f"mask has shape {mask.shape}, expected ({L},)")
        # a relaxed top-k mask conserves its total mass, but single entries can exceed 1
        if not np.all(np.isfinite(mask.data)) or np.any(mask.data < -_MASK_SLACK):
            raise ModelError("soft mask entries must be finite and non-negative")
        return [ad.getitem(mask, l) for l in range(L)]
    gates = list(mask)
    if len(gates) != L:
        raise ModelError(f"mask has length {len(gates)}, expected {L}")
    for g in gates:
        if not isinstance(g, Tensor) and not 0.0 <= float(g) <= 1.0:
            raise ModelError("mask entries must lie in [0, 1]")
    return gates


def block(config: ModelConfig, w: Mapping, l: int, x, causal: np.ndarray):
    """f(x; theta_l): attention plus MLP contribution of block ``l``."""
    B, T, D = x.shape
    H = config.n_heads
    dh = D // H

    def p(key):
        return w[block_name(l, key)]

    def heads(t):
        return ad.transpose(ad.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

    h = ad.layernorm(x, p("ln1.weight"), p("ln1.bias"))
    q = heads(ad.matmul(h, p("attn.wq")))
    k = heads(ad.matmul(h, p("attn.wk")))
    v = heads(ad.matmul(h, p("attn.wv")))
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = ad.softmax(ad.add(scores, causal), axis=-1)
    o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
    o = ad.matmul(o, p("attn.wo"))
    h2 = ad.layernorm(ad.add(x, o), p("ln2.weight"), p("ln2.bias"))
    m = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h2, p("mlp.w1")), p("mlp.b1"))), p("mlp.w2")), p("mlp.b2"))
    return ad.add(o, m)


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise ModelError(f"tokens must be integers, got {tokens.dtype}")
    if tokens.ndim not in (1, 2):
        raise ModelError(f"tokens must be [T] or [B, T], got shape {tokens.shape}")
    if tokens.size == 0:
        raise ModelError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= config.vocab:
        raise ModelError(f"token id out of range for vocab {config.vocab}")
    if tokens.shape[-1] > config.max_seq:
        raise ModelError(f"sequence length {tokens.shape[-1]} exceeds max_seq {config.max_seq}")
    return tokens


def apply(config: ModelConfig, w: Mapping, mask, tokens, return_residuals: bool = False):
    """Masked forward over weights ``w`` (arrays or Tensors) -> logits Tensor.

    ``tokens`` of shape [T] gives logits [T, V]; [B, T] gives [B, T, V].
    With ``return_residuals`` also returns the residual stream entering each
    block plus the final one (L + 1 Tensors of shape [B, T, D]).
    """
    tokens = _check_tokens(config, tokens)
    gates = _gates(config, mask)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    B, T = tokens.shape
    x = ad.add(ad.embed(w["tok_emb"], tokens), ad.embed(w["pos_emb"], np.arange(T)))
    causal = _causal(T, x.dtype)
    residuals = [x]
    for l, g in enumerate(gates):
        if isinstance(g, Tensor):
            x = ad.add(x, ad.mul(g, block(config, w, l, x, causal)))
        elif g == 0:
            pass
        elif g == 1:
            x = ad.add(x, block(config, w, l, x, causal))
        else:
            x = ad.add(x, ad.mul(block(config, w, l, x, causal), float(g)))
        residuals.append(x)
    x = ad.layernorm(x, w["ln_f.weight"], w["ln_f.bias"])
    logits = ad.matmul(x, w["lm_head"])
    if single:
        logits = ad.reshape(logits, (T, config.vocab))
    if return_residuals:
        return logits, residuals
    return logits


def forward(params: ModelParams, mask, tokens) -> Tensor:
    """Logits of ``params`` under per-layer gates ``mask`` (None means all ones)."""
    return apply(params.config, params.tensors, mask, tokens)


def lm_loss(logits, targets):
    """Mean token cross-entropy (natural log)."""
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ModelError("empty sequence")
    return ad.cross_entropy(logits, targets)


def remove_layers(params: ModelParams, hard_mask) -> ModelParams:
    """Physically drop the blocks whose mask entry is 0, preserving order."""
    cfg = params.config
    m = np.asarray(hard_mask)
    if m.shape != (cfg.n_layers,):
        raise ModelError(f"mask has shape {m.shape}, expected ({cfg.n_layers},)")
    if not np.all((m == 0) | (m == 1)):
        raise ModelError("remove_layers needs a binary mask")
    kept = [l for l in range(cfg.n_layers) if m[l] == 1]
    dropped_protected = [l for l in cfg.protected if m[l] == 0]
    if dropped_protected:
        raise ModelError(f"cannot prune protected layers {dropped_protected}")
    new_cfg = dataclasses.replace(
        cfg,
        n_layers=len(kept),
        protected=tuple(kept.index(p) for p in cfg.protected),
    )
    tensors = {k: v.copy() for k, v in params.tensors.items() if not k.startswith("layers.")}
    for new, old in enumerate(kept):
        for key in BLOCK_KEYS:
            tensors[block_name(new, key)] = params.tensors[block_name(old, key)].copy()
    return ModelParams(new_cfg, tensors)


def save_checkpoint(path, params: ModelParams, extra: Mapping | None = None) -> None:
    meta = {"kind": "model", "config": params.config.to_dict()}
    if extra:
        meta["extra"] = dict(extra)
    checkpoint.save(path, meta, params.tensors)


def load_checkpoint(path) -> ModelParams:
    meta, tensors = checkpoint.load(path)
    if meta.get("kind") != "model":
        raise checkpoint.CheckpointError(f"{path} does not hold a model (kind={meta.get('kind')!r})")
    return ModelParams(ModelConfig.from_dict(meta["config"]), tensors)
