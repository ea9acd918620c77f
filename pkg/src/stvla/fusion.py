"""Fusing 4D embeddings into visual token features.

The primary strategy is residual single-head cross-attention: visual tokens
form the queries, the width-matched 4D embeddings form keys and values, and
the attended values are added back onto the visual features. Alternative
strategies (plain addition, learned scalar gate, concatenation+projection)
share the same interface so a config flag can swap them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class VisualTokens:
    """N x d_model token features plus per-token provenance metadata."""

    tokens: Tensor
    view_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    patch_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    time_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def with_tokens(self, tokens: Tensor) -> "VisualTokens":
        return VisualTokens(tokens, self.view_ids, self.patch_ids, self.time_ids)


class CrossAttentionFuser:
    """Residual cross-attention: f_v + softmax(q k^T / sqrt(d)) v.

    q = f_v w_q, k = f4d_hat w_k, v = f4d_hat w_v; the softmax runs over the
    key axis so each attention row sums to 1. Zeroing w_v makes this the
    identity on the visual features. Accepts (N, d) or batched (B, N, d).
    """

    kind = "attention"

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.d_model = d_model
        self.scale = 1.0 / np.sqrt(d_model)
        s = 1.0 / np.sqrt(d_model)
        self.w_q = Tensor(rng.normal(0.0, s, size=(d_model, d_model)), requires_grad=True,
                          name="fuse.w_q")
        self.w_k = Tensor(rng.normal(0.0, s, size=(d_model, d_model)), requires_grad=True,
                          name="fuse.w_k")
        self.w_v = Tensor(rng.normal(0.0, s, size=(d_model, d_model)), requires_grad=True,
                          name="fuse.w_v")
        self.lora: dict[str, tuple[Tensor, Tensor, float]] = {}

    def _apply(self, x: Tensor, which: str) -> Tensor:
        w = getattr(self, which)
        if which in self.lora:
            # adapter folded into an effective weight; exact when b is zero
            a, b, s = self.lora[which]
            w = T.add(w, T.scale(T.transpose_last(T.matmul(b, a)), s))
        return T.matmul(x, w)

    def fuse(self, f_v: Tensor, f4d_hat: Tensor) -> Tensor:
        if f_v.shape != f4d_hat.shape:
            raise ValueError(f"fuse shape mismatch {f_v.shape} vs {f4d_hat.shape}")
        if f_v.shape[-1] != self.d_model:
            raise ValueError(f"expected width {self.d_model}, got {f_v.shape}")
        q = self._apply(f_v, "w_q")
        k = self._apply(f4d_hat, "w_k")
        v = self._apply(f4d_hat, "w_v")
        att = T.softmax(T.scale(T.matmul(q, T.transpose_last(k)), self.scale), axis=-1)
        return T.add(f_v, T.matmul(att, v))

    def attention_rows(self, f_v: Tensor, f4d_hat: Tensor) -> np.ndarray:
        """Attention matrix alone, for inspection and tests."""
        q = self._apply(f_v, "w_q")
        k = self._apply(f4d_hat, "w_k")
        att = T.softmax(T.scale(T.matmul(q, T.transpose_last(k)), self.scale), axis=-1)
        return att.data

    def params(self) -> dict[str, Tensor]:
        out = self.base_params()
        out.update(self.lora_params())
        return out

    def base_params(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.w_q, self.w_k, self.w_v)}

    def lora_params(self) -> dict[str, Tensor]:
        out = {}
        for a, b, _ in self.lora.values():
            out[a.name] = a
            out[b.name] = b
        return out

    def add_lora(self, rank: int, alpha: float, rng: np.random.Generator) -> None:
        """Wrap q/k/v maps with additive low-rank adapters (B zero-initialized)."""
        if rank < 1 or rank >= self.d_model:
            raise ValueError(f"invalid LoRA rank {rank}")
        for which in ("w_q", "w_k", "w_v"):
            a = Tensor(rng.normal(0.0, 1.0 / np.sqrt(self.d_model), size=(rank, self.d_model)),
                       requires_grad=True, name=f"fuse.lora.{which}.a")
            b = Tensor(np.zeros((self.d_model, rank)), requires_grad=True,
                       name=f"fuse.lora.{which}.b")
            self.lora[which] = (a, b, alpha / rank)


class _NoLoraMixin:
    def lora_params(self) -> dict[str, Tensor]:
        return {}

    def add_lora(self, rank: int, alpha: float, rng: np.random.Generator) -> None:
        pass


class AdditiveFuser(_NoLoraMixin):
    """f_v + f4d_hat, no parameters; the fusion-disabled ablation."""

    kind = "additive"

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.d_model = d_model

    def fuse(self, f_v: Tensor, f4d_hat: Tensor) -> Tensor:
        if f_v.shape != f4d_hat.shape:
            raise ValueError(f"fuse shape mismatch {f_v.shape} vs {f4d_hat.shape}")
        return T.add(f_v, f4d_hat)

    def params(self) -> dict[str, Tensor]:
        return {}

    def base_params(self) -> dict[str, Tensor]:
        return {}


class ScalarGateFuser(_NoLoraMixin):
    """f_v + g * f4d_hat with one learned scalar gate (fixed-weight fusion)."""

    kind = "gate"

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.d_model = d_model
        self.gate = Tensor(np.array([0.5]), requires_grad=True, name="fuse.gate")

    def fuse(self, f_v: Tensor, f4d_hat: Tensor) -> Tensor:
        if f_v.shape != f4d_hat.shape:
            raise ValueError(f"fuse shape mismatch {f_v.shape} vs {f4d_hat.shape}")
        return T.add(f_v, T.scalar_mul(f4d_hat, self.gate))

    def params(self) -> dict[str, Tensor]:
        return {self.gate.name: self.gate}

    def base_params(self) -> dict[str, Tensor]:
        return self.params()


class ConcatFuser(_NoLoraMixin):
    """Project [f_v || f4d_hat] back to d_model with one linear map.

    The weight starts as [I; 0] so the fused features begin as the plain
    visual features and the 4D block is mixed in by training.
    """

    kind = "concat"

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.d_model = d_model
        w = np.concatenate([np.eye(d_model),
                            rng.normal(0.0, 0.01, size=(d_model, d_model))], axis=0)
        self.w_cat = Tensor(w, requires_grad=True, name="fuse.w_cat")

    def fuse(self, f_v: Tensor, f4d_hat: Tensor) -> Tensor:
        if f_v.shape != f4d_hat.shape:
            raise ValueError(f"fuse shape mismatch {f_v.shape} vs {f4d_hat.shape}")
        return T.matmul(T.concat([f_v, f4d_hat], axis=-1), self.w_cat)

    def params(self) -> dict[str, Tensor]:
        return {self.w_cat.name: self.w_cat}

    def base_params(self) -> dict[str, Tensor]:
        return self.params()


FUSION_KINDS = ("attention", "concat", "gate", "additive")


def make_fuser(kind: str, d_model: int, rng: np.random.Generator):
    if kind == "attention":
        return CrossAttentionFuser(d_model, rng)
    if kind == "additive":
        return AdditiveFuser(d_model, rng)
    if kind == "gate":
        return ScalarGateFuser(d_model, rng)
    if kind == "concat":
        return ConcatFuser(d_model, rng)
    raise ValueError(f"unknown fusion strategy {kind!r}")
