"""Multimodal policy network: token projection, a tiny transformer, and the
spatiotemporal action head.

The network consumes pre-fused visual tokens plus one proprioceptive token and
the tokenized instruction, runs two pre-norm single-head self-attention blocks,
and maps the final token through an MLP head to 8 numbers: translation (tanh,
scaled), axis-angle rotation (tanh, scaled), grip (sigmoid), and duration
(softplus offset by dt_min, clamped at dt_max). Low-rank adapters can wrap any
of the transformer's linear maps; with adapter B matrices at zero the wrapped
network is bitwise identical to the base.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class PolicyError(RuntimeError):
    pass


class UnknownWordError(ValueError):
    pass


class InstructionVocab:
    """Fixed word-to-id table over the task template grammar."""

    PAD = 0
    EOS = 1

    def __init__(self, words):
        self.words = sorted({w.lower() for w in words})
        self._ids = {w: i + 2 for i, w in enumerate(self.words)}
        self._rev = {i: w for w, i in self._ids.items()}

    def __len__(self) -> int:
        return len(self.words) + 2

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for word in text.lower().split():
            if word not in self._ids:
                raise UnknownWordError(f"unknown word {word!r}")
            ids.append(self._ids[word])
        return ids

    def detokenize(self, ids) -> str:
        return " ".join(self._rev[i] for i in ids if i >= 2)

    def encode_padded(self, text: str, length: int) -> np.ndarray:
        ids = self.tokenize(text) + [self.EOS]
        if len(ids) > length:
            raise UnknownWordError(f"instruction longer than {length} tokens")
        return np.array(ids + [self.PAD] * (length - len(ids)), dtype=np.int64)

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256(" ".join(self.words).encode()).hexdigest()[:16]


class Linear:
    """Affine map with an optional additive low-rank adapter."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str,
                 init_scale: float | None = None):
        scale = 1.0 / np.sqrt(d_in) if init_scale is None else init_scale
        self.w = Tensor(rng.normal(0.0, scale, size=(d_in, d_out)),
                        requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.b")
        self.name = name
        self.lora: tuple[Tensor, Tensor, float] | None = None

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if self.lora is not None:
            # fold the adapter into an effective weight: one small (d_out, r)
            # x (r, d_in) product instead of two activation-sized ones.
            # With b == 0 the sum is exactly w, preserving bitwise identity.
            a, b, s = self.lora
            w = T.add(self.w, T.scale(T.transpose_last(T.matmul(b, a)), s))
        else:
            w = self.w
        return T.add(T.matmul(x, w), self.b)

    def add_lora(self, rank: int, alpha: float, rng: np.random.Generator) -> None:
        a = Tensor(rng.normal(0.0, 1.0 / np.sqrt(self.d_in), size=(rank, self.d_in)),
                   requires_grad=True, name=f"{self.name}.lora_a")
        b = Tensor(np.zeros((self.d_out, rank)), requires_grad=True,
                   name=f"{self.name}.lora_b")
        self.lora = (a, b, alpha / rank)

    def base_params(self):
        return {self.w.name: self.w, self.b.name: self.b}

    def lora_params(self):
        if self.lora is None:
            return {}
        a, b, _ = self.lora
        return {a.name: a, b.name: b}


class _LayerNorm:
    def __init__(self, d: int, name: str):
        self.gain = Tensor(np.ones(d), requires_grad=True, name=f"{name}.g")
        self.bias = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def params(self):
        return {self.gain.name: self.gain, self.bias.name: self.bias}


class TransformerBlock:
    """Pre-norm block: x + Attn(LN(x)), then x + FF(LN(x)). Single head."""

    def __init__(self, d: int, ff_mult: int, rng: np.random.Generator, name: str):
        self.d = d
        self.ln1 = _LayerNorm(d, f"{name}.ln1")
        self.wq = Linear(d, d, rng, f"{name}.wq")
        self.wk = Linear(d, d, rng, f"{name}.wk")
        self.wv = Linear(d, d, rng, f"{name}.wv")
        self.wo = Linear(d, d, rng, f"{name}.wo")
        self.ln2 = _LayerNorm(d, f"{name}.ln2")
        self.ff1 = Linear(d, d * ff_mult, rng, f"{name}.ff1")
        self.ff2 = Linear(d * ff_mult, d, rng, f"{name}.ff2")

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        q, k, v = self.wq(h), self.wk(h), self.wv(h)
        att = T.softmax(T.scale(T.matmul(q, T.transpose_last(k)), 1.0 / np.sqrt(self.d)),
                        axis=-1)
        x = T.add(x, self.wo(T.matmul(att, v)))
        x = T.add(x, self.ff2(T.tanh(self.ff1(self.ln2(x)))))
        return x

    def linears(self):
        return [self.wq, self.wk, self.wv, self.wo, self.ff1, self.ff2]

    def base_params(self):
        out = {}
        out.update(self.ln1.params())
        out.update(self.ln2.params())
        for lin in self.linears():
            out.update(lin.base_params())
        return out

    def lora_params(self):
        out = {}
        for lin in self.linears():
            out.update(lin.lora_params())
        return out


@dataclass
class PolicyNetConfig:
    d_model: int = 128
    n_blocks: int = 2
    ff_mult: int = 4
    vocab_size: int = 16
    lang_len: int = 11
    n_visual: int = 64
    proprio_dim: int = 7
    dx_scale: float = 0.5
    dtheta_scale: float = 0.8
    dt_min: float = 0.05
    dt_max: float = 1.0


class PolicyNet:
    def __init__(self, cfg: PolicyNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.seq_len = cfg.n_visual + 1 + cfg.lang_len
        s = 1.0 / np.sqrt(d)
        self.token_embed = Tensor(rng.normal(0.0, s, size=(cfg.vocab_size, d)),
                                  requires_grad=True, name="net.token_embed")
        self.order_embed = Tensor(rng.normal(0.0, s, size=(self.seq_len, d)),
                                  requires_grad=True, name="net.order_embed")
        self.blocks = [TransformerBlock(d, cfg.ff_mult, rng, f"net.block{i}")
                       for i in range(cfg.n_blocks)]
        self.ln_f = _LayerNorm(d, "net.ln_f")
        self.vis_proj1 = Linear(d, d, rng, "net.vis_proj1")
        self.vis_proj2 = Linear(d, d, rng, "net.vis_proj2")
        self.prop_proj1 = Linear(cfg.proprio_dim, d, rng, "net.prop_proj1")
        self.prop_proj2 = Linear(d, d, rng, "net.prop_proj2")
        self.head1 = Linear(d, d, rng, "net.head1")
        # small head init keeps initial actions near the squasher fixed points
        # without blocking upstream gradients the way a zero init would
        self.head2 = Linear(d, 8, rng, "net.head2", init_scale=0.01)
        self.aux_reg = Linear(d, 4, rng, "net.aux_reg")
        self.aux_cls = Linear(d, 4, rng, "net.aux_cls")
        self.aux_ground = Linear(d, 4, rng, "net.aux_ground")

    # -- token assembly ----------------------------------------------------

    def project_tokens(self, f_v4d: Tensor, proprio: Tensor) -> Tensor:
        """[visual tokens || one proprio token], each through its projector MLP.

        f_v4d: (B, Nv, d) fused visual features; proprio: (B, proprio_dim).
        Token order is fixed: visual tokens first (time-major, view-major,
        patch-major as featurized), then the proprio token.
        """
        if f_v4d.shape[-1] != self.cfg.d_model:
            raise PolicyError(f"visual width {f_v4d.shape} != {self.cfg.d_model}")
        if proprio.shape[-1] != self.cfg.proprio_dim:
            raise PolicyError(f"proprio width {proprio.shape} != {self.cfg.proprio_dim}")
        tau_v = self.vis_proj2(T.tanh(self.vis_proj1(f_v4d)))
        tau_p = self.prop_proj2(T.tanh(self.prop_proj1(proprio)))
        tau_p = T.reshape(tau_p, (tau_p.shape[0], 1, self.cfg.d_model))
        return T.concat([tau_v, tau_p], axis=1)

    def forward_tokens(self, tokens: Tensor, lang_ids: np.ndarray) -> Tensor:
        """Run the transformer; returns the final token's features (B, d)."""
        lang_ids = np.asarray(lang_ids, dtype=np.int64)
        if lang_ids.ndim == 1:
            lang_ids = lang_ids[None, :]
        if lang_ids.shape[1] != self.cfg.lang_len:
            raise PolicyError(f"expected {self.cfg.lang_len} language ids, "
                              f"got {lang_ids.shape}")
        tau_l = T.embed_lookup(self.token_embed, lang_ids)
        x = T.concat([tokens, tau_l], axis=1)
        if x.shape[1] != self.seq_len:
            raise PolicyError(f"sequence length {x.shape[1]} != {self.seq_len}")
        x = T.add(x, self.order_embed)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if not np.isfinite(x.data).all():
                raise PolicyError(f"numeric blowup in transformer block {i}")
        x = self.ln_f(x)
        last = T.narrow(x, 1, self.seq_len - 1, 1)
        return T.reshape(last, (last.shape[0], self.cfg.d_model))

    # -- heads ---------------------------------------------------------------

    def head_raw(self, feat: Tensor) -> Tensor:
        return self.head2(T.tanh(self.head1(feat)))

    def squash(self, raw: Tensor) -> Tensor:
        """Map raw head outputs to action ranges: see module docstring."""
        dx = T.scale(T.tanh(T.narrow(raw, 1, 0, 3)), self.cfg.dx_scale)
        dth = T.scale(T.tanh(T.narrow(raw, 1, 3, 3)), self.cfg.dtheta_scale)
        grip = T.sigmoid(T.narrow(raw, 1, 6, 1))
        dt = T.clamp_max(T.add(T.softplus(T.narrow(raw, 1, 7, 1)),
                               Tensor(np.array([self.cfg.dt_min]))), self.cfg.dt_max)
        return T.concat([dx, dth, grip, dt], axis=1)

    def forward(self, f_v4d: Tensor, proprio: Tensor, lang_ids: np.ndarray) -> Tensor:
        """(B, 8) squashed spatiotemporal actions."""
        tokens = self.project_tokens(f_v4d, proprio)
        return self.squash(self.head_raw(self.forward_tokens(tokens, lang_ids)))

    def aux_outputs(self, f_v4d: Tensor, proprio: Tensor,
                    lang_ids: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """Alignment-stage heads, all reading the same forward pass:
        per-token (position, time) regression from the fused features, 4-way
        scene-attribute logits, and instruction-conditioned grounding (target
        object xy + goal xy) from the final token."""
        reg = self.aux_reg(f_v4d)
        tokens = self.project_tokens(f_v4d, proprio)
        feat = self.forward_tokens(tokens, lang_ids)
        return reg, self.aux_cls(feat), self.aux_ground(feat)

    # -- adapters ------------------------------------------------------------

    def apply_lora(self, rank: int, alpha: float, rng: np.random.Generator) -> None:
        """Wrap every transformer linear map with a low-rank adapter."""
        if rank < 1 or rank >= self.cfg.d_model:
            raise PolicyError(f"invalid LoRA rank {rank}")
        for block in self.blocks:
            for lin in block.linears():
                lin.add_lora(rank, alpha, rng)

    def lora_trainable_count(self) -> int:
        total = 0
        for block in self.blocks:
            for lin in block.linears():
                if lin.lora is not None:
                    a, b, _ = lin.lora
                    total += a.size + b.size
        return total

    # -- parameter registry ----------------------------------------------------

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        groups: dict[str, dict[str, Tensor]] = {
            "transformer_base": {self.token_embed.name: self.token_embed,
                                 self.order_embed.name: self.order_embed,
                                 **self.ln_f.params()},
            "transformer_lora": {},
            "projectors": {},
            "head": {},
            "aux": {},
        }
        for block in self.blocks:
            groups["transformer_base"].update(block.base_params())
            groups["transformer_lora"].update(block.lora_params())
        for lin in (self.vis_proj1, self.vis_proj2, self.prop_proj1, self.prop_proj2):
            groups["projectors"].update(lin.base_params())
        for lin in (self.head1, self.head2):
            groups["head"].update(lin.base_params())
        for lin in (self.aux_reg, self.aux_cls, self.aux_ground):
            groups["aux"].update(lin.base_params())
        return groups

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for group in self.param_groups().values():
            out.update(group)
        return out


ACTION_GROUPS = (("dx", 0, 3), ("dtheta", 3, 3), ("grip", 6, 1), ("dt", 7, 1))


def action_loss(pred: Tensor, target, weights=(1.0, 1.0, 1.0, 1.0)) -> Tensor:
    """Per-group L1 distances summed with weights, averaged over the batch.

    Layout per row: [dx(3), dtheta(3), grip, dt]. Default weights are all 1,
    matching the plain unweighted sum of the four groups.
    """
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape or pred.shape[-1] != 8:
        raise PolicyError(f"action_loss shapes {pred.shape} vs {target.shape}")
    if len(weights) != 4:
        raise PolicyError("need exactly 4 group weights")
    batch = pred.shape[0]
    total = None
    for w, (_, start, length) in zip(weights, ACTION_GROUPS):
        if w == 0.0:
            continue
        diff = T.absolute(T.sub(T.narrow(pred, 1, start, length),
                                T.narrow(target, 1, start, length)))
        term = T.scale(T.tsum(diff), float(w) / batch)
        total = term if total is None else T.add(total, term)
    return total if total is not None else T.scale(T.tsum(pred), 0.0)
