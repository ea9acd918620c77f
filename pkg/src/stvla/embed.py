"""Fourier encoding of 3D positions and timestamps into learnable 4D embeddings.

psi(x) = 1/sqrt(d) [cos(x W_r^T) || sin(x W_r^T)] with a learnable frequency
matrix W_r per input kind. Position and time encodings are concatenated and
linearly mixed into the joint embedding, then an MLP matches the visual
feature width. Inputs are normalized (workspace half-extent for positions,
nominal horizon for time) before encoding so both live on comparable scales.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class FourierEncoder:
    """Learnable Fourier features: input_dim -> d (d even; d/2 cos + d/2 sin)."""

    def __init__(self, input_dim: int, d: int, sigma: float, rng: np.random.Generator,
                 name: str = "fourier"):
        if d % 2:
            raise ValueError("fourier width d must be even")
        self.input_dim = input_dim
        self.d = d
        self.half_dim = d // 2
        self.w_r = Tensor(rng.normal(0.0, sigma, size=(self.half_dim, input_dim)),
                          requires_grad=True, name=f"{name}.w_r")

    def encode(self, x: Tensor) -> Tensor:
        """x: (..., input_dim) -> (..., d). Differentiable in x and W_r."""
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected trailing dim {self.input_dim}, got {x.shape}")
        phase = T.matmul(x, T.transpose_last(self.w_r))  # (..., half_dim)
        out = T.concat([T.cos(phase), T.sin(phase)], axis=-1)
        return T.scale(out, 1.0 / np.sqrt(self.d))

    def params(self) -> dict[str, Tensor]:
        return {self.w_r.name: self.w_r}


class SpatioTemporalEmbedder:
    """Joint position+time embedding and the width-matching MLP.

    embed(positions, times) mixes the two Fourier codes through a linear map
    into the joint embedding width; match_dim lifts that to the visual feature
    width with a two-layer tanh MLP.
    """

    def __init__(self, d: int, d_embed: int, d_model: int, rng: np.random.Generator,
                 pos_sigma: float = 1.0, time_sigma: float = 0.25,
                 workspace_half: float = 0.3, t_max: float = 8.0):
        self.d = d
        self.d_embed = d_embed
        self.d_model = d_model
        self.workspace_half = workspace_half
        self.t_max = t_max
        self.pos_encoder = FourierEncoder(3, d, pos_sigma, rng, name="embed.pos")
        self.time_encoder = FourierEncoder(1, d, time_sigma, rng, name="embed.time")
        self.w_p = Tensor(rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(2 * d, d_embed)),
                          requires_grad=True, name="embed.w_p")
        self.mlp_w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_embed), size=(d_embed, d_model)),
                             requires_grad=True, name="embed.mlp_w1")
        self.mlp_b1 = Tensor(np.zeros(d_model), requires_grad=True, name="embed.mlp_b1")
        self.mlp_w2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(d_model, d_model)),
                             requires_grad=True, name="embed.mlp_w2")
        self.mlp_b2 = Tensor(np.zeros(d_model), requires_grad=True, name="embed.mlp_b2")

    def normalize_positions(self, positions: np.ndarray) -> np.ndarray:
        """Meters -> workspace units, clipped so far background cannot alias."""
        return np.clip(np.asarray(positions, dtype=np.float64) / self.workspace_half, -3.0, 3.0)

    def normalize_times(self, times: np.ndarray) -> np.ndarray:
        return np.asarray(times, dtype=np.float64) / self.t_max

    def embed(self, positions: Tensor, times: Tensor,
              use_spatial: bool = True, use_temporal: bool = True) -> Tensor:
        """(..., 3) positions and (..., 1) times -> (..., d_embed) joint embedding.

        The use_* switches zero out one code for the ablation variants while
        keeping shapes (and the w_p mixing) identical.
        """
        psi_p = self.pos_encoder.encode(positions)
        psi_t = self.time_encoder.encode(times)
        if not use_spatial:
            psi_p = T.scale(psi_p, 0.0)
        if not use_temporal:
            psi_t = T.scale(psi_t, 0.0)
        return T.matmul(T.concat([psi_p, psi_t], axis=-1), self.w_p)

    def match_dim(self, f4d: Tensor) -> Tensor:
        """(..., d_embed) -> (..., d_model) via the two-layer MLP."""
        if f4d.shape[-1] != self.d_embed:
            raise ValueError(f"expected width {self.d_embed}, got {f4d.shape}")
        h = T.tanh(T.add(T.matmul(f4d, self.mlp_w1), self.mlp_b1))
        return T.add(T.matmul(h, self.mlp_w2), self.mlp_b2)

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.pos_encoder.params())
        out.update(self.time_encoder.params())
        for t in (self.w_p, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2):
            out[t.name] = t
        return out
