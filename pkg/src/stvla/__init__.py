"""Spatiotemporal vision-language-action policy stack on a kinematic tabletop
benchmark: learnable 4D (position + time) Fourier embeddings fused into visual
tokens by cross-attention, a small transformer policy emitting duration-aware
actions, a chunk-annotated behavior-cloning pipeline, and a seeded train/eval
harness."""

from .tensor import Tensor, Tape, grad_check
from .types import ProprioState, SimFrame, SpatioTemporalAction

__all__ = ["Tensor", "Tape", "grad_check", "ProprioState", "SimFrame",
           "SpatioTemporalAction"]
__version__ = "0.1.0"
