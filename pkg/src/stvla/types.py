"""Shared domain records passed between the simulator, dataset, and policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, DepthMap


@dataclass(frozen=True)
class SpatioTemporalAction:
    """One decision step: translation, axis-angle rotation, grip command, duration.

    grip is continuous in [0, 1]; >= 0.5 means commanded closed. delta_t is the
    execution duration in seconds and must be positive.
    """

    delta_x: np.ndarray  # (3,) meters
    delta_theta: np.ndarray  # (3,) axis-angle radians
    grip: float
    delta_t: float

    def __post_init__(self):
        dx = np.asarray(self.delta_x, dtype=np.float64)
        dth = np.asarray(self.delta_theta, dtype=np.float64)
        if dx.shape != (3,) or dth.shape != (3,):
            raise ValueError("delta_x and delta_theta must be 3-vectors")
        if not (np.isfinite(dx).all() and np.isfinite(dth).all()
                and np.isfinite(self.grip) and np.isfinite(self.delta_t)):
            raise ValueError("non-finite action")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")
        object.__setattr__(self, "delta_x", dx)
        object.__setattr__(self, "delta_theta", dth)
        object.__setattr__(self, "grip", float(self.grip))
        object.__setattr__(self, "delta_t", float(self.delta_t))

    def as_vector(self) -> np.ndarray:
        """Flat [dx(3), dtheta(3), grip, dt] layout used by the loss and the head."""
        return np.concatenate([self.delta_x, self.delta_theta, [self.grip, self.delta_t]])

    @staticmethod
    def from_vector(v: np.ndarray) -> "SpatioTemporalAction":
        v = np.asarray(v, dtype=np.float64)
        return SpatioTemporalAction(v[0:3], v[3:6], float(v[6]), float(v[7]))

    @staticmethod
    def null(delta_t: float) -> "SpatioTemporalAction":
        return SpatioTemporalAction(np.zeros(3), np.zeros(3), 0.0, delta_t)


@dataclass(frozen=True)
class ProprioState:
    position: np.ndarray  # (3,) meters
    orientation: np.ndarray  # (3,) axis-angle radians
    grip_state: float  # 0 open .. 1 closed

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64)
        o = np.asarray(self.orientation, dtype=np.float64)
        if not (np.isfinite(p).all() and np.isfinite(o).all() and np.isfinite(self.grip_state)):
            raise ValueError("non-finite proprioceptive state")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", o)
        object.__setattr__(self, "grip_state", float(self.grip_state))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation, [self.grip_state]])


@dataclass(frozen=True)
class SimFrame:
    """One timestamped observation from one camera."""

    timestamp: float
    view: str  # "third" | "wrist"
    depth: DepthMap
    intrinsics: CameraIntrinsics
    pose: CameraPose
    proprio: ProprioState
