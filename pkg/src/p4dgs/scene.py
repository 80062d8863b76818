"""Core scene types: anchors, Gaussian primitives, cameras, timestamps.

The frozen dataclasses are the value-object API surface (validated on
construction, safe to share). Training and rendering work on struct-of-array
containers (AnchorField, PrimitiveBatch) that hold autodiff tensors; the
value objects are views for tests and tooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


def _check_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. `w2c` maps world points into camera space (x right,
    y down, z forward); pixel = (fx*x/z + cx, fy*y/z + cy)."""

    w2c: np.ndarray  # 3x4 rigid transform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        w2c = np.asarray(self.w2c, dtype=np.float64)
        if w2c.shape != (3, 4):
            raise ValueError(f"w2c must be 3x4, got {w2c.shape}")
        _check_finite("w2c", w2c)
        R = w2c[:, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ValueError("rotation block is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "w2c", w2c)

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        R, t = self.w2c[:, :3], self.w2c[:, 3]
        return -R.T @ t

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        """World points (N,3) into camera space."""
        return pts @ self.w2c[:, :3].T + self.w2c[:, 3]


@dataclass(frozen=True)
class TimeStamp:
    t: float

    def __post_init__(self):
        if not (0.0 <= self.t <= 1.0):
            raise ValueError(f"timestamp {self.t} outside [0,1]")


@dataclass(frozen=True)
class Anchor:
    """Sparse scene point that spawns k Gaussian primitives.

    position/scale/offset_scaling are in scene units; offsets are unitless
    (scaled by offset_scaling at prediction time); feature conditions the
    prediction heads.
    """

    position: np.ndarray  # (3,)
    scale: np.ndarray  # (3,) > 0
    offset_scaling: np.ndarray  # (3,)
    offsets: np.ndarray  # (k,3)
    feature: np.ndarray  # (d,)

    def __post_init__(self):
        for name in ("position", "scale", "offset_scaling", "offsets", "feature"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            _check_finite(name, a)
            object.__setattr__(self, name, a)
        if self.position.shape != (3,) or self.scale.shape != (3,):
            raise ValueError("position and scale must be 3-vectors")
        if self.offsets.ndim != 2 or self.offsets.shape[1] != 3 or self.offsets.shape[0] < 1:
            raise ValueError(f"offsets must be (k,3) with k >= 1, got {self.offsets.shape}")
        if np.any(self.scale <= 0):
            raise ValueError("anchor scale must be positive componentwise")

    @property
    def k(self) -> int:
        return self.offsets.shape[0]


@dataclass(frozen=True)
class GaussianPrimitive:
    position: np.ndarray  # (3,)
    opacity: float  # [0,1]
    color: np.ndarray  # (3,) in [0,1]
    scale: np.ndarray  # (3,) > 0
    rotation: np.ndarray  # unit quaternion (w,x,y,z)

    def __post_init__(self):
        for name in ("position", "color", "scale", "rotation"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            _check_finite(name, a)
            object.__setattr__(self, name, a)
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError(f"opacity {self.opacity} outside [0,1]")
        if np.any(self.scale <= 0):
            raise ValueError("primitive scale must be positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation quaternion is not unit-norm")


class PrimitiveBatch:
    """Struct-of-arrays primitive container used by the renderer.

    Attribute fields are autodiff tensors so gradients flow back into the
    prediction heads. anchor_index/offset_index record provenance so the
    trainer can accumulate per-primitive statistics for anchor management.
    """

    def __init__(self, position, opacity, color, scale, rotation,
                 anchor_index=None, offset_index=None):
        self.position = position  # (M,3)
        self.opacity = opacity  # (M,)
        self.color = color  # (M,3)
        self.scale = scale  # (M,3)
        self.rotation = rotation  # (M,4), unit rows
        n = position.shape[0]
        self.anchor_index = anchor_index if anchor_index is not None else np.zeros(n, np.intp)
        self.offset_index = offset_index if offset_index is not None else np.zeros(n, np.intp)

    def __len__(self):
        return self.position.shape[0]

    def to_primitives(self) -> list:
        """Materialize validated value objects (test/tooling path)."""
        out = []
        for i in range(len(self)):
            out.append(
                GaussianPrimitive(
                    position=self.position.numpy()[i],
                    opacity=float(self.opacity.numpy()[i]),
                    color=self.color.numpy()[i],
                    scale=self.scale.numpy()[i],
                    rotation=self.rotation.numpy()[i],
                )
            )
        return out


class AnchorField:
    """All anchors of a scene as trainable arrays.

    Positions are plain numpy (they are managed by growing/pruning, not by
    gradient descent) while the four coded attributes are tape parameters.
    """

    def __init__(self, positions, feature, offsets, offset_scaling, scale):
        self.positions = np.asarray(positions, dtype=np.float64)
        self.feature = ad.parameter(feature)
        self.offsets = ad.parameter(offsets)
        self.offset_scaling = ad.parameter(offset_scaling)
        self.scale = ad.parameter(scale)
        if np.any(self.scale.data <= 0):
            raise ValueError("anchor scales must be positive")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    @property
    def d(self) -> int:
        return self.feature.shape[1]

    def parameters(self) -> dict:
        return {
            "feature": self.feature,
            "offsets": self.offsets,
            "offset_scaling": self.offset_scaling,
            "scale": self.scale,
        }

    def anchor(self, i: int) -> Anchor:
        return Anchor(
            position=self.positions[i],
            scale=self.scale.data[i],
            offset_scaling=self.offset_scaling.data[i],
            offsets=self.offsets.data[i],
            feature=self.feature.data[i],
        )

    @staticmethod
    def from_anchors(anchors: list) -> "AnchorField":
        return AnchorField(
            positions=np.stack([a.position for a in anchors]),
            feature=np.stack([a.feature for a in anchors]),
            offsets=np.stack([a.offsets for a in anchors]),
            offset_scaling=np.stack([a.offset_scaling for a in anchors]),
            scale=np.stack([a.scale for a in anchors]),
        )

    def aabb(self) -> np.ndarray:
        """(2,3) min/max corner over anchor positions."""
        if self.n == 0:
            raise ValueError("empty anchor field has no bounding box")
        return np.stack([self.positions.min(axis=0), self.positions.max(axis=0)])
