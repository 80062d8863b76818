"""Time conditioning: canonical primitives are carried to time t by a
deformation MLP over positional encodings of (position, t).

Only position, scale and rotation deform; opacity and color are temporal
invariants of the canonical space. With all-zero field parameters the
mapping is exactly the identity, which inference exploits as a fast path
(and which the canonical-identity regression depends on, bitwise).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nn import Linear
from .scene import PrimitiveBatch
from .spatial import normalize_quaternions


def positional_encode(p, L: int) -> ad.Tensor:
    """Sinusoidal features (sin(2^i pi p), cos(2^i pi p)), i = 0..L-1.

    Input (..., C) maps to (..., 2*L*C), component-major: all L frequency
    pairs of component 0 first, then component 1, and so on.
    """
    if L < 1:
        raise ValueError("need at least one frequency")
    t = p if isinstance(p, ad.Tensor) else ad.tensor(p)
    if t.ndim == 0:
        t = ad.reshape(t, (1,))
    lead = t.shape[:-1]
    c = t.shape[-1]
    freq = (2.0 ** np.arange(L)) * np.pi  # (L,)
    scaled = ad.reshape(t, lead + (c, 1)) * ad.tensor(freq)  # (..., C, L)
    pair = ad.concat(
        [
            ad.reshape(ad.sin(scaled), lead + (c, L, 1)),
            ad.reshape(ad.cos(scaled), lead + (c, L, 1)),
        ],
        axis=-1,
    )  # (..., C, L, 2)
    return ad.reshape(pair, lead + (2 * L * c,))


class DeformationField:
    """Shared relu trunk with three linear heads for the per-primitive
    deltas (position, scale, rotation quaternion)."""

    def __init__(self, L_x: int = 10, L_t: int = 6, hidden=(192, 192),
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.L_x, self.L_t = L_x, L_t
        self.hidden = tuple(hidden)
        widths = [6 * L_x + 2 * L_t, *self.hidden]
        self.trunk = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        last = widths[-1]
        self.head_position = Linear(last, 3, rng)
        self.head_scale = Linear(last, 3, rng)
        self.head_rotation = Linear(last, 4, rng)

    def parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.trunk):
            out[f"trunk.{i}.weight"] = layer.weight
            out[f"trunk.{i}.bias"] = layer.bias
        for name, head in (
            ("head_position", self.head_position),
            ("head_scale", self.head_scale),
            ("head_rotation", self.head_rotation),
        ):
            out[f"{name}.weight"] = head.weight
            out[f"{name}.bias"] = head.bias
        return out

    def zero_(self):
        for t in self.parameters().values():
            t.data[...] = 0.0

    def is_zero(self) -> bool:
        return all(np.all(t.data == 0.0) for t in self.parameters().values())

    def deform(self, x, t: float):
        """Deltas (dx, ds, dr) for canonical positions x (M,3) at time t."""
        x = x if isinstance(x, ad.Tensor) else ad.tensor(x)
        m = x.shape[0]
        enc_x = positional_encode(x, self.L_x)
        t_col = np.full((m, 1), float(t))
        enc_t = positional_encode(ad.tensor(t_col), self.L_t)
        h = ad.concat([enc_x, enc_t], axis=1)
        for layer in self.trunk:
            h = ad.relu(layer(h))
        return self.head_position(h), self.head_scale(h), self.head_rotation(h)


def apply_deformation(batch: PrimitiveBatch, dx, ds, dr,
                      training: bool = False) -> PrimitiveBatch:
    """Carry a canonical batch to time t given its deltas.

    Scale is clamped at 1e-7 after the additive update (the covariance
    construction needs positivity); the rotation sum is re-normalized. In
    inference mode exactly-zero deltas short-circuit to the input batch so
    a zeroed field reproduces canonical renders bit for bit.
    """
    if not training:
        if (
            not np.any(dx.numpy())
            and not np.any(ds.numpy())
            and not np.any(dr.numpy())
        ):
            return batch
    return PrimitiveBatch(
        position=batch.position + dx,
        opacity=batch.opacity,
        color=batch.color,
        scale=ad.clamp(batch.scale + ds, 1e-7, None),
        rotation=normalize_quaternions(batch.rotation + dr),
        anchor_index=batch.anchor_index,
        offset_index=batch.offset_index,
    )
