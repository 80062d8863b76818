"""Anchor-to-primitive prediction: each anchor spawns k Gaussian primitives
whose attributes come from small view-conditioned MLP heads.

All ops are batched over anchors; inputs that carry gradients are autodiff
tensors, geometry that is not trained (anchor positions, cameras) stays in
plain numpy. Attribute activations: opacity and color through sigmoid,
rotation normalized to a unit quaternion, scale bounded to (0, anchor scale)
by a sigmoid gate.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nn import MLP
from .scene import AnchorField, PrimitiveBatch

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


class AnchorHeads:
    """The four per-anchor prediction MLPs.

    Input is concat(feature, distance, direction), width d+4; hidden width
    2d with two hidden layers each.
    """

    def __init__(self, d: int, k: int, rng: np.random.Generator):
        self.d, self.k = d, k
        w, inp = 2 * d, d + 4
        self.opacity = MLP([inp, w, w, k], rng)
        self.color = MLP([inp, w, w, 3 * k], rng)
        self.rotation = MLP([inp, w, w, 4 * k], rng)
        self.scale = MLP([inp, w, w, 3 * k], rng)

    def modules(self) -> dict:
        return {
            "opacity_head": self.opacity,
            "color_head": self.color,
            "rotation_head": self.rotation,
            "scale_head": self.scale,
        }


def view_context(positions: np.ndarray, cam_pos: np.ndarray):
    """Distance and unit direction from the camera to each anchor.

    Returns (delta (N,1), dirs (N,3)) as plain arrays; raises on a
    degenerate anchor sitting on the camera center.
    """
    diff = positions - cam_pos
    delta = np.linalg.norm(diff, axis=1, keepdims=True)
    if positions.shape[0] and np.min(delta) < 1e-9:
        raise ValueError("anchor coincides with the camera center")
    return delta, diff / delta


def head_input(feature: ad.Tensor, delta: np.ndarray, dirs: np.ndarray) -> ad.Tensor:
    return ad.concat([feature, ad.tensor(delta), ad.tensor(dirs)], axis=1)


def predict_positions(positions, offsets: ad.Tensor, offset_scaling: ad.Tensor) -> ad.Tensor:
    """position_i = anchor position + offset_i * offset_scaling (elementwise)."""
    n, k = offsets.shape[0], offsets.shape[1]
    base = ad.tensor(np.asarray(positions).reshape(n, 1, 3))
    return base + offsets * ad.reshape(offset_scaling, (n, 1, 3))


def predict_opacity(heads: AnchorHeads, inp: ad.Tensor) -> ad.Tensor:
    return ad.sigmoid(heads.opacity(inp))  # (N,k) in (0,1)


def predict_color(heads: AnchorHeads, inp: ad.Tensor) -> ad.Tensor:
    n = inp.shape[0]
    return ad.reshape(ad.sigmoid(heads.color(inp)), (n, heads.k, 3))


def normalize_quaternions(raw: ad.Tensor) -> ad.Tensor:
    """Unit-normalize (...,4) rows; rows with norm < 1e-9 become identity."""
    n2 = ad.sum_(raw * raw, axis=-1, keepdims=True)
    degenerate = n2.numpy() < 1e-18
    safe = ad.sqrt(ad.clamp(n2, 1e-18, None))
    unit = raw / safe
    if not degenerate.any():
        return unit
    ident = np.broadcast_to(IDENTITY_QUAT, raw.shape)
    return ad.where(np.broadcast_to(degenerate, raw.shape), ad.tensor(ident), unit)


def predict_rotation(heads: AnchorHeads, inp: ad.Tensor) -> ad.Tensor:
    n = inp.shape[0]
    raw = ad.reshape(heads.rotation(inp), (n, heads.k, 4))
    return normalize_quaternions(raw)


def predict_scale(heads: AnchorHeads, inp: ad.Tensor, anchor_scale: ad.Tensor) -> ad.Tensor:
    n = inp.shape[0]
    gate = ad.reshape(ad.sigmoid(heads.scale(inp)), (n, heads.k, 3))
    return ad.reshape(anchor_scale, (n, 1, 3)) * gate  # strictly inside (0, s_a)


def visible_mask(positions, camera, near=0.01, pad=0.1) -> np.ndarray:
    """Frustum test on anchor centers with a padded image border.

    Anchors up to pad*width/height outside the border are kept since their
    primitives have spatial extent.
    """
    cam = camera.to_camera(positions)
    z = cam[:, 2]
    ok = z > near
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * cam[:, 0] / z + camera.cx
        v = camera.fy * cam[:, 1] / z + camera.cy
    w, h = camera.width, camera.height
    ok &= (u >= -pad * w) & (u <= (1 + pad) * w)
    ok &= (v >= -pad * h) & (v <= (1 + pad) * h)
    return ok


def prune_by_opacity(opacity: np.ndarray, tau_alpha: float) -> np.ndarray:
    """Flat indices of primitives with opacity >= threshold, order kept."""
    return np.flatnonzero(opacity.ravel() >= tau_alpha)


def canonical_space(field: AnchorField, heads: AnchorHeads, camera,
                    tau_alpha: float = 0.01, near: float = 0.01,
                    pad: float = 0.1, attrs: dict | None = None,
                    aux_out: dict | None = None) -> PrimitiveBatch:
    """Predict the canonical-space primitive batch for one camera.

    Composition: frustum cull on anchor centers -> view context -> attribute
    heads -> opacity pruning. Output order is anchor-major, offset-minor.
    `attrs` optionally substitutes full-size anchor attribute tensors
    (feature/offsets/offset_scaling/scale), e.g. quantized surrogates.
    `aux_out`, when given a dict, receives the visible anchor indices and
    their pre-pruning opacities (the anchor-management statistics).
    """
    attrs = attrs or {}
    vis = np.flatnonzero(visible_mask(field.positions, camera, near, pad))
    k = field.k
    pos_a = field.positions[vis]
    feat = ad.take(attrs.get("feature", field.feature), vis)
    offsets = ad.take(attrs.get("offsets", field.offsets), vis)
    offset_scaling = ad.take(attrs.get("offset_scaling", field.offset_scaling), vis)
    scale_a = ad.take(attrs.get("scale", field.scale), vis)

    delta, dirs = view_context(pos_a, camera.position)
    inp = head_input(feat, delta, dirs)

    alpha = predict_opacity(heads, inp)  # (V,k)
    color = predict_color(heads, inp)  # (V,k,3)
    rot = predict_rotation(heads, inp)  # (V,k,4)
    scale = predict_scale(heads, inp, scale_a)  # (V,k,3)
    pos = predict_positions(pos_a, offsets, offset_scaling)  # (V,k,3)

    if aux_out is not None:
        aux_out["vis"] = vis
        aux_out["alpha_all"] = alpha.numpy().copy()

    keep = prune_by_opacity(alpha.numpy(), tau_alpha)
    v = len(vis)
    anchor_index = np.repeat(vis, k)[keep]
    offset_index = np.tile(np.arange(k, dtype=np.intp), v)[keep]

    return PrimitiveBatch(
        position=ad.take(ad.reshape(pos, (v * k, 3)), keep),
        opacity=ad.take(ad.reshape(alpha, (v * k, 1)), keep)[:, 0],
        color=ad.take(ad.reshape(color, (v * k, 3)), keep),
        scale=ad.take(ad.reshape(scale, (v * k, 3)), keep),
        rotation=ad.take(ad.reshape(rot, (v * k, 4)), keep),
        anchor_index=anchor_index,
        offset_index=offset_index,
    )
