"""Differentiable rate model: binary hash-grid context, adaptive
quantization steps, Gaussian priors, and bit estimation.

The context h for an anchor is interpolated from a small dense 3D grid plus
three axis-aligned 2D planes whose stored values are exactly +-1 (real
latents train underneath via a straight-through estimator). Two MLP heads
map h to per-attribute quantization steps q = Q0*(1+tanh(.)) and to the
(mu, sigma) of the Gaussian prior used both for the training-time bit
estimate and for the actual range coder.

Attribute group order is fixed everywhere: feature, offsets,
offset_scaling, scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import MLP

KINDS = ("feature", "offsets", "offset_scaling", "scale")

LOG2E = 1.0 / np.log(2.0)
INV_SQRT2 = 1.0 / np.sqrt(2.0)


@dataclass(frozen=True)
class QuantizationConfig:
    """Base quantization steps per attribute kind."""

    feature: float = 1.0
    offsets: float = 0.2
    offset_scaling: float = 0.001
    scale: float = 0.001

    def __post_init__(self):
        for kind in KINDS:
            if getattr(self, kind) <= 0:
                raise ValueError(f"base step for {kind} must be positive")

    def base_steps(self) -> np.ndarray:
        return np.array([getattr(self, kind) for kind in KINDS])


def binarize(latent: ad.Tensor) -> ad.Tensor:
    """Forward sign (with sign(0)=+1); straight-through backward clipped to
    |latent| <= 1."""
    data = np.where(latent.data >= 0.0, 1.0, -1.0)

    def vjp(g, x=latent.data):
        return g * (np.abs(x) <= 1.0)

    return ad.apply_custom(data, (latent,), (vjp,))


def _interp_weights(coords: np.ndarray, res: int):
    """Corner indices and weights for multilinear interpolation on a unit
    cube grid with `res` vertices per axis; coords in [0,1], clamped."""
    pos = np.clip(coords, 0.0, 1.0) * (res - 1)
    i0 = np.minimum(pos.astype(np.intp), res - 2)
    frac = pos - i0
    return i0, frac


class BinaryHashGrid:
    """One 3D grid plus three axis-aligned 2D planes of +-1 values.

    Dense storage (desk-scale resolutions make collisions unnecessary);
    `domain` is the fixed axis-aligned box queries are normalized over.
    """

    def __init__(self, domain: np.ndarray, res3: int = 16, res2: int = 64,
                 channels: int = 4, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if res3 < 2 or res2 < 2:
            raise ValueError("grid needs at least 2 vertices per axis")
        self.domain = np.asarray(domain, dtype=np.float64).reshape(2, 3)
        self.res3, self.res2, self.channels = res3, res2, channels
        init = lambda *shape: rng.uniform(-0.1, 0.1, size=shape)
        self.grid3d = ad.parameter(init(res3, res3, res3, channels))
        # planes drop axis z, y, x respectively
        self.plane_xy = ad.parameter(init(res2, res2, channels))
        self.plane_xz = ad.parameter(init(res2, res2, channels))
        self.plane_yz = ad.parameter(init(res2, res2, channels))

    def parameters(self) -> dict:
        return {
            "grid3d": self.grid3d,
            "plane_xy": self.plane_xy,
            "plane_xz": self.plane_xz,
            "plane_yz": self.plane_yz,
        }

    @property
    def feature_width(self) -> int:
        return 4 * self.channels

    def value_count(self) -> int:
        return sum(int(t.size) for t in self.parameters().values())

    def coded_values(self) -> np.ndarray:
        """All +-1 values as one flat array, fixed parameter order."""
        return np.concatenate(
            [np.where(t.data >= 0.0, 1.0, -1.0).ravel() for t in self.parameters().values()]
        )

    def normalize(self, positions: np.ndarray) -> np.ndarray:
        lo, hi = self.domain
        extent = np.where(hi - lo > 0, hi - lo, 1.0)
        return np.clip((positions - lo) / extent, 0.0, 1.0)

    def _interp3(self, values: ad.Tensor, coords: np.ndarray) -> ad.Tensor:
        res, c = self.res3, self.channels
        i0, f = _interp_weights(coords, res)
        flat = ad.reshape(values, (res * res * res, c))
        out = None
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    idx = ((i0[:, 0] + dx) * res + (i0[:, 1] + dy)) * res + (i0[:, 2] + dz)
                    wx = f[:, 0] if dx else 1.0 - f[:, 0]
                    wy = f[:, 1] if dy else 1.0 - f[:, 1]
                    wz = f[:, 2] if dz else 1.0 - f[:, 2]
                    w = ad.tensor((wx * wy * wz)[:, None])
                    term = ad.take(flat, idx) * w
                    out = term if out is None else out + term
        return out

    def _interp2(self, values: ad.Tensor, coords: np.ndarray) -> ad.Tensor:
        res, c = self.res2, self.channels
        i0, f = _interp_weights(coords, res)
        flat = ad.reshape(values, (res * res, c))
        out = None
        for dx in (0, 1):
            for dy in (0, 1):
                idx = (i0[:, 0] + dx) * res + (i0[:, 1] + dy)
                wx = f[:, 0] if dx else 1.0 - f[:, 0]
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                w = ad.tensor((wx * wy)[:, None])
                term = ad.take(flat, idx) * w
                out = term if out is None else out + term
        return out

    def query(self, positions: np.ndarray) -> ad.Tensor:
        """Context features h (N, 4*channels); components in [-1, 1]."""
        u = self.normalize(np.asarray(positions, dtype=np.float64))
        parts = [
            self._interp3(binarize(self.grid3d), u),
            self._interp2(binarize(self.plane_xy), u[:, [0, 1]]),
            self._interp2(binarize(self.plane_xz), u[:, [0, 2]]),
            self._interp2(binarize(self.plane_yz), u[:, [1, 2]]),
        ]
        return ad.concat(parts, axis=1)


class RateModel:
    """Hash-grid context plus the quant-step and prior heads."""

    def __init__(self, domain, d: int, qcfg: QuantizationConfig | None = None,
                 res3: int = 16, res2: int = 64, channels: int = 4,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.qcfg = qcfg if qcfg is not None else QuantizationConfig()
        self.grid = BinaryHashGrid(domain, res3, res2, channels, rng)
        w = 2 * d
        hwidth = self.grid.feature_width
        self.quant_head = MLP([hwidth, w, w, len(KINDS)], rng)
        self.prior_head = MLP([hwidth, w, w, 2 * len(KINDS)], rng)

    def modules(self) -> dict:
        mods = {"quant_head": self.quant_head, "prior_head": self.prior_head}
        for name, t in self.grid.parameters().items():
            mods[f"grid.{name}"] = t
        return mods

    def context(self, positions) -> ad.Tensor:
        return self.grid.query(positions)

    def quant_steps(self, h: ad.Tensor) -> ad.Tensor:
        """Adaptive steps (N,4), strictly inside (0, 2*Q0) per kind."""
        base = ad.tensor(self.qcfg.base_steps())
        return base * (1.0 + ad.tanh(self.quant_head(h)))

    def priors(self, h: ad.Tensor):
        """Gaussian prior (mu, sigma), each (N,4); sigma > 1e-4 by
        softplus + floor."""
        out = self.prior_head(h)
        mu = out[:, : len(KINDS)]
        sigma = ad.softplus(out[:, len(KINDS):]) + 1e-4
        return mu, sigma


def noisy_quantize(v: ad.Tensor, q: ad.Tensor, rng: np.random.Generator) -> ad.Tensor:
    """Training-mode quantization surrogate: v + u*q, u ~ U(-1/2, 1/2)."""
    u = rng.uniform(-0.5, 0.5, size=v.shape)
    return v + ad.tensor(u) * q


def hard_quantize(v: np.ndarray, q) -> np.ndarray:
    """Inference quantization: round(v/q)*q, ties away from zero."""
    n = quantize_index(v, q)
    return n * np.asarray(q, dtype=np.float64)


def quantize_index(v: np.ndarray, q) -> np.ndarray:
    """Integer lattice index n with v_hat = n*q."""
    x = np.asarray(v, dtype=np.float64) / np.asarray(q, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def gauss_cdf(z):
    """Standard normal CDF; tensor in, tensor out."""
    if isinstance(z, ad.Tensor):
        return 0.5 * (ad.erf(z * INV_SQRT2) + 1.0)
    from scipy.special import erf

    return 0.5 * (erf(np.asarray(z) * INV_SQRT2) + 1.0)


def prob_mass(v_hat, mu, sigma, q):
    """Mass the Gaussian prior puts on the step-q bin centered at v_hat,
    floored at 1e-9 so the log stays finite."""
    upper = gauss_cdf((v_hat - mu + 0.5 * q) / sigma)
    lower = gauss_cdf((v_hat - mu - 0.5 * q) / sigma)
    p = upper - lower
    if isinstance(p, ad.Tensor):
        return ad.maximum(p, 1e-9)
    return np.maximum(p, 1e-9)


def attribute_bits(v_hat, mu, sigma, q):
    """Total -log2 prob_mass over one attribute group (differentiable)."""
    p = prob_mass(v_hat, mu, sigma, q)
    neg_log2 = -LOG2E * ad.log(p) if isinstance(p, ad.Tensor) else -np.log2(p)
    return ad.sum_(neg_log2) if isinstance(p, ad.Tensor) else np.sum(neg_log2)


def anchor_bits(values: dict, mu, sigma, q):
    """Estimated bits to code the four anchor attribute groups.

    values maps kind -> (quantized) tensor; per anchor each kind shares one
    (mu, sigma, q) triple, broadcast over that group's channels.
    """
    total = None
    for j, kind in enumerate(KINDS):
        v = values[kind]
        n = v.shape[0]
        trail = (1,) * (v.ndim - 1)
        mu_j = ad.reshape(mu[:, j], (n, *trail))
        sigma_j = ad.reshape(sigma[:, j], (n, *trail))
        q_j = ad.reshape(q[:, j], (n, *trail))
        bits = attribute_bits(v, mu_j, sigma_j, q_j)
        total = bits if total is None else total + bits
    return total


def hash_bits(grid: BinaryHashGrid, values: ad.Tensor | None = None):
    """Empirical-entropy bits for the +-1 grid values.

    With `values` (the straight-through binarized tensors, concatenated)
    the estimate is differentiable; without, it is evaluated from stored
    signs. 0*log(0) counts as 0.
    """
    if values is None:
        coded = grid.coded_values()
        total = coded.size
        if total == 0:
            raise ValueError("empty hash grid")
        n_pos = float(np.count_nonzero(coded > 0))
        n_neg = total - n_pos
        out = 0.0
        for n in (n_pos, n_neg):
            if n > 0:
                out += n * -np.log2(n / total)
        return out
    total = float(values.size)
    if total == 0:
        raise ValueError("empty hash grid")
    n_pos = ad.sum_((values + 1.0) * 0.5)
    n_neg = total - n_pos
    bits = None
    for n in (n_pos, n_neg):
        term = n * (-LOG2E) * ad.log(ad.maximum(n * (1.0 / total), 1e-12))
        bits = term if bits is None else bits + term
    return bits
