"""Scene aggregate: anchors, prediction heads, deformation and the entropy
model as one trainable, serializable unit.

The MLP parameter iteration order defined here is also the storage order in
the container format, so both sides must stay in sync with `mlp_modules`.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn, rate, spatial, temporal
from .scene import AnchorField, PrimitiveBatch


@dataclass(frozen=True)
class SceneConfig:
    d: int = 32                    # anchor feature width
    k: int = 10                    # primitives predicted per anchor
    L_x: int = 10                  # position encoding frequencies
    L_t: int = 6                   # time encoding frequencies
    deform_hidden: tuple = (192, 192)
    grid_res3: int = 16
    grid_res2: int = 64
    grid_channels: int = 4
    q0_feature: float = 1.0
    q0_offsets: float = 0.2
    q0_offset_scaling: float = 0.001
    q0_scale: float = 0.001
    tau_alpha: float = 0.01
    near: float = 0.01
    pad: float = 0.1

    def qcfg(self) -> rate.QuantizationConfig:
        return rate.QuantizationConfig(
            feature=self.q0_feature,
            offsets=self.q0_offsets,
            offset_scaling=self.q0_offset_scaling,
            scale=self.q0_scale,
        )


def _grid_domain_for(field: AnchorField) -> np.ndarray:
    """Anchor bounding box padded by 5% per axis (1.0 for flat axes). The
    domain is fixed at creation and travels with the model; queries for
    anchors grown outside it clamp to the boundary."""
    box = field.aabb()
    extent = box[1] - box[0]
    margin = 0.05 * np.where(extent > 0, extent, 1.0)
    return np.stack([box[0] - margin, box[1] + margin])


class DynamicScene:
    def __init__(self, config: SceneConfig, field: AnchorField,
                 heads: spatial.AnchorHeads, deform: temporal.DeformationField,
                 rate_model: rate.RateModel, coding_aabb: np.ndarray | None = None):
        self.config = config
        self.field = field
        self.heads = heads
        self.deform = deform
        self.rate_model = rate_model
        # position lattice box of the stream this model was decoded from;
        # reusing it keeps recompression byte-identical
        self.coding_aabb = None if coding_aabb is None else np.asarray(
            coding_aabb, dtype=np.float64).reshape(2, 3)

    @classmethod
    def from_field(cls, config: SceneConfig, field: AnchorField,
                   rng: np.random.Generator | None = None,
                   grid_domain: np.ndarray | None = None) -> "DynamicScene":
        rng = rng if rng is not None else np.random.default_rng(0)
        heads = spatial.AnchorHeads(config.d, config.k, rng)
        deform = temporal.DeformationField(config.L_x, config.L_t,
                                           config.deform_hidden, rng)
        # zero delta heads: time is an exact no-op until the field trains
        for head in (deform.head_position, deform.head_scale, deform.head_rotation):
            head.weight.data[...] = 0.0
            head.bias.data[...] = 0.0
        if grid_domain is None:
            grid_domain = _grid_domain_for(field)
        rate_model = rate.RateModel(grid_domain, config.d, config.qcfg(),
                                    res3=config.grid_res3, res2=config.grid_res2,
                                    channels=config.grid_channels, rng=rng)
        return cls(config, field, heads, deform, rate_model)

    @property
    def grid_domain(self) -> np.ndarray:
        return self.rate_model.grid.domain

    # ---- parameter bookkeeping ------------------------------------------

    def mlp_modules(self) -> dict:
        """Coded modules in storage order; each layer serializes weight
        then bias."""
        mods = dict(self.heads.modules())
        mods["deform"] = self.deform
        mods["quant_head"] = self.rate_model.quant_head
        mods["prior_head"] = self.rate_model.prior_head
        return mods

    def mlp_parameters(self) -> dict:
        return nn.named_parameters(self.mlp_modules())

    def param_count(self) -> int:
        return sum(int(t.size) for t in self.mlp_parameters().values())

    def state_dict(self) -> dict:
        out = {"positions": self.field.positions.copy()}
        for name, t in self.field.parameters().items():
            out[f"field.{name}"] = t.numpy()
        for name, t in self.mlp_parameters().items():
            out[name] = t.numpy()
        for name, t in self.rate_model.grid.parameters().items():
            out[f"grid.{name}"] = t.numpy()
        if self.coding_aabb is not None:
            out["coding_aabb"] = self.coding_aabb.copy()
        return out

    def load_state_dict(self, sd: dict) -> None:
        positions = np.asarray(sd["positions"], dtype=np.float64)
        self.field = AnchorField(
            positions=positions,
            feature=sd["field.feature"],
            offsets=sd["field.offsets"],
            offset_scaling=sd["field.offset_scaling"],
            scale=sd["field.scale"],
        )
        named = self.mlp_parameters()
        named.update({f"grid.{n}": t for n, t in
                      self.rate_model.grid.parameters().items()})
        for name, t in named.items():
            src = np.asarray(sd[name], dtype=np.float64)
            if src.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{src.shape} vs {t.shape}")
            t.data[...] = src
        self.coding_aabb = (np.asarray(sd["coding_aabb"], dtype=np.float64)
                            if "coding_aabb" in sd else None)

    def clone(self) -> "DynamicScene":
        twin = DynamicScene.from_field(self.config, self.field,
                                       grid_domain=self.grid_domain.copy())
        twin.load_state_dict(self.state_dict())
        return twin

    # ---- quantization plumbing ------------------------------------------

    def rate_quantities(self):
        """Context features and per-anchor (mu, sigma, q), each (n, 4)."""
        h = self.rate_model.context(self.field.positions)
        mu, sigma = self.rate_model.priors(h)
        q = self.rate_model.quant_steps(h)
        return h, mu, sigma, q

    def _broadcast_step(self, q: ad.Tensor, kind: str, shape) -> ad.Tensor:
        col = q[:, rate.KINDS.index(kind) : rate.KINDS.index(kind) + 1]
        if len(shape) == 3:
            return ad.reshape(col, (shape[0], 1, 1))
        return col

    def quantized_attrs(self, mode: str, rng: np.random.Generator | None = None,
                        q: ad.Tensor | None = None) -> dict:
        """Anchor attributes under the active quantization surrogate.

        mode "noisy": v + U(-q/2, q/2), differentiable (training).
        mode "hard":  round-to-lattice via plain numpy (evaluation).
        """
        if q is None:
            _, _, _, q = self.rate_quantities()
        attrs = {}
        for kind in rate.KINDS:
            v = self.field.parameters()[kind]
            step = self._broadcast_step(q, kind, v.shape)
            if mode == "noisy":
                if rng is None:
                    raise ValueError("noisy quantization needs an rng")
                attrs[kind] = rate.noisy_quantize(v, step, rng)
            elif mode == "hard":
                attrs[kind] = ad.tensor(rate.hard_quantize(v.numpy(), step.numpy()))
            else:
                raise ValueError(f"unknown quantization mode: {mode!r}")
        return attrs

    # ---- rendering-side views -------------------------------------------

    def canonical(self, camera, attrs: dict | None = None,
                  aux_out: dict | None = None) -> PrimitiveBatch:
        c = self.config
        return spatial.canonical_space(self.field, self.heads, camera,
                                       tau_alpha=c.tau_alpha, near=c.near,
                                       pad=c.pad, attrs=attrs, aux_out=aux_out)

    def primitives_at(self, camera, t, training: bool = False,
                      attrs: dict | None = None,
                      aux_out: dict | None = None) -> PrimitiveBatch:
        batch = self.canonical(camera, attrs, aux_out=aux_out)
        if batch.position.shape[0] == 0:
            return batch
        dx, ds, dr = self.deform.deform(batch.position, float(t))
        return temporal.apply_deformation(batch, dx, ds, dr, training=training)
