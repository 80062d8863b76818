"""Tiny MLP layer on top of the autodiff tape.

All prediction heads in the scene model are relu MLPs applied row-wise to
(..., fan_in) inputs. Parameters are float64 during training and get named
so the optimizer and the container format can address them individually.
Init mirrors the uniform fan-in scheme used by common DL frameworks so the
training dynamics stay in familiar territory.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        k = 1.0 / np.sqrt(fan_in)
        self.weight = ad.parameter(rng.uniform(-k, k, size=(fan_in, fan_out)))
        self.bias = ad.parameter(rng.uniform(-k, k, size=(fan_out,)))

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias


class MLP:
    """relu-activated MLP; `sizes` lists [in, hidden..., out] widths."""

    def __init__(self, sizes, rng: np.random.Generator):
        self.sizes = list(sizes)
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        return self.layers[-1](x)

    def parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{i}.weight"] = layer.weight
            out[f"{i}.bias"] = layer.bias
        return out

    def zero_(self):
        for t in self.parameters().values():
            t.data[...] = 0.0


def named_parameters(modules: dict) -> dict:
    """Flatten {module_name: MLP | Tensor} into {dotted_name: Tensor}."""
    flat = {}
    for name, m in modules.items():
        if isinstance(m, ad.Tensor):
            flat[name] = m
        else:
            for sub, t in m.parameters().items():
                flat[f"{name}.{sub}"] = t
    return flat


def cast_f16(params: dict) -> None:
    """Round every parameter to float16 in place (stored-model precision)."""
    for t in params.values():
        t.data[...] = t.data.astype(np.float16).astype(np.float64)
