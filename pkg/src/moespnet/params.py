"""Parameter creation.

Each parameter draws from its own generator keyed by (seed, crc32(name)), so
initial values do not depend on construction order and adding a head later
leaves every existing parameter untouched.
"""
from __future__ import annotations

import zlib

import numpy as np

from moespnet.layers import ConvSpec
from moespnet.tensor import Tensor, default_dtype, seed_rng


def param_rng(seed: int, name: str) -> np.random.Generator:
    return seed_rng([seed, zlib.crc32(name.encode())])


def conv_params(name: str, spec: ConvSpec, seed: int, zero: bool = False) -> dict[str, Tensor]:
    """He-style uniform weights (bound sqrt(6 / fan_in)) and zero bias."""
    if zero:
        w = np.zeros(spec.weight_shape)
    else:
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        bound = np.sqrt(6.0 / fan_in)
        w = param_rng(seed, name + ".weight").uniform(-bound, bound, spec.weight_shape)
    return {
        name + ".weight": Tensor(w.astype(default_dtype()), requires_grad=True, name=name + ".weight"),
        name + ".bias": Tensor(np.zeros((1, spec.out_channels, 1, 1), dtype=default_dtype()),
                               requires_grad=True, name=name + ".bias"),
    }


def count_weights(params: dict[str, Tensor], prefix: str = "") -> int:
    """Number of kernel weights (biases excluded) under ``prefix``."""
    return sum(t.data.size for k, t in params.items() if k.startswith(prefix) and k.endswith(".weight"))
