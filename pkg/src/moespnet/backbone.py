"""Small from-scratch encoder producing stride-8/16/32 feature maps.

Five blocks of two 3x3 conv + ReLU, each followed by a 2x max pool, applied
to the mean-subtracted image.  The outputs of blocks 3, 4 and 5 (after pooling) are the stride-8, 16 and 32 taps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from moespnet import layers as L
from moespnet.config import ModelConfig
from moespnet.params import conv_params
from moespnet.tensor import ShapeError, Tensor


@dataclass
class PyramidFeatures:
    f8: Tensor
    f16: Tensor | None
    f32: Tensor | None


def _specs(cfg: ModelConfig) -> list[tuple[str, L.ConvSpec]]:
    specs = []
    cin = 3
    for b, width in enumerate(cfg.backbone_widths, start=1):
        specs.append((f"backbone.block{b}.conv1", L.ConvSpec(cin, width, 3, padding=1)))
        specs.append((f"backbone.block{b}.conv2", L.ConvSpec(width, width, 3, padding=1)))
        cin = width
    return specs


def init_backbone(cfg: ModelConfig, seed: int, blocks: int = 5) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, spec in _specs(cfg)[:2 * blocks]:
        params.update(conv_params(name, spec, seed))
    return params


def backbone_forward(image: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
                     blocks: int = 5) -> PyramidFeatures:
    """Stride-8/16/32 taps.  With ``blocks=3`` only the stride-8 map is computed
    (the coarser fields are None)."""
    n, c, h, w = image.shape
    if c != 3:
        raise ShapeError(f"backbone expects 3-channel images, got {c}")
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise ShapeError(f"image size {h}x{w} must be divisible by 32")
    x = image
    if cfg.input_mean:
        x = L.add(x, Tensor(np.full(image.shape, -cfg.input_mean, dtype=image.dtype)))
    taps = []
    specs = _specs(cfg)
    for b in range(blocks):
        for name, spec in specs[2 * b:2 * b + 2]:
            x = L.relu(L.conv2d(x, spec, params[name + ".weight"], params[name + ".bias"]))
        x = L.max_pool2x2(x)
        if b >= 2:
            taps.append(x)
    taps += [None] * (3 - len(taps))
    return PyramidFeatures(*taps)
