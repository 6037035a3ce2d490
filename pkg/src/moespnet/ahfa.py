"""Adaptive hierarchical feature aggregation over a stride-8/16/32 pyramid.

Each level gets a 1x1 score conv (features -> class scores) and a 3x3 conv +
sigmoid weight head computed from that level's scores alone.  Fusion runs
coarse to fine: A16 = W16*F16 + up(W32*F32), then A8 = W8*F8 + up(WW16*A16)
where WW16 is a fourth head over A16.  With every weight fixed at one this is
plain FCN-8s sum fusion.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from moespnet import layers as L
from moespnet.backbone import PyramidFeatures
from moespnet.config import ModelConfig
from moespnet.params import conv_params
from moespnet.tensor import ShapeError, Tensor

LEVELS = ("8", "16", "32")
WEIGHT_HEADS = ("8", "16", "32", "a16")


@dataclass(frozen=True)
class LevelHead:
    name: str
    score_conv: L.ConvSpec | None
    weight_conv: L.ConvSpec


@dataclass
class AhfaHeads:
    cfg: ModelConfig
    heads: dict[str, LevelHead] = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: ModelConfig) -> "AhfaHeads":
        widths = dict(zip(LEVELS, cfg.backbone_widths[2:]))
        ncls = cfg.num_classes
        heads = {}
        for lvl in WEIGHT_HEADS:
            score = L.ConvSpec(widths[lvl], ncls, 1) if lvl in widths else None
            heads[lvl] = LevelHead(f"ahfa.{lvl}", score, L.ConvSpec(ncls, 1, 3, padding=1))
        return cls(cfg, heads)

    def init_scores(self, seed: int) -> dict[str, Tensor]:
        p = {}
        for lvl in LEVELS:
            h = self.heads[lvl]
            p.update(conv_params(h.name + ".score", h.score_conv, seed))
        return p

    def init_weights(self, seed: int) -> dict[str, Tensor]:
        p = {}
        for lvl in WEIGHT_HEADS:
            h = self.heads[lvl]
            p.update(conv_params(h.name + ".weight", h.weight_conv, seed))
            p[h.name + ".weight.bias"].data[...] = self.cfg.ahfa_weight_bias
        return p


@dataclass
class AhfaOutput:
    scores: dict[str, Tensor]
    weights: dict[str, Tensor]
    a16: Tensor
    a8: Tensor


def weight_map(f: Tensor, head: LevelHead, params: dict[str, Tensor]) -> Tensor:
    """Per-pixel weight in (0, 1): sigmoid of a 3x3 conv over the level's class scores."""
    if f.shape[1] != head.weight_conv.in_channels:
        raise ShapeError(f"weight head {head.name} expects {head.weight_conv.in_channels} channels, got {f.shape[1]}")
    pre = L.conv2d(f, head.weight_conv, params[head.name + ".weight.weight"], params[head.name + ".weight.bias"])
    return L.sigmoid(pre)


def reweight(f: Tensor, w: Tensor) -> Tensor:
    if w.shape[1] != 1 or (w.shape[0], w.shape[2], w.shape[3]) != (f.shape[0], f.shape[2], f.shape[3]):
        raise ShapeError(f"weight map {w.shape} does not fit feature map {f.shape}")
    return L.mul(f, w)


def fuse_stage(h_fine: Tensor, h_coarse: Tensor) -> Tensor:
    nf, cf, hf, wf = h_fine.shape
    nc, cc, hc, wc = h_coarse.shape
    if (nf, cf) != (nc, cc) or (hf, wf) != (2 * hc, 2 * wc):
        raise ShapeError(f"fuse_stage: coarse {h_coarse.shape} is not half of fine {h_fine.shape}")
    return L.add(h_fine, L.bilinear_upsample_2x(h_coarse))


def score_maps(pyr: PyramidFeatures, heads: AhfaHeads, params: dict[str, Tensor]) -> dict[str, Tensor]:
    feats = {"8": pyr.f8, "16": pyr.f16, "32": pyr.f32}
    out = {}
    for lvl in LEVELS:
        h = heads.heads[lvl]
        out[lvl] = L.conv2d(feats[lvl], h.score_conv, params[h.name + ".score.weight"],
                            params[h.name + ".score.bias"])
    return out


def _constant_map(like: Tensor, value: float) -> Tensor:
    n, _, h, w = like.shape
    return Tensor(np.full((n, 1, h, w), value, dtype=like.dtype))


def fuse_scores(scores: dict[str, Tensor], heads: AhfaHeads, params: dict[str, Tensor],
                weight_mode: str = "learned") -> AhfaOutput:
    """Two-stage weighted fusion of class-score maps.

    ``weight_mode`` is "learned" (sigmoid heads) or "unit" (every weight
    clamped to exactly 1, i.e. plain sum fusion).
    """
    def w_of(lvl, f):
        if weight_mode == "unit":
            return _constant_map(f, 1.0)
        if weight_mode != "learned":
            raise ValueError(f"unknown weight_mode {weight_mode!r}")
        return weight_map(f, heads.heads[lvl], params)

    f8, f16, f32 = scores["8"], scores["16"], scores["32"]
    w32 = w_of("32", f32)
    w16 = w_of("16", f16)
    a16 = fuse_stage(reweight(f16, w16), reweight(f32, w32))
    w8 = w_of("8", f8)
    wa16 = w_of("a16", a16)
    a8 = fuse_stage(reweight(f8, w8), reweight(a16, wa16))
    return AhfaOutput(scores, {"8": w8, "16": w16, "32": w32, "a16": wa16}, a16, a8)


def fcn_ahfa_forward(pyr: PyramidFeatures, heads: AhfaHeads, params: dict[str, Tensor],
                     weight_mode: str = "learned") -> AhfaOutput:
    return fuse_scores(score_maps(pyr, heads, params), heads, params, weight_mode)


def fcn_baseline_forward(pyr: PyramidFeatures, heads: AhfaHeads, params: dict[str, Tensor]) -> Tensor:
    """FCN-8s stage-wise sum: A16 = F16 + up(F32); A8 = F8 + up(A16)."""
    s = score_maps(pyr, heads, params)
    a16 = fuse_stage(s["16"], s["32"])
    return fuse_stage(s["8"], a16)
