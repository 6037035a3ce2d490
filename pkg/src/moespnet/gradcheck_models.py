"""Composite gradient-check cases: expert branch, gating variants, MoE loss, AHFA fusion."""
from __future__ import annotations

import numpy as np

from moespnet import ahfa, moe
from moespnet import layers as L
from moespnet.config import ModelConfig
from moespnet.tensor import Tensor


def _labels(rng, n, ncls, h, w):
    lab = rng.integers(0, ncls, size=(n, 1, h, w))
    lab[rng.random(lab.shape) < 0.15] = L.IGNORE_LABEL
    return lab


def _kink_free_expert(expert, names, rng, c1, margin=0.02):
    """Draw expert parameters and input until no ReLU pre-activation is within ``margin`` of 0."""
    for _ in range(1000):
        params = {k: rng.standard_normal(expert.init(0)[k].shape) * 0.7 for k in names}
        x = rng.standard_normal((1, c1, 5, 5))
        t = {k: Tensor(v) for k, v in params.items()}
        h = L.conv2d(Tensor(x), expert.e1, t[expert.name + ".e1.weight"], t[expert.name + ".e1.bias"])
        h2 = L.conv2d(L.relu(h), expert.e2, t[expert.name + ".e2.weight"], t[expert.name + ".e2.bias"])
        if min(np.abs(h.data).min(), np.abs(h2.data).min()) > margin:
            return params, x
    raise RuntimeError("could not draw a kink-free expert instance")


def model_cases(rng: np.random.Generator) -> dict:
    r = rng
    ncls, n_exp, c1, c2 = 3, 2, 2, 3
    expert = moe.Expert.build(0, c1, c2, ncls, dilation=2)
    e_names = sorted(expert.init(0))
    e_params, s_in = _kink_free_expert(expert, e_names, r, c1)

    def expert_case(s, *ws):
        return moe.expert_forward(s, expert, dict(zip(e_names, ws)))[1]

    cfg = ModelConfig(num_classes=ncls, dilations=(1, 2), expert_width=c2, gate_hidden=3)
    variants = {kind: moe.GatingVariant.for_config(kind, cfg, c1) for kind in moe.VARIANTS}

    def gate_case(kind):
        v = variants[kind]
        names = [n + s for n, _ in v.layers for s in (".weight", ".bias")]
        shapes = [shape for _, spec in v.layers for shape in (spec.weight_shape, (1, spec.out_channels, 1, 1))]

        def fn(x, *ws):
            return L.concat_channels(moe.gating_forward(v, x, dict(zip(names, ws))))

        return fn, [r.standard_normal((1, v.in_channels, 4, 4))] + [r.standard_normal(s) * 0.5 for s in shapes]

    lab = _labels(r, 1, ncls, 4, 4)

    def moe_loss_case(p0, p1, g0, g1):
        preds = [L.softmax_channels(p0), L.softmax_channels(p1)]
        gates = L.softmax_over_experts([g0, g1])
        out = moe.MoeOutput([], preds, gates, moe.moe_aggregate(preds, gates))
        return moe.moe_loss(lab, out, upsample=2)

    heads = ahfa.AhfaHeads.build(ModelConfig(num_classes=ncls, backbone_widths=(2, 2, 2, 2, 2)))
    w_names = [f"ahfa.{lvl}.weight.{s}" for lvl in ahfa.WEIGHT_HEADS for s in ("weight", "bias")]
    w_shapes = [s for _ in ahfa.WEIGHT_HEADS for s in ((1, ncls, 3, 3), (1, 1, 1, 1))]

    def ahfa_case(f8, f16, f32, *ws):
        return ahfa.fuse_scores({"8": f8, "16": f16, "32": f32}, heads, dict(zip(w_names, ws))).a8

    return {
        "expert_forward": (expert_case, [s_in] + [e_params[k] for k in e_names]),
        **{f"gating_{k}": gate_case(k) for k in moe.VARIANTS},
        "moe_loss": (moe_loss_case, [r.standard_normal((1, ncls, 2, 2)) for _ in range(2)]
                     + [r.standard_normal((1, 1, 2, 2)) for _ in range(2)]),
        "ahfa_fusion": (ahfa_case, [r.standard_normal((1, ncls, 8, 8)), r.standard_normal((1, ncls, 4, 4)),
                                    r.standard_normal((1, ncls, 2, 2))] + [r.standard_normal(s) * 0.5 for s in w_shapes]),
    }
