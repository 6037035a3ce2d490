"""Complete segmentation networks: backbone plus one of the six head kinds.

Stage 1 trains the plain head (uniform expert average, or FCN-8s sum fusion).
Stage 2 adds the gating / weight heads and trains everything.  Baseline kinds
simply keep training their stage-1 head in stage 2.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from moespnet import ahfa
from moespnet import layers as L
from moespnet import moe
from moespnet.backbone import backbone_forward, init_backbone
from moespnet.config import GATING_KINDS, MODEL_KINDS, ModelConfig
from moespnet.tensor import Tensor, no_grad

OUTPUT_STRIDE = 8


@dataclass
class Forward:
    out: Tensor                      # stride-8 map: probabilities (prob mode) or logits
    form: str                        # "prob" | "logit"
    moe: moe.MoeOutput | None = None
    ahfa: ahfa.AhfaOutput | None = None


class SegmentationModel:
    def __init__(self, kind: str, cfg: ModelConfig, seed: int = 0, stage: int = 1):
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.cfg = cfg
        self.seed = seed
        # the MoE head reads only the stride-8 tap, so blocks 4-5 are not built
        self.blocks = 3 if kind in GATING_KINDS else 5
        self.params: dict[str, Tensor] = init_backbone(cfg, seed, self.blocks)
        self.stage = 1
        self.head_names: tuple[str, ...] = ()   # parameters attached by enter_stage2
        c1 = cfg.backbone_widths[2]
        if self.is_moe:
            self.experts = [moe.Expert.build(i, c1, cfg.expert_width, cfg.num_classes, d)
                            for i, d in enumerate(cfg.dilations)]
            for e in self.experts:
                self.params.update(e.init(seed))
            kind_code = GATING_KINDS[kind]
            self.variant = moe.GatingVariant.for_config(kind_code, cfg, c1) if kind_code else None
        else:
            self.heads = ahfa.AhfaHeads.build(cfg)
            self.params.update(self.heads.init_scores(seed))
        if stage == 2:
            self.enter_stage2()

    @property
    def is_moe(self) -> bool:
        return self.kind in GATING_KINDS

    @property
    def has_adaptive_head(self) -> bool:
        return self.kind in ("moe-spnet", "moe-spnet-cf", "moe-spnet-ef", "fcn-ahfa")

    def enter_stage2(self) -> None:
        """Attach gating / weight heads (fresh init) on top of the current parameters."""
        if self.stage == 2:
            return
        self.stage = 2
        fresh = {}
        if self.is_moe and self.variant is not None:
            fresh = self.variant.init(self.seed, zero_output=self.cfg.gate_zero_init)
        elif self.kind == "fcn-ahfa":
            fresh = self.heads.init_weights(self.seed)
        self.params.update(fresh)
        self.head_names = tuple(fresh)

    @property
    def gating_active(self) -> bool:
        return self.stage == 2 and self.has_adaptive_head

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- forward ------------------------------------------------------------

    def forward(self, image: Tensor, force_uniform: bool = False) -> Forward:
        pyr = backbone_forward(image, self.params, self.cfg, self.blocks)
        if self.is_moe:
            return self._forward_moe(pyr.f8, force_uniform)
        if self.gating_active and not force_uniform:
            out = ahfa.fcn_ahfa_forward(pyr, self.heads, self.params)
            return Forward(out.a8, "logit", ahfa=out)
        return Forward(ahfa.fcn_baseline_forward(pyr, self.heads, self.params), "logit")

    def _forward_moe(self, s: Tensor, force_uniform: bool) -> Forward:
        prob = self.cfg.aggregation == "prob"
        feats, preds = [], []
        for e in self.experts:
            f, p = moe.expert_forward(s, e, self.params, probabilities=prob)
            feats.append(f)
            preds.append(p)
        if self.gating_active and not force_uniform:
            x = moe.gating_input(self.variant, s, feats, preds)
            gates = moe.gating_forward(self.variant, x, self.params)
        else:
            gates = moe.uniform_gates(preds[0], len(preds))
        agg = moe.moe_aggregate(preds, gates)
        out = moe.MoeOutput(feats, preds, gates, agg)
        return Forward(agg, "prob" if prob else "logit", moe=out)

    def loss(self, image: Tensor, labels: np.ndarray) -> Tensor:
        fwd = self.forward(image)
        if fwd.moe is not None:
            return moe.moe_loss(labels, fwd.moe, form=fwd.form, normalize=self.cfg.phi_normalize,
                                upsample=OUTPUT_STRIDE)
        return L.phi_loss(L.bilinear_upsample(fwd.out, OUTPUT_STRIDE), labels, form="logit")

    def predict_proba(self, image: Tensor) -> np.ndarray:
        """Per-class probabilities at input resolution, shape (N, L, H, W)."""
        with no_grad():
            fwd = self.forward(image)
            up = L.bilinear_upsample(fwd.out, OUTPUT_STRIDE)
            if fwd.form == "logit":
                return L.softmax_channels(up).data
            return up.data / np.maximum(up.data.sum(axis=1, keepdims=True), L.PROB_FLOOR)

    def predict(self, image: Tensor) -> np.ndarray:
        return self.predict_proba(image).argmax(axis=1)

    def gate_maps(self, image: Tensor) -> dict[str, np.ndarray]:
        """Named (N,H,W) weight maps: ``gate_expert{i}`` for MoE, ``ahfa_w{8,16,32}`` for AHFA."""
        with no_grad():
            fwd = self.forward(image)
        if fwd.moe is not None:
            return {f"gate_expert{i}": g.data[:, 0] for i, g in enumerate(fwd.moe.gate_maps)}
        if fwd.ahfa is not None:
            return {f"ahfa_w{lvl}": fwd.ahfa.weights[lvl].data[:, 0] for lvl in ("8", "16", "32")}
        raise ValueError(f"{self.kind} (stage {self.stage}) has no weight maps")
