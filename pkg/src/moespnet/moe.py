"""Convolutional mixture-of-experts head.

N experts share one input map.  Expert i applies a 3x3 conv with its own
dilation rate, then two 1x1 convs, giving hidden features and a per-class
prediction map.  A gating network turns either the shared input (CF), the
concatenated expert features (EF) or the concatenated expert predictions (P)
into N per-pixel logits; a softmax across experts gives the weight maps, and
the head output is the weighted sum of expert predictions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from moespnet import layers as L
from moespnet.config import ModelConfig
from moespnet.params import conv_params
from moespnet.tensor import ContractError, Tensor

VARIANTS = ("CF", "EF", "P")


class GatingConfigError(ValueError):
    """Gating variant and the supplied inputs do not agree."""


@dataclass(frozen=True)
class Expert:
    name: str
    e1: L.ConvSpec
    e2: L.ConvSpec
    e3: L.ConvSpec

    @classmethod
    def build(cls, index: int, in_channels: int, hidden: int, num_classes: int, dilation: int) -> "Expert":
        return cls(
            name=f"moe.expert{index}",
            # padding = dilation keeps the spatial size
            e1=L.ConvSpec(in_channels, hidden, 3, padding=dilation, dilation=dilation),
            e2=L.ConvSpec(hidden, hidden, 1),
            e3=L.ConvSpec(hidden, num_classes, 1),
        )

    def init(self, seed: int) -> dict[str, Tensor]:
        p = {}
        for tag, spec in (("e1", self.e1), ("e2", self.e2), ("e3", self.e3)):
            p.update(conv_params(f"{self.name}.{tag}", spec, seed))
        return p


@dataclass(frozen=True)
class GatingVariant:
    kind: str
    num_experts: int
    in_channels: int
    hidden: int
    two_layer: bool = True

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise GatingConfigError(f"unknown gating variant {self.kind!r}")

    @classmethod
    def for_config(cls, kind: str, cfg: ModelConfig, c1: int) -> "GatingVariant":
        n = cfg.num_experts
        cin = {"CF": c1, "EF": n * cfg.expert_width, "P": n * cfg.num_classes}[kind]
        two = cfg.gating_two_layer if kind == "P" else True
        return cls(kind, n, cin, cfg.gate_hidden, two)

    @property
    def layers(self) -> list[tuple[str, L.ConvSpec]]:
        if not self.two_layer:
            return [("moe.gate.g1", L.ConvSpec(self.in_channels, self.num_experts, 3, padding=1))]
        return [("moe.gate.g1", L.ConvSpec(self.in_channels, self.hidden, 3, padding=1)),
                ("moe.gate.g2", L.ConvSpec(self.hidden, self.num_experts, 1))]

    def init(self, seed: int, zero_output: bool = True) -> dict[str, Tensor]:
        p = {}
        specs = self.layers
        for i, (name, spec) in enumerate(specs):
            p.update(conv_params(name, spec, seed, zero=zero_output and i == len(specs) - 1))
        return p


@dataclass
class MoeOutput:
    features: list[Tensor]       # per-expert hidden features (after e2)
    expert_preds: list[Tensor]   # per-expert class maps (after e3, softmax in prob mode)
    gate_maps: list[Tensor]      # per-expert (N,1,H,W) weights, summing to one per pixel
    aggregate: Tensor


def expert_forward(s: Tensor, expert: Expert, params: dict[str, Tensor],
                   probabilities: bool = True) -> tuple[Tensor, Tensor]:
    def conv(x, tag, spec):
        return L.conv2d(x, spec, params[f"{expert.name}.{tag}.weight"], params[f"{expert.name}.{tag}.bias"])

    h = L.relu(conv(s, "e1", expert.e1))
    feats = L.relu(conv(h, "e2", expert.e2))
    pred = conv(feats, "e3", expert.e3)
    if probabilities:
        pred = L.softmax_channels(pred)
    return feats, pred


def gating_logits(variant: GatingVariant, x: Tensor, params: dict[str, Tensor]) -> list[Tensor]:
    if x.shape[1] != variant.in_channels:
        raise GatingConfigError(
            f"{variant.kind} gating expects {variant.in_channels} input channels, got {x.shape[1]}")
    specs = variant.layers
    for i, (name, spec) in enumerate(specs):
        x = L.conv2d(x, spec, params[name + ".weight"], params[name + ".bias"])
        if i < len(specs) - 1:
            x = L.relu(x)
    if variant.num_experts == 1:
        return [x]
    return L.split_channels(x, [1] * variant.num_experts)


def gating_input(variant: GatingVariant, shared: Tensor, features: Sequence[Tensor],
                 preds: Sequence[Tensor]) -> Tensor:
    if variant.kind == "CF":
        return shared
    src = features if variant.kind == "EF" else preds
    return L.concat_channels(list(src)) if len(src) > 1 else src[0]


def gating_forward(variant: GatingVariant, x: Tensor, params: dict[str, Tensor]) -> list[Tensor]:
    """Gate weight maps from the variant's input (already concatenated for EF / P)."""
    return L.softmax_over_experts(gating_logits(variant, x, params))


def uniform_gates(like: Tensor, n: int) -> list[Tensor]:
    nb, _, h, w = like.shape
    g = np.full((nb, 1, h, w), 1.0 / n, dtype=like.dtype)
    return [Tensor(g) for _ in range(n)]


def moe_aggregate(preds: Sequence[Tensor], gates: Sequence[Tensor]) -> Tensor:
    """Sum over experts of prediction * gate, gates broadcast over class channels."""
    if len(preds) != len(gates) or not preds:
        raise L.ShapeError(f"{len(preds)} predictions vs {len(gates)} gate maps")
    return L.add_n([L.mul(p, g) for p, g in zip(preds, gates)])


def aspp_sum(preds: Sequence[Tensor]) -> Tensor:
    """Plain summation of expert outputs (DeepLab-ASPP aggregation)."""
    return L.add_n(list(preds))


def moe_loss(labels: np.ndarray, out: MoeOutput, form: str = "prob", normalize: bool = True,
             upsample: int = 1, ignore_label: int = L.IGNORE_LABEL) -> Tensor:
    """Loss on the aggregate plus one loss per gated expert map (gate factors dropped)."""
    def resize(t):
        return L.bilinear_upsample(t, upsample) if upsample > 1 else t

    terms = [L.phi_loss(resize(out.aggregate), labels, form, normalize, ignore_label)]
    for p, g in zip(out.expert_preds, out.gate_maps):
        terms.append(L.phi_loss(resize(L.mul(p, g)), labels, form, normalize, ignore_label))
    return L.add_n(terms)


# -- classic mixture-of-experts error functions ------------------------------

def _check_simplex(gates: np.ndarray) -> None:
    if np.any(gates < -1e-6) or abs(float(gates.sum()) - 1.0) > 1e-6:
        raise ContractError(f"gate weights must lie on the simplex, got sum {float(gates.sum())!r}")


def coop_error(y, outputs, gates) -> float:
    """||y - sum_i g_i o_i||^2: every expert is trained against the blended output."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    o = np.asarray(outputs, dtype=np.float64).reshape(len(gates), -1)
    g = np.asarray(gates, dtype=np.float64)
    _check_simplex(g)
    # sum_i g_i (y - o_i) rather than y - sum_i g_i o_i: equal on the simplex, and exactly
    # zero when every expert matches the target even if sum(g) is off by an ulp
    r = g @ (y - o)
    return float((r * r).sum())


def comp_error(y, outputs, gates) -> float:
    """sum_i g_i ||y - o_i||^2: each expert is judged on its own output."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    o = np.asarray(outputs, dtype=np.float64).reshape(len(gates), -1)
    g = np.asarray(gates, dtype=np.float64)
    _check_simplex(g)
    return float(g @ ((y - o) ** 2).sum(axis=1))


def gating_param_count(kind: str, n: int, c1: int = 0, c2: int = 0, c3: int = 0, c4: int = 0) -> int:
    """Gating-network weight count (biases excluded) for each variant."""
    if kind == "CF":
        return c1 * c4 * 3 * 3 + c4 * n * 1 * 1
    if kind == "EF":
        return n * c2 * c4 * 3 * 3 + c4 * n * 1 * 1
    if kind == "P":
        return n * c3 * n * 3 * 3
    raise GatingConfigError(f"unknown gating variant {kind!r}")
