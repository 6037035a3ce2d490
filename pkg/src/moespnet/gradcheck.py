"""Central finite-difference checks for every differentiable op.

Each case builds a small random instance in 64-bit mode, reduces the op output
to a scalar through a fixed random projection, and compares the analytic
gradient of every input against (f(x+e) - f(x-e)) / 2e with
e = 1e-4 * max(1, |x|).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from moespnet import layers as L
from moespnet.tensor import Tensor, backward, precision, seed_rng


@dataclass
class GradReport:
    op: str
    max_rel_error: float
    frac_below_tol: float
    passed: bool


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # absolute floor keeps near-zero coordinates from dominating
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


def check_function(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
                   tol: float = 1e-4, loose_tol: float = 1e-2, min_frac: float = 0.99,
                   name: str = "fn") -> GradReport:
    """Compare analytic and numeric gradients of ``sum(proj * fn(*inputs))``."""
    with precision(64):
        tensors = [Tensor(x, requires_grad=True) for x in inputs]
        out = fn(*tensors)
        proj = rng.standard_normal(out.shape)

        def scalar(arrs):
            ts = [Tensor(a) for a in arrs]
            return float((fn(*ts).data * proj).sum())

        loss = L.sum_all(L.mul(out, Tensor(proj)))
        backward(loss)
        errs = []
        for i, t in enumerate(tensors):
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = np.zeros_like(t.data)
            base = [a.copy() for a in inputs]
            flat = base[i].reshape(-1)
            for j in range(flat.size):
                x0 = flat[j]
                eps = 1e-4 * max(1.0, abs(x0))
                flat[j] = x0 + eps
                fp = scalar(base)
                flat[j] = x0 - eps
                fm = scalar(base)
                flat[j] = x0
                numeric.reshape(-1)[j] = (fp - fm) / (2 * eps)
            errs.append(_rel_err(analytic.reshape(-1), numeric.reshape(-1)))
        err = np.concatenate(errs)
    frac = float((err < tol).mean())
    worst = float(err.max())
    return GradReport(name, worst, frac, frac >= min_frac and worst < loose_tol)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _ties_free(rng, shape):
    # distinct values so max-pool has no ties within finite-difference reach
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / n * 2 - 1).astype(np.float64)


def _labels(rng, n, ncls, h, w, ignore_frac=0.2):
    lab = rng.integers(0, ncls, size=(n, 1, h, w))
    lab[rng.random(lab.shape) < ignore_frac] = L.IGNORE_LABEL
    return lab


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    r = rng
    conv_spec = L.ConvSpec(2, 3, 3, stride=1, padding=1, dilation=1)
    dil_spec = L.ConvSpec(2, 2, 3, stride=1, padding=2, dilation=2)
    strided = L.ConvSpec(2, 2, 3, stride=2, padding=1, dilation=1)
    one = L.ConvSpec(3, 2, 1)
    lab = _labels(r, 2, 3, 3, 4)
    return {
        "add": (L.add, [r.standard_normal((2, 2, 3, 3)), r.standard_normal((2, 2, 3, 3))]),
        "add_n": (lambda a, b, c: L.add_n([a, b, c]), [r.standard_normal((1, 2, 3, 3)) for _ in range(3)]),
        "mul": (L.mul, [r.standard_normal((2, 3, 3, 3)), r.standard_normal((2, 1, 3, 3))]),
        "scale": (lambda a: L.scale(a, -1.7), [r.standard_normal((1, 2, 3, 3))]),
        "relu": (L.relu, [_away_from_zero(r, (2, 2, 3, 3))]),
        "sigmoid": (L.sigmoid, [r.standard_normal((2, 2, 3, 3)) * 3]),
        "sum": (L.sum_all, [r.standard_normal((2, 2, 3, 3))]),
        "mean": (L.mean_all, [r.standard_normal((2, 2, 3, 3))]),
        "concat": (lambda a, b: L.concat_channels([a, b]),
                   [r.standard_normal((1, 3, 2, 2)), r.standard_normal((1, 2, 2, 2))]),
        "split": (lambda a: L.split_channels(a, [1, 3])[1], [r.standard_normal((1, 4, 2, 3))]),
        "softmax": (L.softmax_channels, [r.standard_normal((2, 4, 3, 3))]),
        "softmax_over_experts": (lambda a, b, c: L.concat_channels(L.softmax_over_experts([a, b, c])),
                                 [r.standard_normal((2, 1, 3, 3)) for _ in range(3)]),
        "conv2d": (lambda x, w, b: L.conv2d(x, conv_spec, w, b),
                   [r.standard_normal((2, 2, 5, 5)), r.standard_normal(conv_spec.weight_shape),
                    r.standard_normal((1, 3, 1, 1))]),
        "conv2d_dilated": (lambda x, w, b: L.conv2d(x, dil_spec, w, b),
                           [r.standard_normal((1, 2, 5, 5)), r.standard_normal(dil_spec.weight_shape),
                            r.standard_normal((1, 2, 1, 1))]),
        "conv2d_strided": (lambda x, w: L.conv2d(x, strided, w),
                           [r.standard_normal((1, 2, 5, 5)), r.standard_normal(strided.weight_shape)]),
        "conv1x1": (lambda x, w, b: L.conv2d(x, one, w, b),
                    [r.standard_normal((2, 3, 3, 3)), r.standard_normal(one.weight_shape),
                     r.standard_normal((1, 2, 1, 1))]),
        "max_pool": (L.max_pool2x2, [_ties_free(r, (2, 2, 4, 4))]),
        "upsample2x": (L.bilinear_upsample_2x, [r.standard_normal((1, 2, 3, 2))]),
        "upsample8x": (lambda x: L.bilinear_upsample(x, 8), [r.standard_normal((1, 1, 2, 2))]),
        "phi_logit": (lambda p: L.phi_loss(p, lab, form="logit"), [r.standard_normal((2, 3, 3, 4))]),
        "phi_prob": (lambda p: L.phi_loss(p, lab, form="prob"), [r.uniform(0.1, 1.0, (2, 3, 3, 4))]),
        "phi_prob_unnormalized": (lambda p: L.phi_loss(p, lab, form="prob", normalize=False),
                                  [r.uniform(0.1, 1.0, (2, 3, 3, 4))]),
    }


def composite_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """Whole-head cases; imported lazily to keep this module free of model deps."""
    from moespnet.gradcheck_models import model_cases
    return model_cases(rng)


def op_names() -> list[str]:
    rng = seed_rng(0)
    return list(_cases(rng)) + list(composite_cases(rng))


def run(ops: list[str] | None = None, seed: int = 0, tol: float = 1e-4) -> list[GradReport]:
    rng = seed_rng(seed)
    cases = {**_cases(rng), **composite_cases(rng)}
    names = list(cases) if not ops or ops == ["all"] else ops
    reports = []
    for name in names:
        if name not in cases:
            raise KeyError(f"unknown op {name!r}; choose from {sorted(cases)}")
        fn, inputs = cases[name]
        reports.append(check_function(fn, inputs, seed_rng([seed, len(reports)]), tol=tol, name=name))
    return reports
