"""Differentiable layer functions on rank-4 tensors.

All functions are pure in their inputs.  Reductions run in a fixed order so a
given build produces bit-identical results run to run.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from moespnet.tensor import ShapeError, Tensor, make_result

IGNORE_LABEL = 255
PROB_FLOOR = 1e-12


class EmptyLossWarning(UserWarning):
    """Every pixel of a loss evaluation carried the ignore label."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _broadcast_shape(a: tuple, b: tuple, what: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{what}: cannot broadcast {a} with {b}") from None


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    """Sum of same-shape tensors, accumulated left to right."""
    if not xs:
        raise ShapeError("add_n needs at least one tensor")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise ShapeError(f"add_n needs identical shapes, got {shape} and {x.shape}")
    acc = xs[0].data.copy()
    for x in xs[1:]:
        acc += x.data
    return make_result(acc, "add_n", tuple(xs), lambda g: [g] * len(xs))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a (N,1,H,W) map broadcasts over channels."""
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return make_result(ad * bd, "mul", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return make_result(x.data * c, "scale", (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, "relu", (x,),
                       lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return make_result(y, "sigmoid", (x,), lambda g: (g * y * (1 - y),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return make_result(out, "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# -- channel plumbing --------------------------------------------------------

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for x in xs:
        if (x.shape[0], x.shape[2], x.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {x.shape} does not match batch/spatial {(n, h, w)}")
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])

    def bw(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    return make_result(np.concatenate([x.data for x in xs], axis=1), "concat", tuple(xs), bw)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    outs = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(make_result(x.data[:, lo:hi].copy(), "split", (x,), bw))
        start = hi
    return outs


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return make_result(y, "softmax", (x,), bw)


def softmax_over_experts(gates: Sequence[Tensor]) -> list[Tensor]:
    """Turn N single-channel logit maps into N per-pixel weights that sum to one."""
    if not gates:
        raise ShapeError("softmax_over_experts needs at least one map")
    shape = gates[0].shape
    for gmap in gates:
        if gmap.shape != shape:
            raise ShapeError(f"gate map shapes differ: {shape} vs {gmap.shape}")
        if gmap.shape[1] != 1:
            raise ShapeError(f"gate maps must have one channel, got {gmap.shape}")
    stacked = concat_channels(gates) if len(gates) > 1 else gates[0]
    w = softmax_channels(stacked)
    return split_channels(w, [1] * len(gates)) if len(gates) > 1 else [w]


# -- convolution -------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        for f in ("in_channels", "out_channels", "kernel", "stride", "dilation"):
            if getattr(self, f) < 1:
                raise ValueError(f"ConvSpec.{f} must be positive, got {getattr(self, f)}")
        if self.padding < 0:
            raise ValueError(f"ConvSpec.padding must be non-negative, got {self.padding}")

    @property
    def extent(self) -> int:
        return self.kernel + (self.kernel - 1) * (self.dilation - 1)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.extent) // self.stride + 1
        wo = (w + 2 * self.padding - self.extent) // self.stride + 1
        return ho, wo

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


def _live_taps(size_in: int, size_out: int, k: int, d: int, stride: int, pad: int) -> list[int]:
    """Kernel offsets whose sampling window touches at least one real input row/col."""
    taps = []
    for u in range(k):
        first = u * d - pad
        last = first + (size_out - 1) * stride
        if last >= 0 and first <= size_in - 1:
            taps.append(u)
    return taps


def _batch_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum_n a[n] @ b[n].T, accumulated in batch order."""
    acc = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        acc += a[i] @ b[i].T
    return acc


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation with zero padding, stride and dilation.

    Lowered to one batched matmul over gathered kernel taps (im2col).  Taps
    whose window only ever reads padding are dropped, and so are taps whose
    kernel slice is all zero in the forward pass; both contribute exact zeros.
    """
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weight.shape}, spec expects {spec.weight_shape}")
    if bias is not None and bias.shape != (1, spec.out_channels, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected {(1, spec.out_channels, 1, 1)}")
    ho, wo = spec.output_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output size {ho}x{wo} < 1 for input {h}x{w} and {spec}")
    k, d, s, p = spec.kernel, spec.dilation, spec.stride, spec.padding
    o = spec.out_channels
    xd, wd = x.data, weight.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    if k == 1 and s == 1 and p == 0:
        xm = xd.reshape(n, c, h * w)
        wm = wd.reshape(o, c)
        out = np.matmul(wm, xm)
        if bias is not None:
            out += bias.data.reshape(1, o, 1)

        def bw1(g):
            gm = g.reshape(n, o, h * w)
            gx = np.matmul(wm.T, gm).reshape(x.shape) if x.requires_grad else None
            gw = _batch_outer(gm, xm).reshape(wd.shape) if weight.requires_grad else None
            res = [gx, gw]
            if bias is not None:
                res.append(gm.sum(axis=(0, 2)).reshape(1, o, 1, 1) if bias.requires_grad else None)
            return res

        return make_result(out.reshape(n, o, h, w), "conv2d", inputs, bw1)

    live = [(u, v) for u in _live_taps(h, ho, k, d, s, p) for v in _live_taps(w, wo, k, d, s, p)]
    if p:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=xd.dtype)
        xp[:, :, p:p + h, p:p + w] = xd
    else:
        xp = xd
    span_h = (ho - 1) * s + 1
    span_w = (wo - 1) * s + 1

    def window(arr, u, v):
        return arr[:, :, u * d:u * d + span_h:s, v * d:v * d + span_w:s]

    def gather(taps):
        if not taps:
            return np.zeros((n, 0, ho * wo), dtype=xd.dtype)
        return np.stack([window(xp, u, v) for u, v in taps], axis=1).reshape(n, len(taps) * c, ho * wo)

    def kernel_matrix(taps):
        return np.stack([wd[:, :, u, v] for u, v in taps], axis=1).reshape(o, len(taps) * c)

    fwd_taps = [t for t in live if wd[:, :, t[0], t[1]].any()]
    fwd_cols = gather(fwd_taps) if fwd_taps else None
    if fwd_taps:
        out = np.matmul(kernel_matrix(fwd_taps), fwd_cols)
    else:
        out = np.zeros((n, o, ho * wo), dtype=xd.dtype)
    if bias is not None:
        out += bias.data.reshape(1, o, 1)

    def bw(g):
        gm = g.reshape(n, o, ho * wo)
        res = [None, None]
        if not live:
            res = [np.zeros_like(xd) if x.requires_grad else None,
                   np.zeros_like(wd) if weight.requires_grad else None]
        else:
            if x.requires_grad:
                dcols = np.matmul(kernel_matrix(live).T, gm).reshape(n, len(live), c, ho, wo)
                gxp = np.zeros_like(xp)
                for i, (u, v) in enumerate(live):
                    window(gxp, u, v)[...] += dcols[:, i]
                res[0] = gxp[:, :, p:p + h, p:p + w] if p else gxp
            if weight.requires_grad:
                cols = fwd_cols if fwd_taps == live else gather(live)
                gk = _batch_outer(gm, cols).reshape(o, len(live), c)
                gw = np.zeros_like(wd)
                for i, (u, v) in enumerate(live):
                    gw[:, :, u, v] = gk[:, i]
                res[1] = gw
        if bias is not None:
            res.append(gm.sum(axis=(0, 2)).reshape(1, o, 1, 1) if bias.requires_grad else None)
        return res

    return make_result(out.reshape(n, o, ho, wo), "conv2d", inputs, bw)


def zero_insert_kernel(weight: np.ndarray, dilation: int) -> np.ndarray:
    """Expand a (O,C,k,k) kernel to extent k+(k-1)(d-1) by inserting zeros between taps."""
    o, c, k, _ = weight.shape
    ext = k + (k - 1) * (dilation - 1)
    out = np.zeros((o, c, ext, ext), dtype=weight.dtype)
    out[:, :, ::dilation, ::dilation] = weight
    return out


# -- pooling and resampling --------------------------------------------------

def max_pool2x2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pool; ties go to the first element in row-major scan order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result(out, "max_pool", (x,), bw)


def bilinear_matrix(size_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(size_in*factor, size_in) interpolation matrix, align-corners-false with border clamp."""
    size_out = size_in * factor
    m = np.zeros((size_out, size_in), dtype=dtype)
    for t in range(size_out):
        src = (t + 0.5) / factor - 0.5
        src = min(max(src, 0.0), size_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, size_in - 1)
        frac = src - i0
        m[t, i0] += 1.0 - frac
        m[t, i1] += frac
    return m


_BILINEAR_CACHE: dict[tuple, np.ndarray] = {}


def _bilinear_cached(size_in: int, factor: int, dtype) -> np.ndarray:
    key = (size_in, factor, np.dtype(dtype).str)
    m = _BILINEAR_CACHE.get(key)
    if m is None:
        m = bilinear_matrix(size_in, factor).astype(dtype)
        _BILINEAR_CACHE[key] = m
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError(f"bilinear_upsample needs non-empty input, got {x.shape}")
    mh = _bilinear_cached(h, factor, x.dtype)
    mw = _bilinear_cached(w, factor, x.dtype)
    out = mh @ x.data @ mw.T

    def bw(g):
        return (mh.T @ g @ mw,)

    return make_result(out, f"upsample{factor}x", (x,), bw)


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    return bilinear_upsample(x, 2)


# -- loss --------------------------------------------------------------------

def _check_labels(pred_shape, labels: np.ndarray, ignore_label: int) -> np.ndarray:
    labels = np.asarray(labels)
    n, ncls, h, w = pred_shape
    if labels.shape == (n, h, w):
        labels = labels[:, None]
    if labels.shape != (n, 1, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match predictions {pred_shape}")
    bad = (labels != ignore_label) & ((labels < 0) | (labels >= ncls))
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"label {int(labels[pos])} at {pos} outside 0..{ncls - 1}")
    return labels


def phi_loss(pred: Tensor, labels: np.ndarray, form: str = "logit", normalize: bool = True,
             ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Multinomial logistic loss: mean over non-ignored pixels of -log p(true class).

    ``form="logit"`` applies a per-pixel softmax first.  ``form="prob"`` takes
    non-negative scores and, when ``normalize``, divides by their per-pixel sum
    (weighted expert probabilities do not sum to one).  Probabilities are
    clamped to at least 1e-12 before the log.
    """
    labels = _check_labels(pred.shape, labels, ignore_label)
    valid = labels != ignore_label
    count = int(valid.sum())
    dt = pred.dtype
    if count == 0:
        warnings.warn("all pixels carry the ignore label; loss defined as 0", EmptyLossWarning, stacklevel=2)
        return make_result(np.zeros((1, 1, 1, 1), dtype=dt), "phi", (pred,),
                           lambda g: (np.zeros_like(pred.data),))
    safe = np.where(valid, labels, 0)
    onehot_idx = safe  # (N,1,H,W)
    vmask = valid.astype(dt)
    inv = dt.type(1.0 / count)

    if form == "logit":
        z = pred.data - pred.data.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = np.take_along_axis(z, onehot_idx, axis=1) - logsum
        loss = -(logp * vmask).sum() * inv

        def bw(g):
            p = np.exp(z - logsum)
            grad = p.copy()
            np.put_along_axis(grad, onehot_idx, np.take_along_axis(grad, onehot_idx, axis=1) - 1, axis=1)
            return (grad * (vmask * inv * g.reshape(())),)

    elif form == "prob":
        pd = pred.data
        py = np.take_along_axis(pd, onehot_idx, axis=1)
        total = pd.sum(axis=1, keepdims=True) if normalize else np.ones_like(py)
        q = py / total
        clamped = q < PROB_FLOOR
        qc = np.maximum(q, PROB_FLOOR)
        loss = -(np.log(qc) * vmask).sum() * inv

        def bw(g):
            coef = np.where(clamped, 0, -vmask * inv * g.reshape(()))
            # d(-log(py/S))/dp_c = 1/S - [c==y]/py
            grad = np.zeros_like(pd)
            if normalize:
                grad += coef * -1.0 / total
            safe_py = np.where(clamped, 1, py)
            np.put_along_axis(grad, onehot_idx,
                              np.take_along_axis(grad, onehot_idx, axis=1) + coef / safe_py, axis=1)
            return (grad,)
    else:
        raise ValueError(f"unknown prediction form {form!r}")

    return make_result(np.asarray(loss, dtype=dt).reshape(1, 1, 1, 1), "phi", (pred,), bw)
