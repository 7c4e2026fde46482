"""Differentiable primitives used by the network and CAM heads.

Spatial ops accept either ``[C, H, W]`` or batched ``[B, C, H, W]`` inputs.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mlcam.autodiff.tensor import Tensor, check_shape
from mlcam.errors import DimensionError, NumericInputError


def _batched(x: Tensor, name: str) -> tuple[np.ndarray, bool]:
    check_shape(x, (3, 4), name)
    return (x.data[None], True) if x.ndim == 3 else (x.data, False)


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """Cross-correlation of ``x`` with ``kernels`` of shape ``[C_out, C_in, kH, kW]``."""
    xb, squeeze = _batched(x, "conv2d input")
    check_shape(kernels, (4,), "conv2d kernels")
    c_out, c_in, kh, kw = kernels.shape
    b, c, h, w = xb.shape
    if c != c_in:
        raise DimensionError(
            f"conv2d input has {c} channels but kernels expect {c_in}", axis="channels"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kh}x{kw}", axis="kernel")
    if stride < 1 or pad < 0:
        raise DimensionError(f"invalid stride={stride} / pad={pad}", axis="stride")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(
            f"bias shape {bias.shape} does not match {c_out} output channels", axis="channels"
        )
    for axis, extent, k in (("height", h, kh), ("width", w, kw)):
        span = extent + 2 * pad - k
        if span < 0 or span % stride:
            raise DimensionError(
                f"conv2d {axis} {extent} with kernel {k}, pad {pad}, stride {stride} "
                "does not tile exactly",
                axis=axis,
            )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    # im2col in channels-last order: rows are (b, y, x), columns are (c, i, j)
    xl = xp.transpose(0, 2, 3, 1)
    win = sliding_window_view(xl, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.reshape(b * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2))

    def _back(g: np.ndarray):
        gb = g[None] if squeeze else g
        gmat = gb.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gmat.T @ cols).reshape(kernels.shape)
        grads = [None, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        if not x.requires_grad:
            return grads
        gcols = (gmat @ wmat).reshape(b, ho, wo, c, kh, kw)
        if kh == 1 and kw == 1 and stride == 1:
            gxl = gcols[..., 0, 0]
        else:
            gxl = np.zeros(xl.shape)
            for i in range(kh):
                for j in range(kw):
                    gxl[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j]
        gx = gxl.transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad : pad + h, pad : pad + w]
        grads[0] = np.ascontiguousarray(gx[0] if squeeze else gx)
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return Tensor._from_op(out[0] if squeeze else out, parents, _back, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Windowed max. Gradient goes to the first maximum in row-major scan order."""
    stride = k if stride is None else stride
    xb, squeeze = _batched(x, "max_pool2d input")
    b, c, h, w = xb.shape
    if k < 1 or stride < 1 or h < k or w < k:
        raise DimensionError(f"pool window {k} does not fit input {h}x{w}", axis="height")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(xb, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(b, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)  # argmax returns the first occurrence
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    rows = np.arange(ho)[:, None] * stride + arg // k
    cols = np.arange(wo)[None, :] * stride + arg % k
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]

    def _back(g: np.ndarray):
        gb = g[None] if squeeze else g
        gx = np.zeros_like(xb)
        if stride >= k:
            gx[bi, ci, rows, cols] = gb
        else:
            np.add.at(gx, (bi, ci, rows, cols), gb)
        return (gx[0] if squeeze else gx,)

    return Tensor._from_op(out[0] if squeeze else out, (x,), _back, "max_pool2d")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (``-3``)."""
    xs = list(xs)
    if not xs:
        raise DimensionError("concat_channels needs at least one tensor", axis="channels")
    ref = xs[0].shape
    for t in xs:
        check_shape(t, (3, 4), "concat operand")
        if t.ndim != len(ref):
            raise DimensionError("concat operands differ in rank", axis="rank")
        for axis, (a, b) in enumerate(zip(t.shape, ref)):
            if axis != t.ndim - 3 and a != b:
                name = {t.ndim - 1: "width", t.ndim - 2: "height"}.get(axis, "batch")
                raise DimensionError(
                    f"concat operand shape {t.shape} incompatible with {ref}", axis=name
                )
    sizes = [t.shape[-3] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=-3)
    return Tensor._from_op(
        out, xs, lambda g: tuple(np.split(g, splits, axis=-3)), "concat_channels"
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean over the last two axes: ``[C,H,W] -> [C]``, ``[B,C,H,W] -> [B,C]``."""
    if x.ndim < 2:
        raise DimensionError(f"global_avg_pool needs spatial axes, got {x.shape}", axis="rank")
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise DimensionError("empty spatial extent", axis="height" if h < 1 else "width")
    scale = 1.0 / (h * w)
    out = x.data.sum(axis=(-2, -1)) * scale
    shape = x.shape
    return Tensor._from_op(
        out,
        (x,),
        lambda g: (np.broadcast_to((g * scale)[..., None, None], shape).copy(),),
        "global_avg_pool",
    )


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(scores: Tensor, label) -> Tensor:
    """Mean negative log-softmax of the target class.

    ``scores`` is ``[K]`` with an integer ``label``, or ``[B, K]`` with a
    length-``B`` label array; the batched loss is averaged over ``B``.
    """
    if not np.all(np.isfinite(scores.data)):
        raise NumericInputError("softmax_cross_entropy received non-finite scores")
    single = scores.ndim == 1
    s = scores.data[None] if single else scores.data
    if s.ndim != 2 or s.shape[1] < 2:
        raise DimensionError(f"scores must be [K] or [B, K] with K >= 2, got {scores.shape}", axis="classes")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape != (s.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for {s.shape[0]} score rows", axis="batch")
    if np.any(labels < 0) or np.any(labels >= s.shape[1]):
        raise DimensionError(f"label out of range for {s.shape[1]} classes", axis="classes")
    n = s.shape[0]
    z = s - s.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    loss = np.asarray((logsum - picked).sum() / n)

    def _back(g: np.ndarray):
        p = softmax(s)
        p[np.arange(n), labels] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return Tensor._from_op(loss, (scores,), _back, "softmax_cross_entropy")


def interpolation_matrix(source: int, target: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape ``[target, source]``."""
    m = np.zeros((target, source))
    if source == 1 or target == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(target) * (source - 1) / (target - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), source - 2)
    frac = pos - lo
    rows = np.arange(target)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Align-corners bilinear resize of the last two axes to ``target_h x target_w``."""
    if x.ndim < 2:
        raise DimensionError(f"bilinear_upsample needs a map, got shape {x.shape}", axis="rank")
    h, w = x.shape[-2:]
    if target_h < 1 or target_w < 1:
        raise DimensionError("target extent must be positive", axis="height" if target_h < 1 else "width")
    if h < 1 or w < 1:
        raise DimensionError("source map is empty", axis="height" if h < 1 else "width")
    if target_h < h or target_w < w:
        raise DimensionError(
            f"target {target_h}x{target_w} is smaller than source {h}x{w}",
            axis="height" if target_h < h else "width",
        )
    if (target_h, target_w) == (h, w):
        return Tensor._from_op(x.data.copy(), (x,), lambda g: (g,), "bilinear_upsample")
    ry = interpolation_matrix(h, target_h)
    rx = interpolation_matrix(w, target_w)
    out = ry @ x.data @ rx.T

    def _back(g: np.ndarray):
        return (ry.T @ g @ rx,)

    return Tensor._from_op(out, (x,), _back, "bilinear_upsample")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T (+ bias)`` for ``x`` of shape ``[..., C]`` and weight ``[O, C]``."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear input width {x.shape[-1]} != weight width {weight.shape[1]}", axis="features"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _back(g: np.ndarray):
        gx = g @ weight.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _back, "linear")
