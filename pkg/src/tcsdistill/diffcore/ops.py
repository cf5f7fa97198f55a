"""Differentiable primitives.

Every op computes its forward in numpy and, when a tape is active and an
input requires a gradient, records a closure mapping the output gradient to
one gradient per input (``None`` where no gradient flows).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, active_tape


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, parents, backward_fn)
    return out


def _recording(*parents: Tensor) -> bool:
    return active_tape() is not None and any(p.requires_grad for p in parents)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, "not broadcastable") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _emit(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _emit(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit(out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow: min(x, 0) - log1p(exp(-|x|))."""
    xd = x.data
    out = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))
    return _emit(out, (x,), lambda g: (g * (1.0 - _stable_sigmoid(xd)),))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy of logits against (soft) targets."""
    target = as_tensor(target)
    if logits.shape != target.shape:
        raise ShapeError("bce_with_logits", logits.shape, target.shape)
    s, t = logits.data, target.data
    out = np.maximum(s, 0.0) - s * t + np.log1p(np.exp(-np.abs(s)))

    def bw(g):
        return (g * (_stable_sigmoid(s) - t) if logits.requires_grad else None,
                -g * s if target.requires_grad else None)

    return _emit(out, (logits, target), bw)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(x.shape[a] for a in axes)
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _emit(out, (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def transpose_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return permute(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            x.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)
        ):
            raise ShapeError("concat", ref, x.shape, f"must agree off axis {axis}")
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=1)


def masked_select(x: Tensor, mask: np.ndarray) -> Tensor:
    """Flat vector of the entries of ``x`` where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError("masked_select", x.shape, mask.shape)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[mask] = g
        return (full,)

    return _emit(x.data[mask], (x,), bw)


def take(x: Tensor, idx) -> Tensor:
    """Rows of ``x`` along axis 0 at integer positions ``idx`` (repeats allowed)."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take", x.shape, idx.shape, "indices must be a 1-D integer array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("take", x.shape, idx.shape, "index out of range")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(x.data[idx], (x,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, "inner dimensions differ")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(ad @ bd, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ w + b`` with ``w`` shaped (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape, "x[..., in] against w[in, out]")
    y = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError("linear", w.shape, b.shape, "bias must be (out,)")
        y = add(y, b)
    return y


# ---------------------------------------------------------------- softmax

def softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature``."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot) / temperature,)

    return _emit(out, (x,), bw)


def log_softmax_rows(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _emit(out, (x,), bw)


def scaled_dot_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor | None = None,
                         temperature: float = 1.0):
    """Single-head self-attention over the token axis of ``x`` (B, N, D).

    Returns ``(weights, logits, values)``; ``logits`` are QK^T/sqrt(d) before
    any temperature, ``weights`` are their row softmax at ``temperature`` and
    ``values`` is ``weights @ V`` (``None`` when ``wv`` is omitted).
    """
    q = linear(x, wq)
    k = linear(x, wk)
    logits = mul(matmul(q, transpose_last(k)), 1.0 / math.sqrt(wq.shape[1]))
    weights = softmax_rows(logits, temperature)
    values = matmul(weights, linear(x, wv)) if wv is not None else None
    return weights, logits, values


# ---------------------------------------------------------------- spatial

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (out, in, kh, kw) kernel."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape, "x (B, C, H, W) against w (O, C, kh, kw)")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, "bias must be (out_ch,)")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv2d", x.shape, w.shape, "kernel larger than padded input")
    # channel-major im2col: rows ordered (kh, kw, C), columns (B, Ho, Wo)
    xc = x.data.transpose(1, 0, 2, 3)
    xp = np.pad(xc, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xc
    cols = np.empty((kh, kw, C, B, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(kh * kw * C, B * Ho * Wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
    out = wmat @ cols
    if b is not None:
        out += b.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))
    parents = (x, w) if b is None else (x, w, b)
    if not _recording(*parents):
        return Tensor(out)
    Hp, Wp = xp.shape[2], xp.shape[3]

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = (gmat @ cols.T).reshape(O, kh, kw, C).transpose(0, 3, 1, 2) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(kh, kw, C, B, Ho, Wo)
            dxp = np.zeros((C, B, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[i, j]
            gx = dxp[:, :, pad:pad + H, pad:pad + W].transpose(1, 0, 2, 3)
        if b is None:
            return gx, gw
        return gx, gw, (gmat.sum(axis=1) if b.requires_grad else None)

    return _emit(out, parents, bw)


def avg_pool_full(x: Tensor) -> Tensor:
    """Global mean per channel: (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise ShapeError("avg_pool_full", x.shape, ("B", "C", "H", "W"))
    return mean(x, axis=(2, 3))


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling."""
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError("avg_pool2d", x.shape, (k, k), "spatial dims must divide by the window")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _emit(out, (x,), bw)


def upsample_nearest(x: Tensor, k: int) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)

    def bw(g):
        return (g.reshape(B, C, H, k, W, k).sum(axis=(3, 5)),)

    return _emit(out, (x,), bw)


def patchify(x: Tensor, s: int) -> Tensor:
    """Non-overlapping s x s patches: (B, C, H, W) -> (B, (H/s)(W/s), C*s*s).

    Patches are ordered row-major over the patch grid; each patch vector is
    laid out channel-major.
    """
    B, C, H, W = x.shape
    if H % s or W % s:
        raise ShapeError("patchify", x.shape, (s, s), "spatial dims must divide by the patch size")
    y = reshape(x, (B, C, H // s, s, W // s, s))
    y = permute(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (B, (H // s) * (W // s), C * s * s))
