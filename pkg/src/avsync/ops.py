"""Differentiable operations on :class:`~avsync.tensor.Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to input gradients.  Ops accept leading batch
dimensions wherever that is natural (matmul, softmax, layer norm, pooling,
convolutions), which lets the model score many audio-visual pairs in one
sweep.
"""

from __future__ import annotations

import builtins
import itertools
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import DTYPE, Tensor, as_tensor, make_result

LAYER_NORM_EPS = 1e-5


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


# --------------------------------------------------------------------------
# reductions and normalisation


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(out, dtype=DTYPE), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[i] for i in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return make_result(np.asarray(out, dtype=DTYPE), (x,), backward, "mean")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = np.subtract(x.data, x.data.max(axis=axis, keepdims=True))
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = np.einsum("...i,...i->...", g, out)[..., None] if axis in (-1, out.ndim - 1) \
            else (g * out).sum(axis=axis, keepdims=True)
        gx = np.subtract(g, dot)
        gx *= out
        return (gx,)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    n = xd.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def global_max_pool_spatial(v: Tensor) -> Tensor:
    """Max over the two trailing (spatial) axes: ``[..., c, t, h, w] -> [..., c, t]``.

    Gradient goes to one position per output: the first maximum in row-major
    order.
    """
    if v.ndim < 2 or v.shape[-1] < 1 or v.shape[-2] < 1:
        raise ShapeError(f"global_max_pool_spatial: bad shape {v.shape}")
    lead = v.shape[:-2]
    hw = v.shape[-2] * v.shape[-1]
    flat = v.data.reshape(-1, hw)
    idx = flat.argmax(axis=1)
    out = flat[np.arange(flat.shape[0]), idx].reshape(lead)
    shape = v.shape

    def backward(g):
        gflat = np.zeros((flat.shape[0], hw), dtype=DTYPE)
        gflat[np.arange(flat.shape[0]), idx] = g.reshape(-1)
        return (gflat.reshape(shape),)

    return make_result(out, (v,), backward, "gmp")


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor, start: int = 0) -> Tensor:
    start = start % x.ndim if x.ndim else 0
    return reshape(x, x.shape[:start] + (-1,))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(out, tensors, backward, "concat")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_result(np.broadcast_to(x.data, tuple(shape)).copy(), (x,),
                       lambda g: (_unbroadcast(g, old),), "broadcast")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters into the selected region."""
    shape = x.shape
    out = x.data[index]

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return make_result(np.array(out, dtype=DTYPE), (x,), backward, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Row lookup along ``axis`` (embedding lookup / batch gather).

    Repeated indices accumulate their gradients.
    """
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        # scatter-add as a one-hot product; much faster than np.add.at
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        rest = gm.shape[idx.ndim:]
        flat_idx = idx.reshape(-1)
        onehot = np.zeros((shape[axis], flat_idx.size), dtype=DTYPE)
        onehot[flat_idx, np.arange(flat_idx.size)] = 1.0
        summed = (onehot @ gm.reshape(flat_idx.size, -1)).reshape((shape[axis],) + rest)
        return (np.moveaxis(summed, 0, axis),)

    return make_result(out, (x,), backward, "take")


# --------------------------------------------------------------------------
# convolution


def _conv_check(x: Tensor, w: Tensor, nd: int, stride, padding):
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise ShapeError(f"conv{nd}d expects input [B, C, ...{nd} dims] and weight [O, C, ...], "
                         f"got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv{nd}d: input channels {x.shape[1]} != weight channels {w.shape[1]} "
                         f"(shapes {x.shape} and {w.shape})")
    stride = (stride,) * nd if isinstance(stride, int) else tuple(stride)
    padding = (padding,) * nd if isinstance(padding, int) else tuple(padding)
    return stride, padding


def conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation (N = ``x.ndim - 2``) with zero padding.

    ``x``: [B, C_in, *spatial]; ``w``: [C_out, C_in, *kernel]; ``b``: [C_out].
    """
    nd = x.ndim - 2
    stride, padding = _conv_check(x, w, nd, stride, padding)
    kernel = w.shape[2:]
    xd = x.data
    if builtins.any(padding):
        xd = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    padded_shape = xd.shape
    spatial = padded_shape[2:]
    if builtins.any(s < k for s, k in zip(spatial, kernel)):
        raise ShapeError(f"conv{nd}d: kernel {kernel} larger than padded input {spatial}")
    out_sp = tuple((s - k) // st + 1 for s, k, st in zip(spatial, kernel, stride))
    non_overlap = all(k == st for k, st in zip(kernel, stride))

    if non_overlap:
        # Patch embedding: windows tile the input, so im2col is a reshape.
        crop = xd[(slice(None), slice(None)) + tuple(slice(0, o * k) for o, k in zip(out_sp, kernel))]
        shp = crop.shape[:2]
        for o, k in zip(out_sp, kernel):
            shp += (o, k)
        cols = crop.reshape(shp)
        # [B, C, o1, k1, o2, k2, ...] -> [B, o..., C, k...]
        perm = [0] + [2 + 2 * i for i in range(nd)] + [1] + [3 + 2 * i for i in range(nd)]
        cols = cols.transpose(perm)
    else:
        win = sliding_window_view(xd, kernel, axis=tuple(range(2, 2 + nd)))
        win = win[(slice(None), slice(None)) + tuple(slice(None, None, st) for st in stride)]
        # [B, C, o..., k...] -> [B, o..., C, k...]
        perm = [0] + list(range(2, 2 + nd)) + [1] + list(range(2 + nd, 2 + 2 * nd))
        cols = win.transpose(perm)
    B = xd.shape[0]
    cin_k = int(np.prod(w.shape[1:]))
    cols2 = np.ascontiguousarray(cols).reshape(B * int(np.prod(out_sp)), cin_k)
    wmat = w.data.reshape(w.shape[0], cin_k)
    out = cols2 @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape((B,) + out_sp + (w.shape[0],))
    out = np.moveaxis(out, -1, 1)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gm = np.moveaxis(g, 1, -1).reshape(-1, w.shape[0])
        gw = (gm.T @ cols2).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape((B,) + out_sp + w.shape[1:])
            gpad = np.zeros(padded_shape, dtype=DTYPE)
            if non_overlap:
                # [B, o..., C, k...] -> [B, C, o1, k1, o2, k2, ...]
                inv = [0, 1 + nd]
                for i in range(nd):
                    inv += [1 + i, 2 + nd + i]
                blk = gcols.transpose(inv).reshape((B, w.shape[1]) + tuple(o * k for o, k in zip(out_sp, kernel)))
                gpad[(slice(None), slice(None)) + tuple(slice(0, o * k) for o, k in zip(out_sp, kernel))] = blk
            else:
                gc = np.moveaxis(gcols, 1 + nd, 1)  # [B, C, o..., k...]
                for koff in itertools.product(*(range(k) for k in kernel)):
                    sl = (slice(None), slice(None)) + tuple(
                        slice(ko, ko + st * (o - 1) + 1, st) for ko, st, o in zip(koff, stride, out_sp))
                    gpad[sl] += gc[(Ellipsis,) + koff]
            if builtins.any(padding):
                gpad = gpad[(slice(None), slice(None)) + tuple(slice(p, s - p) for p, s in zip(padding, padded_shape[2:]))]
            gx = gpad
        return (gx, gw) if b is None else (gx, gw, gb)

    return make_result(np.ascontiguousarray(out), inputs, backward, f"conv{nd}d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d input [B, C, H, W], got {x.shape}")
    return conv(x, w, b, stride, padding)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects a 5-d input [B, C, T, H, W], got {x.shape}")
    return conv(x, w, b, stride, padding)


# --------------------------------------------------------------------------
# composite helpers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)
