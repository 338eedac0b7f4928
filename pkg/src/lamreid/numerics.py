"""Forward and gradient kernels for every layer kind in the ranking network.

All activations use the ``batch x channels x height x width`` layout. Every
kernel is a pure function of its arguments; the matching ``*_grad`` function
takes the upstream gradient plus whatever the forward pass needs to be
replayed (usually the forward inputs) and returns gradients shaped exactly
like those inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent for a kernel."""


def _pair(value):
    if np.isscalar(value):
        return int(value), int(value)
    value = tuple(int(v) for v in value)
    # a 3-element window is (depth, height, width); depth acts per channel
    return value[-2], value[-1]


def output_extent(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# -- convolution ------------------------------------------------------------

def _im2col(x, kh, kw, stride, padding):
    """Patches as ``(N, C*kh*kw, Ho*Wo)`` so a GEMM yields channels-first output."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _check_conv(x, w, b, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"convolve expects 4-d input and weights, got input {x.shape} and weights {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape} vs weights {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match weights {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    ho = output_extent(x.shape[2], w.shape[2], stride, padding)
    wo = output_extent(x.shape[3], w.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {w.shape} does not fit padded input {x.shape} (padding={padding})")
    return ho, wo


def convolve(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (N, C, H, W) with filters ``w`` (F, C, kh, kw)."""
    ho, wo = _check_conv(x, w, b, stride, padding)
    cols = _im2col(x, w.shape[2], w.shape[3], stride, padding)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)
    if b is not None:
        out += b[:, None]
    return out.reshape(x.shape[0], w.shape[0], ho, wo)


def convolve_grad(dout, x, w, stride=1, padding=0, need_input_grad=True):
    """Adjoint of :func:`convolve`.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_input`` is None
    when ``need_input_grad`` is false (first layer, where the input is data).
    """
    ho, wo = _check_conv(x, w, None, stride, padding)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if dout.shape != (n, f, ho, wo):
        raise ShapeError(f"upstream gradient {dout.shape} does not match conv output {(n, f, ho, wo)}")
    cols = _im2col(x, kh, kw, stride, padding)
    d2 = dout.reshape(n, f, ho * wo)
    dw = np.zeros((f, c * kh * kw), dtype=np.result_type(dout, x))
    for i in range(n):
        dw += d2[i] @ cols[i].T
    dw = dw.reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dx = None
    if need_input_grad:
        dcols = np.matmul(w.reshape(f, -1).T, d2).reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        dx = np.ascontiguousarray(dx)
    return dx, dw, db


# -- max pooling ------------------------------------------------------------

def pool_max(x: np.ndarray, window, stride: int):
    """Max-pool each channel independently.

    Returns ``(out, index_map)`` where ``index_map`` holds, for every output
    cell, the flat ``row * width + col`` coordinate of the chosen input cell.
    Ties go to the lowest flat index.
    """
    kh, kw = _pair(window)
    if x.ndim != 4:
        raise ShapeError(f"pool_max expects a 4-d input, got {x.shape}")
    if stride < 1:
        raise ValueError(f"invalid stride {stride}")
    h, w = x.shape[2], x.shape[3]
    if kh > h or kw > w:
        raise ShapeError(f"pool window {(kh, kw)} larger than input {x.shape}")
    ho, wo = output_extent(h, kh, stride), output_extent(w, kw, stride)
    out, k = None, None
    for i in range(kh):
        for j in range(kw):
            v = x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            if out is None:
                out = v.copy()
                k = np.zeros(out.shape, dtype=np.int32)
                continue
            # strict comparison keeps the earliest (lowest flat index) maximum
            better = v > out
            np.copyto(out, v, where=better)
            k[better] = i * kw + j
    rows = np.arange(ho)[:, None] * stride + k // kw
    cols = np.arange(wo)[None, :] * stride + k % kw
    index_map = rows * w + cols
    return np.ascontiguousarray(out), index_map


def pool_max_grad(dout, index_map, input_shape, window, stride):
    """Scatter ``dout`` back to the recorded argmax positions."""
    kh, kw = _pair(window)
    n, c, h, w = input_shape
    ho, wo = index_map.shape[2], index_map.shape[3]
    if dout.shape != index_map.shape:
        raise ShapeError(f"upstream gradient {dout.shape} does not match index map {index_map.shape}")
    rows = index_map // w - (np.arange(ho) * stride)[:, None]
    cols = index_map % w - (np.arange(wo) * stride)[None, :]
    offset = rows * kw + cols
    dx = np.zeros(input_shape, dtype=dout.dtype)
    if stride >= kh and stride >= kw:
        # non-overlapping windows: no two cells can target the same input
        flat = dx.reshape(n * c, h * w)
        np.put_along_axis(flat, index_map.reshape(n * c, -1).astype(np.intp), dout.reshape(n * c, -1), axis=1)
        return dx
    for i in range(kh):
        for j in range(kw):
            sel = np.where(offset == i * kw + j, dout, 0)
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += sel
    return dx


# -- elementwise --------------------------------------------------------------

def rectify(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def rectify_grad(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Mask ``dout`` where the forward input was <= 0 (subgradient 0 at 0)."""
    return np.where(x > 0, dout, 0).astype(dout.dtype, copy=False)


def add_elementwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shapes {a.shape} and {b.shape}")
    return a + b


def add_elementwise_grad(dout):
    return dout, dout


# -- fully connected ----------------------------------------------------------

def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x`` (N, features) times ``w.T`` (features, out) plus ``b``."""
    x2 = x.reshape(x.shape[0], -1)
    if w.ndim != 2 or x2.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"affine: input {x.shape} incompatible with weights {w.shape} / bias {b.shape}")
    return x2 @ w.T + b


def affine_grad(dout, x, w):
    x2 = x.reshape(x.shape[0], -1)
    dx = (dout @ w).reshape(x.shape)
    dw = dout.T @ x2
    db = dout.sum(axis=0)
    return dx, dw, db


# -- batch normalisation ------------------------------------------------------

def normalize_batch(x, scale, shift, running_mean, running_var, mode="train",
                    momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalisation.

    Returns ``(out, cache, (new_running_mean, new_running_var))``. The running
    statistics are never modified in place; in inference mode they are
    returned unchanged and ``cache`` replays the fixed affine map.
    """
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batch-norm scale/shift {scale.shape}/{shift.shape} vs input {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch normalisation in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_mean = momentum * running_mean + (1 - momentum) * mean
        new_var = momentum * running_var + (1 - momentum) * var
    elif mode == "inference":
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * scale.reshape(bshape) + shift.reshape(bshape)
    cache = (mode, xhat, inv_std, scale, axes, bshape)
    return out.astype(x.dtype, copy=False), cache, (new_mean, new_var)


def normalize_batch_grad(dout, cache):
    """Returns ``(grad_input, grad_scale, grad_shift)``."""
    mode, xhat, inv_std, scale, axes, bshape = cache
    dshift = dout.sum(axis=axes)
    dscale = (dout * xhat).sum(axis=axes)
    dxhat = dout * scale.reshape(bshape)
    if mode == "inference":
        return dxhat * inv_std.reshape(bshape), dscale, dshift
    m = dout.size // dout.shape[1]
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, dscale, dshift


# -- concatenation ------------------------------------------------------------

def concatenate(parts, axis=1):
    parts = list(parts)
    if not parts:
        raise ShapeError("concatenate needs at least one part")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise ShapeError(f"cannot concatenate shapes {tuple(ref)} and {p.shape} along axis {axis}")
    return np.concatenate(parts, axis=axis)


def concatenate_grad(dout, sizes, axis=1):
    """Slice ``dout`` back into pieces of the given extents along ``axis``."""
    bounds = np.cumsum(sizes)[:-1]
    return np.split(dout, bounds, axis=axis)
