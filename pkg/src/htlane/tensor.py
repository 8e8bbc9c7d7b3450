"""Dense tensor ops with hand-written forward/backward pairs.

Tensors are plain row-major numpy arrays. Every op is dtype-preserving, so
the same code runs in float32 for training and in float64 for gradient
checks. Each ``*_backward`` takes the upstream gradient plus whatever the
forward needs to recompute (inputs or a small cache) and returns gradients
in the order of the forward arguments.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, ShapeError

DTYPE = np.float32

# Finite-value assertions after every op; off unless HTLANE_DEBUG is set.
DEBUG = bool(os.environ.get("HTLANE_DEBUG"))


def _check_finite(name, arr):
    if DEBUG and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name}: non-finite output")
    return arr


def _expect(cond, msg):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# 2-D convolution (cross-correlation, zero padding)
# ---------------------------------------------------------------------------

def _im2col(x, k, stride, pad):
    cin = x.shape[0]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
    return cols, ho, wo


def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlate ``x`` [Cin,H,W] with ``w`` [Cout,Cin,k,k] plus ``b``.

    Returns ``(out, cols)``; ``cols`` is the im2col matrix needed by
    :func:`conv2d_backward`.
    """
    _expect(x.ndim == 3, f"conv2d: input must be [C,H,W], got {x.shape}")
    _expect(w.ndim == 4 and w.shape[2] == w.shape[3],
            f"conv2d: kernels must be [Cout,Cin,k,k], got {w.shape}")
    cout, cin, k, _ = w.shape
    _expect(x.shape[0] == cin,
            f"conv2d: input channels {x.shape[0]} != kernel in-channels {cin}")
    _expect(b.shape == (cout,), f"conv2d: bias {b.shape} != ({cout},)")
    _expect(k % 2 == 1, f"conv2d: kernel size {k} must be odd")
    _expect(stride >= 1 and pad >= 0, "conv2d: stride >= 1, pad >= 0")
    _expect(x.shape[1] + 2 * pad >= k and x.shape[2] + 2 * pad >= k,
            f"conv2d: padded height/width smaller than kernel {k}")
    if k == 1 and stride == 1 and pad == 0:
        cols, ho, wo = x.reshape(cin, -1), x.shape[1], x.shape[2]
    else:
        cols, ho, wo = _im2col(x, k, stride, pad)
    out = w.reshape(cout, -1) @ cols
    out += b[:, None]
    return _check_finite("conv2d", out.reshape(cout, ho, wo)), cols


def conv2d_backward(g, x_shape, w, cols, stride=1, pad=0):
    """Gradients of :func:`conv2d` w.r.t. (input, kernels, bias)."""
    cout, cin, k, _ = w.shape
    _expect(g.ndim == 3 and g.shape[0] == cout,
            f"conv2d_backward: upstream {g.shape} vs {cout} out-channels")
    ho, wo = g.shape[1], g.shape[2]
    g2 = g.reshape(cout, -1)
    gw = (g2 @ cols.T).reshape(w.shape)
    gb = g2.sum(axis=1)
    gcols = w.reshape(cout, -1).T @ g2
    if k == 1 and stride == 1 and pad == 0:
        return gcols.reshape(x_shape), gw, gb
    gcols = gcols.reshape(cin, k, k, ho, wo)
    _, h, wd = x_shape
    gxp = np.zeros((cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
    gx = gxp[:, pad:pad + h, pad:pad + wd]
    return np.ascontiguousarray(gx), gw, gb


# ---------------------------------------------------------------------------
# 1-D convolution along the last axis, rows independent
# ---------------------------------------------------------------------------

def conv1d_over_rows(x, w, b, pad=0):
    """Correlate every row of ``x`` [C,R,L] along L with ``w`` [C',C,k].

    For Hough maps laid out [channels, n_theta, n_rho] this filters along
    the offset axis only. Returns ``(out, cols)``.
    """
    _expect(x.ndim == 3, f"conv1d_over_rows: input must be [C,R,L], got {x.shape}")
    _expect(w.ndim == 3, f"conv1d_over_rows: kernels must be [C',C,k], got {w.shape}")
    cout, cin, k = w.shape
    _expect(x.shape[0] == cin,
            f"conv1d_over_rows: input channels {x.shape[0]} != {cin}")
    _expect(b.shape == (cout,), f"conv1d_over_rows: bias {b.shape} != ({cout},)")
    _expect(k % 2 == 1 and 2 * pad == k - 1,
            f"conv1d_over_rows: need odd k and pad=(k-1)/2, got k={k} pad={pad}")
    _, r, length = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    win = sliding_window_view(xp, k, axis=2)  # [C,R,L,k]
    cols = win.transpose(0, 3, 1, 2).reshape(cin * k, r * length)
    out = w.reshape(cout, -1) @ cols
    out += b[:, None]
    return _check_finite("conv1d_over_rows", out.reshape(cout, r, length)), cols


def conv1d_over_rows_backward(g, x_shape, w, cols, pad=0):
    cout, cin, k = w.shape
    _, r, length = x_shape
    _expect(g.shape == (cout, r, length),
            f"conv1d_over_rows_backward: upstream {g.shape} != {(cout, r, length)}")
    g2 = g.reshape(cout, -1)
    gw = (g2 @ cols.T).reshape(w.shape)
    gb = g2.sum(axis=1)
    gcols = (w.reshape(cout, -1).T @ g2).reshape(cin, k, r, length)
    gxp = np.zeros((cin, r, length + 2 * pad), dtype=g.dtype)
    for t in range(k):
        gxp[:, :, t:t + length] += gcols[:, t]
    return np.ascontiguousarray(gxp[:, :, pad:pad + length]), gw, gb


# ---------------------------------------------------------------------------
# Pointwise maps
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(g, x):
    return g * (x > 0)


def sigmoid(x):
    # exp(-log(1+exp(-x))) never overflows
    return np.exp(-np.logaddexp(0, -x)).astype(x.dtype, copy=False)


def sigmoid_backward(g, s):
    """``s`` is the forward output."""
    return g * s * (1 - s)


def log(x):
    bad = np.flatnonzero(~(x > 0))
    if bad.size:
        idx = np.unravel_index(bad[0], x.shape)
        raise DomainError(f"log: non-positive value {x[idx]!r} at index {tuple(map(int, idx))}")
    return np.log(x)


def log_backward(g, x):
    return g / x


def pointwise(kind, x):
    """Apply ``relu``, ``sigmoid`` or ``log`` element-wise."""
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "log": log}[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    return _check_finite(kind, fn(x))


def pointwise_backward(kind, g, x, out):
    if kind == "relu":
        return relu_backward(g, x)
    if kind == "sigmoid":
        return sigmoid_backward(g, out)
    if kind == "log":
        return log_backward(g, x)
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------------------
# Channel softmax
# ---------------------------------------------------------------------------

def softmax_channels(x):
    """Per-pixel softmax over axis 0 of a [C,H,W] tensor."""
    _expect(x.ndim == 3 and x.shape[0] >= 2,
            f"softmax_channels: need [C>=2,H,W], got {x.shape}")
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    return _check_finite("softmax_channels", e / e.sum(axis=0, keepdims=True))


def softmax_channels_backward(g, p):
    """Gradient w.r.t. logits given upstream ``g`` w.r.t. probabilities ``p``."""
    return p * (g - (g * p).sum(axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# Spatial resampling
# ---------------------------------------------------------------------------

def _block_sum(x):
    # pairwise order keeps a sum of four equal values exact
    return ((x[..., 0::2, 0::2] + x[..., 0::2, 1::2])
            + (x[..., 1::2, 0::2] + x[..., 1::2, 1::2]))


def avgpool2(x):
    _expect(x.ndim >= 2, f"avgpool2: need at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: height {h} and width {w} must be even")
    return _block_sum(x) * x.dtype.type(0.25)


def nearest_up2(x):
    _expect(x.ndim >= 2, f"nearest_up2: need at least 2 axes, got {x.shape}")
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def avgpool2_backward(g):
    return nearest_up2(g) * g.dtype.type(0.25)


def nearest_up2_backward(g):
    return _block_sum(g)


def resample(kind, x):
    if kind == "avgpool2":
        return avgpool2(x)
    if kind == "nearest_up2":
        return nearest_up2(x)
    raise ValueError(f"unknown resample kind {kind!r}")


def resample_backward(kind, g):
    if kind == "avgpool2":
        return avgpool2_backward(g)
    if kind == "nearest_up2":
        return nearest_up2_backward(g)
    raise ValueError(f"unknown resample kind {kind!r}")


# ---------------------------------------------------------------------------
# Dense layer and optimizer step
# ---------------------------------------------------------------------------

def linear(x, w, b):
    _expect(x.ndim == 1 and w.ndim == 2 and w.shape[1] == x.shape[0],
            f"linear: weight {w.shape} incompatible with input {x.shape}")
    _expect(b.shape == (w.shape[0],), f"linear: bias {b.shape} != ({w.shape[0]},)")
    return _check_finite("linear", w @ x + b)


def linear_backward(g, x, w):
    return w.T @ g, np.outer(g, x), g.copy()


def sgd_update(param, grad, lr, velocity=None, momentum=0.0):
    """In-place ``param -= lr * grad``.

    With a ``velocity`` buffer the step uses heavy-ball momentum:
    ``v = momentum*v + grad; param -= lr*v``.
    """
    if param.shape != grad.shape:
        raise ShapeError(f"sgd_update: param {param.shape} vs grad {grad.shape}")
    if velocity is not None:
        velocity *= velocity.dtype.type(momentum)
        velocity += grad
        grad = velocity
    if lr:
        param -= param.dtype.type(lr) * grad
    return param


def kaiming_uniform(rng, shape, fan_in, dtype=DTYPE):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
