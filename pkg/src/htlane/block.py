"""Trainable HT-IHT block.

Pipeline: 1x1 channel reduction -> Hough transform per channel -> two 1-D
convolutions along the offset axis -> inverse transform -> concat with the
input features -> 1x1 merge. ReLU after every learned stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .hough import VoteTable, ht_backward, ht_forward, iht_backward, iht_forward

C_IN = 32
C_HT = 8
RHO_KERNEL = 9

PARAM_NAMES = ("reduce.w", "rho1.w", "rho1.b", "rho2.w", "rho2.b", "merge.w", "merge.b")


def param_shapes(c_in=C_IN, c_ht=C_HT, k=RHO_KERNEL):
    return {
        "reduce.w": (c_ht, c_in, 1, 1),
        "rho1.w": (c_ht, c_ht, k),
        "rho1.b": (c_ht,),
        "rho2.w": (c_ht, c_ht, k),
        "rho2.b": (c_ht,),
        "merge.w": (c_in, c_in + c_ht, 1, 1),
        "merge.b": (c_in,),
    }


def init_params(rng, c_in=C_IN, c_ht=C_HT, k=RHO_KERNEL, dtype=T.DTYPE):
    params = {}
    for name, shape in param_shapes(c_in, c_ht, k).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = T.kaiming_uniform(rng, shape, fan_in, dtype)
    return params


@dataclass
class BlockCache:
    f_shape: tuple
    reduce_cols: np.ndarray
    g_pre: np.ndarray
    h: np.ndarray
    rho1_cols: np.ndarray
    h1_pre: np.ndarray
    rho2_cols: np.ndarray
    h2_pre: np.ndarray
    merge_cols: np.ndarray
    out_pre: np.ndarray


def _identity(x):
    return x


def block_forward(params, table: VoteTable, f, linear=False):
    """Run the block on features ``f`` [C_in,H,W].

    ``linear=True`` swaps every ReLU for the identity (used by tests that
    probe linearity). Returns ``(out, cache)``.
    """
    act = _identity if linear else T.relu
    cfg = table.config
    if f.ndim != 3 or f.shape[1:] != (cfg.H, cfg.W):
        raise ShapeError(f"block input: features {f.shape} do not match vote table "
                         f"{cfg.H}x{cfg.W}")
    w = params["reduce.w"]
    try:
        g_pre, reduce_cols = T.conv2d(f, w, np.zeros(w.shape[0], f.dtype))
    except ShapeError as e:
        raise ShapeError(f"block reduce stage: {e}") from None
    g = act(g_pre)
    h = ht_forward(table, g)
    pad = params["rho1.w"].shape[-1] // 2
    try:
        h1_pre, rho1_cols = T.conv1d_over_rows(h, params["rho1.w"], params["rho1.b"], pad)
        h1 = act(h1_pre)
        h2_pre, rho2_cols = T.conv1d_over_rows(h1, params["rho2.w"], params["rho2.b"], pad)
    except ShapeError as e:
        raise ShapeError(f"block hough-conv stage: {e}") from None
    h2 = act(h2_pre)
    r = iht_forward(table, h2)
    cat = np.concatenate([f, r], axis=0)
    try:
        out_pre, merge_cols = T.conv2d(cat, params["merge.w"], params["merge.b"])
    except ShapeError as e:
        raise ShapeError(f"block merge stage: {e}") from None
    cache = BlockCache(f.shape, reduce_cols, g_pre, h, rho1_cols, h1_pre, rho2_cols,
                       h2_pre, merge_cols, out_pre)
    return act(out_pre), cache


def block_backward(params, table: VoteTable, cache: BlockCache, upstream, linear=False):
    """Reverse pass; returns ``(grad_f, grads)`` with ``grads`` keyed like params."""
    if upstream.shape != cache.out_pre.shape:
        raise ShapeError(f"block_backward: upstream {upstream.shape} does not match "
                         f"cached output {cache.out_pre.shape}")

    def dact(g, pre):
        return g if linear else T.relu_backward(g, pre)

    grads = {}
    c_in = cache.f_shape[0]
    g_out = dact(upstream, cache.out_pre)
    cat_shape = (params["merge.w"].shape[1],) + cache.f_shape[1:]
    g_cat, grads["merge.w"], grads["merge.b"] = T.conv2d_backward(
        g_out, cat_shape, params["merge.w"], cache.merge_cols)
    g_f = g_cat[:c_in].copy()
    g_r = g_cat[c_in:]

    g_h2 = dact(iht_backward(table, g_r), cache.h2_pre)
    pad = params["rho1.w"].shape[-1] // 2
    g_h1, grads["rho2.w"], grads["rho2.b"] = T.conv1d_over_rows_backward(
        g_h2, cache.h2_pre.shape, params["rho2.w"], cache.rho2_cols, pad)
    g_h1 = dact(g_h1, cache.h1_pre)
    g_h, grads["rho1.w"], grads["rho1.b"] = T.conv1d_over_rows_backward(
        g_h1, cache.h.shape, params["rho1.w"], cache.rho1_cols, pad)

    g_g = dact(ht_backward(table, g_h), cache.g_pre)
    g_f_red, grads["reduce.w"], _ = T.conv2d_backward(
        g_g, cache.f_shape, params["reduce.w"], cache.reduce_cols)
    g_f += g_f_red
    return g_f, grads
