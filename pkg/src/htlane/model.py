"""Small encoder-decoder lane network with an HT-IHT block in the middle.

Channel 0 of the segmentation output is background, channels 1..K each
hold one lane. A linear head on pooled block features predicts per-lane
existence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import block
from . import tensor as T
from .errors import ShapeError
from .hough import VoteTable

K = 4
IMAGE_SHAPE = (1, 64, 160)
FEATURE_SHAPE = (32, 16, 40)
# existence head reads a column profile of the block features: summed over
# rows, averaged over strips of this many columns. A global average would
# erase where a lane sits.
EXIST_STRIP = 4
EXIST_IN = FEATURE_SHAPE[0] * (FEATURE_SHAPE[2] // EXIST_STRIP)

# name -> (shape, stride); convolutions pad to keep "same" geometry
_CONVS = {
    "enc1": ((16, 1, 3, 3), 2),
    "enc2": ((32, 16, 3, 3), 2),
    "enc3": ((32, 32, 3, 3), 1),
    "dec1": ((16, 32, 3, 3), 1),
    "dec2": ((8, 16, 3, 3), 1),
    "head": ((K + 1, 8, 1, 1), 1),
}


def param_shapes():
    shapes = {}
    for name, (shape, _) in _CONVS.items():
        shapes[f"{name}.w"] = shape
        shapes[f"{name}.b"] = (shape[0],)
    for name, shape in block.param_shapes().items():
        shapes[f"ht.{name}"] = shape
    shapes["exist.w"] = (K, EXIST_IN)
    shapes["exist.b"] = (K,)
    return shapes


def init_params(seed: int, dtype=T.DTYPE) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, zero biases; fully determined by ``seed``.

    The existence weights also start at zero: the row-summed pooled features
    are large enough to saturate the sigmoid under fan-in scaling.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes().items():
        if name.endswith(".b") or name == "exist.w":
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = T.kaiming_uniform(rng, shape, int(np.prod(shape[1:])), dtype)
    return params


def block_params(params):
    return {name[3:]: v for name, v in params.items() if name.startswith("ht.")}


def strip_pool(y):
    """Sum over rows, mean over column strips, flattened: [C,H,W] -> [C*W/s]."""
    c, h, w = y.shape
    strips = y.reshape(c, h, w // EXIST_STRIP, EXIST_STRIP)
    return (strips.sum(axis=(1, 3)) / y.dtype.type(EXIST_STRIP)).reshape(-1)


def strip_pool_backward(g, shape):
    c, h, w = shape
    n = g.dtype.type(EXIST_STRIP)
    g = (g / n).reshape(c, 1, w // EXIST_STRIP, 1)
    return np.broadcast_to(g, (c, h, w // EXIST_STRIP, EXIST_STRIP)).reshape(shape)


@dataclass
class ModelOutput:
    seg_logits: np.ndarray  # [K+1, 64, 160]
    seg_probs: np.ndarray
    exist_p: np.ndarray  # [K]
    features: np.ndarray  # encoder output [32, 16, 40]


@dataclass
class ForwardCache:
    acts: dict
    cols: dict
    block_cache: block.BlockCache
    pooled: np.ndarray


def _conv(params, name, x, cols, acts):
    shape, stride = _CONVS[name]
    pad = shape[-1] // 2
    out, cols[name] = T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride, pad)
    acts[f"{name}.in_shape"] = x.shape
    acts[f"{name}.pre"] = out
    return out


def forward(params, image, table: VoteTable):
    """Run the network on one image [1,64,160]; returns ``(ModelOutput, cache)``."""
    if image.shape != IMAGE_SHAPE:
        raise ShapeError(f"model input must be {IMAGE_SHAPE}, got {image.shape}")
    cfg = table.config
    if (cfg.H, cfg.W) != FEATURE_SHAPE[1:]:
        raise ShapeError(f"vote table is {cfg.H}x{cfg.W}, model features are "
                         f"{FEATURE_SHAPE[1]}x{FEATURE_SHAPE[2]}")
    acts, cols = {}, {}
    x = T.relu(_conv(params, "enc1", image, cols, acts))
    x = T.relu(_conv(params, "enc2", x, cols, acts))
    feats = T.relu(_conv(params, "enc3", x, cols, acts))
    y, bcache = block.block_forward(block_params(params), table, feats)
    acts["block.out"] = y
    pooled = strip_pool(y)
    exist_p = T.sigmoid(T.linear(pooled, params["exist.w"], params["exist.b"]))
    x = T.relu(_conv(params, "dec1", T.nearest_up2(y), cols, acts))
    x = T.relu(_conv(params, "dec2", T.nearest_up2(x), cols, acts))
    logits = _conv(params, "head", x, cols, acts)
    probs = T.softmax_channels(logits)
    out = ModelOutput(logits, probs, exist_p, feats)
    return out, ForwardCache(acts, cols, bcache, pooled)


def _conv_back(params, name, g, cache, grads):
    shape, stride = _CONVS[name]
    gx, grads[f"{name}.w"], grads[f"{name}.b"] = T.conv2d_backward(
        g, cache.acts[f"{name}.in_shape"], params[f"{name}.w"], cache.cols[name],
        stride, shape[-1] // 2)
    return gx


def backward(params, table, output: ModelOutput, cache: ForwardCache,
             g_logits, g_exist):
    """Gradients of a scalar loss given its gradients w.r.t. the logits and
    the existence probabilities. Returns ``(grads, grad_image)``."""
    if g_logits.shape != output.seg_logits.shape or g_exist.shape != output.exist_p.shape:
        raise ShapeError("model backward: upstream gradients do not match cached outputs")
    acts = cache.acts
    grads = {}
    g = _conv_back(params, "head", g_logits, cache, grads)
    g = T.relu_backward(g, acts["dec2.pre"])
    g = T.nearest_up2_backward(_conv_back(params, "dec2", g, cache, grads))
    g = T.relu_backward(g, acts["dec1.pre"])
    g_y = T.nearest_up2_backward(_conv_back(params, "dec1", g, cache, grads))

    g_lin = T.sigmoid_backward(g_exist, output.exist_p)
    g_pooled, grads["exist.w"], grads["exist.b"] = T.linear_backward(
        g_lin, cache.pooled, params["exist.w"])
    g_y = g_y + strip_pool_backward(g_pooled, g_y.shape)

    g_f, bgrads = block.block_backward(block_params(params), table, cache.block_cache, g_y)
    for name, v in bgrads.items():
        grads[f"ht.{name}"] = v
    g = T.relu_backward(g_f, acts["enc3.pre"])
    g = _conv_back(params, "enc3", g, cache, grads)
    g = T.relu_backward(g, acts["enc2.pre"])
    g = _conv_back(params, "enc2", g, cache, grads)
    g = T.relu_backward(g, acts["enc1.pre"])
    g_img = _conv_back(params, "enc1", g, cache, grads)
    return {name: grads[name] for name in params}, g_img
