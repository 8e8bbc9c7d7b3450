"""Segmentation, lane-existence and Hough max-bin losses with exact gradients.

Segmentation and Hough losses return gradients w.r.t. the segmentation
logits; the existence loss returns its gradient w.r.t. the existence
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .hough import VoteTable, global_argmax, ht_backward, ht_forward


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    beta: float = 0.01
    tau: float = 0.9
    bg_weight: float = 0.4
    eps: float = 1e-8
    pseudo_threshold: float = 0.9
    ht_on_labeled: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if not (0 < self.tau < 1 and 0 < self.pseudo_threshold < 1):
            raise ConfigError("tau and pseudo_threshold must lie in (0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be > 0")


@dataclass
class LossBundle:
    l_seg: float = 0.0
    l_lane: float = 0.0
    l_ht: float = 0.0
    l_total: float = 0.0
    g_logits: np.ndarray | None = None
    g_exist: np.ndarray | None = None
    ht_report: list = field(default_factory=list)


def seg_loss(seg_probs, target, cfg: LossConfig = LossConfig()):
    """Class-weighted pixel cross-entropy, averaged over pixels.

    Background pixels are down-weighted by ``cfg.bg_weight``.
    """
    n_cls = seg_probs.shape[0]
    if target.shape != seg_probs.shape[1:]:
        raise DataError(f"target mask {target.shape} vs predictions {seg_probs.shape[1:]}")
    bad = np.argwhere((target < 0) | (target >= n_cls))
    if bad.size:
        r, c = bad[0]
        raise DataError(f"label {int(target[r, c])} out of range [0,{n_cls - 1}] "
                        f"at pixel (row {r}, col {c})")
    dt = seg_probs.dtype.type
    idx = target.astype(np.intp)[None]
    p_t = np.take_along_axis(seg_probs, idx, axis=0)[0]
    w = np.where(target == 0, dt(cfg.bg_weight), dt(1))
    n = dt(target.size)
    eps = dt(cfg.eps)
    loss = float((w * -np.log(p_t + eps)).sum() / n)
    g_probs = np.zeros_like(seg_probs)
    np.put_along_axis(g_probs, idx, (-w / (n * (p_t + eps)))[None], axis=0)
    return loss, T.softmax_channels_backward(g_probs, seg_probs)


def lane_loss(exist_p, target, cfg: LossConfig = LossConfig()):
    """Mean binary cross-entropy over lanes; gradient w.r.t. ``exist_p``."""
    t = np.asarray(target, dtype=exist_p.dtype)
    if t.shape != exist_p.shape:
        raise DataError(f"existence target {t.shape} vs predictions {exist_p.shape}")
    eps = exist_p.dtype.type(cfg.eps)
    k = exist_p.dtype.type(exist_p.size)
    terms = -(t * np.log(exist_p + eps) + (1 - t) * np.log(1 - exist_p + eps))
    grad = (-t / (exist_p + eps) + (1 - t) / (1 - exist_p + eps)) / k
    return float(terms.mean()), grad


def pool_to_hough(seg_probs):
    """Lane channels (1..K) pooled twice to the Hough resolution."""
    return T.avgpool2(T.avgpool2(seg_probs[1:]))


def ht_term(h, eps):
    """Max-bin term for one [n_theta,n_rho] map.

    Returns ``(term, grad_h, info)``; ``term`` is None when the column at
    the maximum carries no mass.
    """
    j, k = global_argmax(h)
    col = h[j]
    s = col.sum()
    info = {"theta_idx": j, "rho_idx": k, "col_sum": float(s)}
    if s < eps:
        return None, None, info
    dt = h.dtype.type
    eps = dt(eps)
    term = float(-np.log((col[k] + eps) / (s + eps)))
    g = np.zeros_like(h)
    g[j] = 1 / (s + eps)
    g[j, k] -= 1 / (col[k] + eps)
    return term, g, info


def ht_loss(seg_probs, exist_p, table: VoteTable, cfg: LossConfig = LossConfig()):
    """Hough max-bin loss over lane channels whose existence exceeds ``tau``.

    For each gated lane channel the mask is pooled to the vote-table
    resolution and transformed; the loss is ``-log`` of the global maximum's
    share of its angle column. The maximum's location is treated as a
    constant and the gate receives no gradient. Returns
    ``(loss, grad_logits, report)``.
    """
    k_lanes = seg_probs.shape[0] - 1
    pooled = pool_to_hough(seg_probs)
    report = []
    terms, grads = [], {}
    for c in range(k_lanes):
        entry = {"lane": c + 1, "p": float(exist_p[c]), "gated": bool(exist_p[c] > cfg.tau)}
        report.append(entry)
        if not entry["gated"]:
            continue
        h = ht_forward(table, pooled[c])
        term, g_h, info = ht_term(h, cfg.eps)
        entry.update(info)
        entry["skipped"] = term is None
        if term is None:
            continue
        entry["term"] = term
        terms.append(term)
        grads[c] = g_h
    g_logits = np.zeros_like(seg_probs)
    if not terms:
        return 0.0, g_logits, report
    n = seg_probs.dtype.type(len(terms))
    g_pooled = np.zeros_like(pooled)
    for c, g_h in grads.items():
        g_pooled[c] = ht_backward(table, g_h) / n
    g_probs = np.zeros_like(seg_probs)
    g_probs[1:] = T.avgpool2_backward(T.avgpool2_backward(g_pooled))
    return float(np.mean(terms)), T.softmax_channels_backward(g_probs, seg_probs), report


def total_loss(seg=None, lane=None, ht=None, cfg: LossConfig = LossConfig(),
               sample_kind="labeled"):
    """Combine ``(value, grad)`` parts into a :class:`LossBundle`.

    Labeled samples must supply ``seg`` and ``lane``. Unlabeled samples may
    supply ``seg`` when pseudo-labels exist; ``lane`` is then optional.
    ``ht`` is whatever :func:`ht_loss` returned, or None when the Hough term
    is disabled for this sample.
    """
    if sample_kind not in ("labeled", "unlabeled"):
        raise ValueError(f"unknown sample kind {sample_kind!r}")
    if sample_kind == "labeled" and (seg is None or lane is None):
        raise DataError("labeled sample is missing its segmentation or existence targets")
    b = LossBundle()
    g_logits = None
    if seg is not None:
        b.l_seg, g_logits = seg[0], seg[1].copy()
    if lane is not None:
        b.l_lane = lane[0]
        b.g_exist = lane[1] * lane[1].dtype.type(cfg.alpha)
    if ht is not None:
        b.l_ht, g_ht, b.ht_report = ht[0], ht[1], ht[2]
        if cfg.beta:
            scaled = g_ht * g_ht.dtype.type(cfg.beta)
            g_logits = scaled if g_logits is None else g_logits + scaled
        elif g_logits is None:
            g_logits = np.zeros_like(g_ht)
    b.l_total = b.l_seg + cfg.alpha * b.l_lane + cfg.beta * b.l_ht
    b.g_logits = g_logits
    return b


def make_pseudo_labels(output, cfg: LossConfig = LossConfig()):
    """Hard labels from confident predictions, or None if no lane is confident.

    Lanes with existence above ``pseudo_threshold`` are kept; each pixel is
    assigned to whichever of background or the kept lanes is most probable.
    """
    keep = np.flatnonzero(output.exist_p > cfg.pseudo_threshold)
    if keep.size == 0:
        return None
    channels = np.concatenate([[0], keep + 1])
    mask = channels[np.argmax(output.seg_probs[channels], axis=0)].astype(np.uint8)
    exist = np.zeros(output.exist_p.shape, dtype=np.uint8)
    exist[keep] = 1
    return mask, exist
