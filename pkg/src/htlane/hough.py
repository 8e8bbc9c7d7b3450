"""Discrete Hough transform and its inverse over a precomputed vote table.

Pixel coordinates are centered on the image (so the offset axis is
symmetric) and angles cover ``[0, pi)`` in ``n_theta`` equal steps. Each
pixel votes once per angle, into the nearest offset bin. The transform is
therefore a 0/1 sparse matrix ``A`` of shape ``[n_theta*n_rho, H*W]``;
``ht_forward`` applies ``A`` and ``iht_forward`` applies ``A.T / n_theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class HoughConfig:
    H: int
    W: int
    n_rho: int
    n_theta: int

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ConfigError(f"H and W must be >= 1, got {self.H}x{self.W}")
        if self.n_rho < 1 or self.n_rho % 2 == 0:
            raise ConfigError(f"n_rho must be odd, got {self.n_rho}")
        if self.n_theta < 2:
            raise ConfigError(f"n_theta must be >= 2, got {self.n_theta}")

    @property
    def rho_max(self) -> float:
        return math.sqrt(((self.W - 1) / 2) ** 2 + ((self.H - 1) / 2) ** 2)

    @property
    def delta_rho(self) -> float:
        if self.n_rho == 1:
            return 2 * self.rho_max or 1.0
        return 2 * self.rho_max / (self.n_rho - 1)

    @property
    def thetas(self) -> np.ndarray:
        return np.arange(self.n_theta) * (math.pi / self.n_theta)

    def rho_of_bin(self, k: int) -> float:
        return k * self.delta_rho - self.rho_max


DESK = HoughConfig(H=16, W=40, n_rho=43, n_theta=30)
PAPER = HoughConfig(H=26, W=122, n_rho=125, n_theta=60)
PRESETS = {"desk": DESK, "paper": PAPER}


def preset(name: str) -> HoughConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown Hough preset {name!r}; choose from {sorted(PRESETS)}") from None


class BinIndex(NamedTuple):
    theta_idx: int
    rho_idx: int


@dataclass(frozen=True, eq=False)
class VoteTable:
    """Immutable pixel -> offset-bin lookup, one row per angle."""

    config: HoughConfig
    bin_of: np.ndarray  # [n_theta, H, W] int32
    _fwd: sp.csr_matrix = field(repr=False)
    _adj: sp.csr_matrix = field(repr=False)

    @property
    def n_theta(self):
        return self.config.n_theta

    @property
    def n_rho(self):
        return self.config.n_rho

    def operator(self) -> sp.csr_matrix:
        """The transform as a read-only 0/1 matrix ``[n_theta*n_rho, H*W]``."""
        return self._fwd


def _quantize(rho, cfg):
    # v >= 0 up to rounding, so floor(v + 0.5) rounds half away from zero
    v = (rho + cfg.rho_max) / cfg.delta_rho
    return np.clip(np.floor(v + 0.5), 0, cfg.n_rho - 1).astype(np.int32)


def build_vote_table(config: HoughConfig) -> VoteTable:
    H, W, T, R = config.H, config.W, config.n_theta, config.n_rho
    yc = np.arange(H, dtype=np.float64)[:, None] - (H - 1) / 2
    xc = np.arange(W, dtype=np.float64)[None, :] - (W - 1) / 2
    th = config.thetas
    rho = xc[None] * np.cos(th)[:, None, None] + yc[None] * np.sin(th)[:, None, None]
    bin_of = _quantize(rho, config)
    bin_of.setflags(write=False)

    # CSR rows are (angle, bin); columns within a row stay in ascending pixel
    # order so every accumulation runs in raster order.
    P = H * W
    rows = (np.arange(T)[:, None] * R + bin_of.reshape(T, P)).ravel()
    cols = np.tile(np.arange(P), T)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    indptr = np.zeros(T * R + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=T * R), out=indptr[1:])
    data = np.ones(rows.size, dtype=np.float32)
    fwd = sp.csr_matrix((data, cols.astype(np.int32), indptr), shape=(T * R, P))
    fwd.has_sorted_indices = True
    adj = fwd.T.tocsr()
    adj.sort_indices()
    return VoteTable(config, bin_of, fwd, adj)


def _flatten(table, x, trailing, what):
    if x.shape[-len(trailing):] != trailing or x.ndim not in (len(trailing), len(trailing) + 1):
        raise ShapeError(f"{what}: expected [..., {', '.join(map(str, trailing))}], got {x.shape}")
    lead = x.shape[:-len(trailing)]
    return lead, np.ascontiguousarray(x.reshape(-1, int(np.prod(trailing))).T)


def ht_forward(table: VoteTable, f: np.ndarray) -> np.ndarray:
    """Scatter-add each pixel into its bin at every angle.

    ``f`` is [H,W] or [C,H,W]; the result is [n_theta,n_rho] or
    [C,n_theta,n_rho].
    """
    cfg = table.config
    lead, cols = _flatten(table, f, (cfg.H, cfg.W), "ht_forward")
    out = table._fwd @ cols
    return np.ascontiguousarray(out.T).reshape(*lead, cfg.n_theta, cfg.n_rho)


def _gather(table, h, what):
    cfg = table.config
    lead, cols = _flatten(table, h, (cfg.n_theta, cfg.n_rho), what)
    out = table._adj @ cols
    return np.ascontiguousarray(out.T).reshape(*lead, cfg.H, cfg.W)


def iht_forward(table: VoteTable, h: np.ndarray) -> np.ndarray:
    """Average, per pixel, the bins that pixel votes into."""
    return _gather(table, h, "iht_forward") * h.dtype.type(1.0 / table.n_theta)


def ht_backward(table: VoteTable, upstream: np.ndarray) -> np.ndarray:
    """Transpose of :func:`ht_forward` (equals ``n_theta * iht_forward``)."""
    return _gather(table, upstream, "ht_backward")


def iht_backward(table: VoteTable, upstream: np.ndarray) -> np.ndarray:
    return ht_forward(table, upstream) * upstream.dtype.type(1.0 / table.n_theta)


def global_argmax(h: np.ndarray) -> BinIndex:
    """Location of the maximum of a [n_theta,n_rho] map, first on ties."""
    if h.ndim != 2 or h.size == 0:
        raise ShapeError(f"global_argmax: need a non-empty [n_theta,n_rho] map, got {h.shape}")
    j, k = np.unravel_index(int(np.argmax(h)), h.shape)
    return BinIndex(int(j), int(k))
