"""Reference point encoder: pointwise MLP plus a radius-mean aggregary.

This stands in for a real sparse backbone behind the same contract: any
callable mapping a point cloud to per-point output features
differentiably can replace it.  Coordinates pass through untouched and
never enter the MLP, so the features are translation invariant; the
neighborhood mean (grid-hash, relative) adds local context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DomainError
from .pointcloud import PointCloud


@dataclass
class SparseFeatures:
    coords: np.ndarray  # (m, 3)
    feats: object  # (m, ch_out) ndarray or ad.Var

    def __post_init__(self):
        if len(self.coords) != len(ad.value_of(self.feats)):
            raise DomainError("coords and feats must have equal row counts")


@dataclass
class EncoderParams:
    """Per-point MLP weights plus the pooling radius in meters."""

    layers: list[tuple]  # [(w, b), ...]; softplus between layers, linear output
    radius: float = 0.05

    def __post_init__(self):
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if ad.value_of(w0).shape[1] != ad.value_of(w1).shape[0]:
                raise DomainError("encoder layer dimensions do not chain")
        if self.radius < 0:
            raise DomainError("pooling radius must be >= 0")

    @property
    def in_channels(self) -> int:
        return ad.value_of(self.layers[0][0]).shape[0]

    @property
    def out_channels(self) -> int:
        return ad.value_of(self.layers[-1][0]).shape[1]


def init_encoder_params(ch_in: int, hidden: list[int], ch_out: int, radius: float,
                        rng: np.random.Generator) -> list[np.ndarray]:
    """He-style initial arrays in checkpoint order [w0, b0, w1, b1, ...]."""
    sizes = [ch_in] + list(hidden) + [ch_out]
    arrays = []
    for a, b in zip(sizes, sizes[1:]):
        arrays.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
        arrays.append(np.zeros(b))
    return arrays


def encode(pc: PointCloud, params: EncoderParams, tape=None) -> SparseFeatures:
    """Per-point features: ``mlp(f_i) + mean_{j in N(i)} mlp(f_j)``.

    N(i) collects strict-radius neighbors (0 < |c_j - c_i| <= r is not
    required; coincident points count, the point itself does not); an
    empty neighborhood contributes zero, so radius 0 degenerates to the
    pure pointwise MLP.
    """
    if pc.feats.shape[1] != params.in_channels:
        raise DomainError(
            f"encoder expects {params.in_channels} channels, cloud has {pc.feats.shape[1]}")
    x = _mlp(pc.feats, params.layers)
    if params.radius > 0 and pc.count > 0:
        src, dst = radius_edges(pc.coords, params.radius)
        if len(src):
            pooled = ad.segment_mean_edges(x, src, dst, pc.count)
            x = ad.add(x, pooled)
    return SparseFeatures(pc.coords, x)


def _mlp(x, layers):
    for i, (w, b) in enumerate(layers):
        x = ad.add(ad.matmul(x, w), b)
        if i < len(layers) - 1:
            x = ad.softplus(x)
    return x


def radius_edges(coords: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Directed neighbor pairs (src -> dst) with |c_src - c_dst| <= radius, src != dst.

    Grid-hash construction: points are bucketed into radius-sized cells
    and only the 27 surrounding buckets are scanned, so cost stays near
    linear for uniformly dense clouds.  Edge order is deterministic.
    """
    n = len(coords)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    cell = np.floor(coords / radius).astype(np.int64)
    cell -= cell.min(axis=0)
    dims = cell.max(axis=0) + 1
    key = (cell[:, 0] * dims[1] + cell[:, 1]) * dims[2] + cell[:, 2]
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    srcs, dsts = [], []
    r2 = radius * radius
    for ox in (-1, 0, 1):
        for oy in (-1, 0, 1):
            for oz in (-1, 0, 1):
                ncell = cell + np.array([ox, oy, oz])
                valid = np.all((ncell >= 0) & (ncell < dims), axis=1)
                nk = (ncell[:, 0] * dims[1] + ncell[:, 1]) * dims[2] + ncell[:, 2]
                nk[~valid] = -1
                lo = np.searchsorted(sorted_key, nk, side="left")
                hi = np.searchsorted(sorted_key, nk, side="right")
                counts = hi - lo
                if counts.sum() == 0:
                    continue
                dst = np.repeat(np.arange(n), counts)
                ranges = [order[a:b] for a, b in zip(lo, hi) if b > a]
                src = np.concatenate(ranges)
                d2 = ((coords[src] - coords[dst]) ** 2).sum(axis=1)
                ok = (d2 <= r2) & (src != dst)
                srcs.append(src[ok])
                dsts.append(dst[ok])
    if not srcs:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    order = np.lexsort((src, dst))
    return src[order], dst[order]
