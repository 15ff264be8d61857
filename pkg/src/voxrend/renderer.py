"""Differentiable compositing: SDF -> alpha -> transmittance weights ->
color/depth/semantic integrals.

Alpha comes from consecutive SDF samples through a sharpness-modulated
logistic, ``alpha_j = max((sig(s*s_j) - sig(s*s_{j+1})) / sig(s*s_j), 0)``,
evaluated in log space so extreme sharpness never overflows:
``sig(y)/sig(x) = exp(softplus(-x) - softplus(-y))``.  The last sample
closes one-sided with alpha 0, which keeps the weight sum at most 1.
Alphas are clipped to ``1 - 1e-7`` so log transmittance stays finite.

Ray parameters are distances along unit directions; the dataset z-depth
convention is converted per ray by the training/eval layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DomainError
from .fields import FieldBundle, eval_normal, eval_rgb, eval_sdf, eval_semantic
from .geometry import (Intrinsics, Pose, Ray, ray_aabb_clip_batch, rays_for_pixels,
                       sample_t_batch)
from .volume import DenseVolume, trilinear_query

ALPHA_MAX = 1.0 - 1e-7


@dataclass
class RaySampleBatch:
    """Record of one differentiable render over a batch of rays."""

    t: np.ndarray  # (r, d) sorted ray parameters
    points: np.ndarray  # (r*d, 3)
    sdf: np.ndarray  # (r, d)
    color: np.ndarray  # (r*d, 3) per-sample colors
    semantic: np.ndarray | None  # (r*d, sem) or None
    normals: np.ndarray  # (r*d, 3), stop-gradient
    normal_fallback: np.ndarray  # (r*d,) bool
    alphas: np.ndarray  # (r, d)
    weights: np.ndarray  # (r, d)
    rgb: np.ndarray  # (r, 3) composited
    depth: np.ndarray  # (r,) composited ray distance
    sem: np.ndarray | None  # (r, sem) composited
    weight_sum: np.ndarray  # (r,)
    # tape handles (None when rendered tape-free)
    rgb_node: object = None
    depth_node: object = None
    sem_node: object = None
    wsum_node: object = None

    def __post_init__(self):
        if np.any(np.diff(self.t, axis=1) <= 0):
            raise ContractError("ray parameters must be strictly increasing")


def alpha_from_sdf(s_j, s_next, sharpness):
    """Opacity of the interval between two consecutive SDF samples."""
    sv, nv = ad.value_of(s_j), ad.value_of(s_next)
    if not (np.isfinite(sv).all() and np.isfinite(nv).all()):
        raise ContractError("non-finite SDF values reached the compositor")
    if np.any(ad.value_of(sharpness) <= 0):
        raise DomainError("sharpness must be positive")
    x = ad.mul(s_j, sharpness)
    y = ad.mul(s_next, sharpness)
    # sig(y)/sig(x) in log space; subtraction order keeps alpha = 1 - ratio
    ratio = ad.exp(ad.sub(ad.softplus(ad.mul(x, -1.0)), ad.softplus(ad.mul(y, -1.0))))
    return ad.clamp(ad.sub(1.0, ratio), 0.0, ALPHA_MAX)


def weights_from_alphas(alphas):
    """NeuS weights: ``w_j = T_j * alpha_j`` with ``T_j = prod_{k<j}(1-alpha_k)``.

    Accepts (r, d) stacks; transmittance is computed with an exclusive
    cumulative sum of ``log(1 - alpha)``, valid because alphas are
    clipped below 1.
    """
    av = ad.value_of(alphas)
    if np.any(av < 0) or np.any(av >= 1):
        raise DomainError("alphas must lie in [0, 1)")
    squeeze = av.ndim == 1
    if squeeze:
        alphas = ad.reshape(alphas, (1, av.size))
    log_t = ad.cumsum(ad.log(ad.sub(1.0, alphas)), axis=1)
    ones = np.zeros((ad.value_of(alphas).shape[0], 1))
    log_t_excl = ad.concat([ones, ad.getitem(log_t, (slice(None), slice(None, -1)))], axis=1)
    trans = ad.exp(log_t_excl)
    weights = ad.mul(trans, alphas)
    if squeeze:
        weights = ad.reshape(weights, (av.size,))
        trans = ad.reshape(trans, (av.size,))
    return weights, trans


def render_batch(volumes, bundle: FieldBundle, origins: np.ndarray, dirs: np.ndarray,
                 t: np.ndarray, tape=None, frozen_normals: np.ndarray | None = None,
                 want_semantic: bool | None = None) -> RaySampleBatch:
    """Composite a batch of rays with precomputed sorted t parameters.

    The same code path serves training (``tape`` given: outputs are tape
    nodes) and evaluation (plain arrays).  ``frozen_normals`` feeds the
    finite-difference harness, which must treat normals as the constants
    the gradient engine assumes they are.
    """
    volumes = volumes if isinstance(volumes, (list, tuple)) else [volumes]
    r, d = t.shape
    if want_semantic is None:
        want_semantic = bundle.semantic is not None
    if want_semantic and bundle.semantic is None:
        raise ContractError("semantic render requested without a semantic head")
    pts = (origins[:, None, :] + t[:, :, None] * dirs[:, None, :]).reshape(-1, 3)
    feats = ad.concat([trilinear_query(v, pts) for v in volumes], axis=1) \
        if len(volumes) > 1 else trilinear_query(volumes[0], pts)
    s, h = eval_sdf(bundle, pts, feats)
    if frozen_normals is not None:
        normals, fallback = frozen_normals, np.zeros(len(pts), dtype=bool)
    else:
        normals, fallback = eval_normal(bundle, volumes, pts)
    dirs_per_sample = np.repeat(dirs, d, axis=0)
    color = eval_rgb(bundle, pts, feats, dirs_per_sample, normals, h)
    sem = eval_semantic(bundle, pts, feats, normals, h) if want_semantic else None

    s_rd = ad.reshape(s, (r, d))
    sharp = bundle.sharpness()
    alpha_body = alpha_from_sdf(ad.getitem(s_rd, (slice(None), slice(None, -1))),
                                ad.getitem(s_rd, (slice(None), slice(1, None))), sharp)
    alphas = ad.concat([alpha_body, np.zeros((r, 1))], axis=1)  # one-sided closure
    weights, _ = weights_from_alphas(alphas)

    rgb_out = ad.ray_weighted_sum(weights, color, r, d)
    depth_out = ad.sum_(ad.mul(weights, t), axis=1)
    wsum = ad.sum_(weights, axis=1)
    sem_out = ad.ray_weighted_sum(weights, sem, r, d) if want_semantic else None

    return RaySampleBatch(
        t=t, points=pts,
        sdf=np.asarray(ad.value_of(s_rd)),
        color=np.asarray(ad.value_of(color)),
        semantic=None if sem is None else np.asarray(ad.value_of(sem)),
        normals=normals, normal_fallback=fallback,
        alphas=np.asarray(ad.value_of(alphas)),
        weights=np.asarray(ad.value_of(weights)),
        rgb=np.asarray(ad.value_of(rgb_out)),
        depth=np.asarray(ad.value_of(depth_out)),
        sem=None if sem_out is None else np.asarray(ad.value_of(sem_out)),
        weight_sum=np.asarray(ad.value_of(wsum)),
        rgb_node=rgb_out if tape is not None else None,
        depth_node=depth_out if tape is not None else None,
        sem_node=sem_out if tape is not None else None,
        wsum_node=wsum if tape is not None else None,
    )


def render_ray(volume, bundle: FieldBundle, ray: Ray, near: float, far: float,
               count: int, mode: str = "uniform-center",
               rng: np.random.Generator | None = None) -> RaySampleBatch:
    """Render one ray over [near, far); the clip interval must be valid."""
    if not (0 <= near < far):
        raise DomainError("render_ray needs a valid clip interval")
    t = sample_t_batch(np.array([near]), np.array([far]), count, mode, rng)
    return render_batch(volume, bundle, ray.origin[None, :], ray.direction[None, :], t)


@dataclass
class PixelRenderResult:
    rgb: np.ndarray  # (n, 3)
    depth: np.ndarray  # (n,) ray-distance
    sem: np.ndarray | None
    weight_sum: np.ndarray  # (n,)
    miss: np.ndarray  # (n,) rays that never crossed the volume
    cos_z: np.ndarray  # (n,) z-depth per unit ray distance


def render_pixels(volumes, bundle: FieldBundle, intr: Intrinsics, pose: Pose,
                  pixels: np.ndarray, count: int, mode: str = "uniform-center",
                  rng: np.random.Generator | None = None,
                  chunk: int = 0) -> PixelRenderResult:
    """Per-pixel rendering against the volume bounds.

    Rays that miss the volume AABB are flagged and excluded from
    supervision; their outputs are zero.  Pixel order is preserved and
    results are independent of chunking.
    """
    volumes = volumes if isinstance(volumes, (list, tuple)) else [volumes]
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(pixels)
    sem_dim = bundle.semantic.out_dim if bundle.semantic is not None else 0
    out = PixelRenderResult(
        rgb=np.zeros((n, 3)), depth=np.zeros(n),
        sem=np.zeros((n, sem_dim)) if sem_dim else None,
        weight_sum=np.zeros(n), miss=np.ones(n, dtype=bool), cos_z=np.ones(n),
    )
    if n == 0:
        return out
    origins, dirs, cos_z = rays_for_pixels(intr, pose, pixels)
    out.cos_z = cos_z
    lo, hi = volumes[0].bounds
    t0, t1, hit = ray_aabb_clip_batch(origins, dirs, lo, hi)
    out.miss = ~hit
    idx = np.flatnonzero(hit)
    step = len(idx) if chunk <= 0 else chunk
    for start in range(0, len(idx), step):
        sel = idx[start:start + step]
        t = sample_t_batch(t0[sel], t1[sel], count, mode, rng)
        batch = render_batch(volumes, bundle, origins[sel], dirs[sel], t)
        out.rgb[sel] = batch.rgb
        out.depth[sel] = batch.depth
        out.weight_sum[sel] = batch.weight_sum
        if out.sem is not None and batch.sem is not None:
            out.sem[sel] = batch.sem
    return out


def render_image(volumes, bundle: FieldBundle, intr: Intrinsics, pose: Pose,
                 count: int, chunk: int = 4096):
    """Full-frame deterministic render; returns (rgb, z-depth, acc) maps."""
    us, vs = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    pixels = np.stack([us.ravel(), vs.ravel()], axis=1)
    res = render_pixels(volumes, bundle, intr, pose, pixels, count,
                        mode="uniform-center", chunk=chunk)
    h, w = intr.height, intr.width
    rgb = res.rgb.reshape(h, w, 3)
    zdepth = (res.depth * res.cos_z).reshape(h, w)
    acc = res.weight_sum.reshape(h, w)
    return rgb, zdepth, acc, res
