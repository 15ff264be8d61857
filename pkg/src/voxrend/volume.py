"""Dense feature volumes: densification, the shallow conv, trilinear
queries and the multi-view image lifting branch.

Values live at voxel centers: cell (ix, iy, iz) is centered at
``origin + (i + 0.5) * voxel``.  Data layout is (lx, ly, lz, ch),
x-major then y then z then channel.  Queries outside the voxel-center
lattice hull return zeros, extending the zero padding of empty cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import SparseFeatures
from .errors import DomainError, FormatError
from .geometry import Intrinsics, Pose, project_points


@dataclass
class DenseVolume:
    dims: tuple[int, int, int]
    channels: int
    origin: np.ndarray  # (3,) meters
    voxel: np.ndarray  # (3,) meters
    data: object  # (lx, ly, lz, ch) ndarray or ad.Var
    dropped_points: int = 0  # points outside the bounds during densify

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if any(d <= 0 for d in self.dims):
            raise DomainError("volume dims must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.voxel = np.asarray(self.voxel, dtype=np.float64).reshape(3)
        if np.any(self.voxel <= 0):
            raise DomainError("voxel sizes must be positive")
        shape = (*self.dims, self.channels)
        if ad.value_of(self.data).shape != shape:
            raise DomainError(f"data shape {ad.value_of(self.data).shape} != {shape}")

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = self.origin
        hi = self.origin + np.asarray(self.dims) * self.voxel
        return lo, hi

    def plain(self) -> np.ndarray:
        return ad.value_of(self.data)


@dataclass
class ConvParams:
    """One zero-padded 3x3x3 convolution with bias and a nonlinearity tag."""

    kernel: object  # (3, 3, 3, ch_in, ch_out)
    bias: object  # (ch_out,)
    nonlinearity: str = "softplus"  # or "linear"

    def __post_init__(self):
        k = ad.value_of(self.kernel)
        if k.ndim != 5 or k.shape[:3] != (3, 3, 3):
            raise DomainError("kernel must be (3,3,3,ch_in,ch_out)")
        if ad.value_of(self.bias).shape != (k.shape[4],):
            raise DomainError("bias width must match kernel output channels")
        if self.nonlinearity not in ("softplus", "linear"):
            raise DomainError(f"unknown nonlinearity {self.nonlinearity!r}")


@dataclass
class ImageFeatureSet:
    """Per-view 2D feature maps, their cameras, and optional mask bitmaps."""

    feats: list  # (h', w', ch) arrays
    cameras: list  # (Intrinsics, Pose) pairs
    masks: list = field(default_factory=list)  # (h', w') bool, True = zeroed

    def __post_init__(self):
        if len(self.feats) != len(self.cameras):
            raise DomainError("every feature map needs a paired camera")
        if self.masks and len(self.masks) != len(self.feats):
            raise DomainError("mask count must match view count")


def densify(sf: SparseFeatures, dims, origin, voxel) -> DenseVolume:
    """Average per-point features into voxels; empties stay exactly zero."""
    dims = tuple(int(d) for d in dims)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    voxel = np.broadcast_to(np.asarray(voxel, dtype=np.float64), (3,)).copy()
    if any(d <= 0 for d in dims) or np.any(voxel <= 0):
        raise DomainError("dims and voxel sizes must be positive")
    ch = ad.value_of(sf.feats).shape[1]
    idx = np.floor((sf.coords - origin) / voxel).astype(np.int64)
    inb = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    dropped = int(len(idx) - inb.sum())
    cells = int(np.prod(dims))
    feats_in = sf.feats if isinstance(sf.feats, ad.Var) else np.asarray(sf.feats, np.float64)
    feats_in = ad.getitem(feats_in, np.flatnonzero(inb)) if isinstance(feats_in, ad.Var) \
        else feats_in[inb]
    flat_idx = (idx[inb, 0] * dims[1] + idx[inb, 1]) * dims[2] + idx[inb, 2]
    flat = ad.scatter_mean(feats_in, flat_idx, cells)
    data = ad.reshape(flat, (*dims, ch))
    return DenseVolume(dims, ch, origin, voxel, data, dropped)


def refine(vol: DenseVolume, params: ConvParams) -> DenseVolume:
    """Shallow dense conv over the volume; same dims, new channel count."""
    k = ad.value_of(params.kernel)
    if k.shape[3] != vol.channels:
        raise DomainError(f"conv expects {k.shape[3]} channels, volume has {vol.channels}")
    out = ad.conv3x3(vol.data, params.kernel, params.bias)
    if params.nonlinearity == "softplus":
        out = ad.softplus(out)
    return DenseVolume(vol.dims, k.shape[4], vol.origin, vol.voxel, out,
                       vol.dropped_points)


def identity_conv_params(channels: int) -> ConvParams:
    """Center-tap identity kernel with linear tag (refine becomes a no-op)."""
    k = np.zeros((3, 3, 3, channels, channels))
    k[1, 1, 1] = np.eye(channels)
    return ConvParams(k, np.zeros(channels), "linear")


def trilinear_setup(vol_dims, origin, voxel, pts: np.ndarray):
    """Precompute flat corner indices and weights for trilinear queries.

    Out-of-hull points get all-zero weights (their indices are clamped
    to valid cells so the gather stays in range but contributes 0).
    """
    dims = np.asarray(vol_dims)
    local = (np.asarray(pts, dtype=np.float64) - origin) / voxel - 0.5
    inside = np.all((local >= 0.0) & (local <= dims - 1.0), axis=1)
    base = np.floor(local).astype(np.int64)
    # keep base+1 addressable; the exact top face still interpolates because
    # its fractional weight lands on the clamped +1 corner
    base = np.clip(base, 0, np.maximum(dims - 2, 0))
    frac = local - base
    n = len(local)
    w = np.empty((n, 8))
    idx = np.empty((n, 8), dtype=np.int64)
    corner = 0
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                w[:, corner] = wx * wy * wz
                idx[:, corner] = ((base[:, 0] + dx) * dims[1] + base[:, 1] + dy) \
                    * dims[2] + base[:, 2] + dz
                corner += 1
    w[~inside] = 0.0
    idx[~inside] = 0
    np.clip(idx, 0, int(np.prod(dims)) - 1, out=idx)  # zero-weight corners stay in range
    return idx, w, inside


def trilinear_query(vol: DenseVolume, pts, tape=None):
    """Interpolate volume features at world points (n, 3) -> (n, ch).

    Differentiable w.r.t. the volume data; piecewise differentiable in
    the points (which the pipeline treats as constants).
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    idx, w, _ = trilinear_setup(vol.dims, vol.origin, vol.voxel, pts)
    flat = ad.reshape(vol.data, (int(np.prod(vol.dims)), vol.channels))
    return ad.gather_interp(flat, idx, w, int(np.prod(vol.dims)))


def trilinear_query_single(vol: DenseVolume, p) -> np.ndarray:
    return np.asarray(ad.value_of(trilinear_query(vol, np.asarray(p).reshape(1, 3))))[0]


def mask_image(img: np.ndarray, patch: int, ratio: float,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero square patches of the image; returns (masked copy, bitmap).

    The image is tiled into patch x patch blocks (ragged edge blocks
    allowed) and ``floor(ratio * num_blocks)`` blocks are zeroed
    uniformly at random.  The bitmap marks zeroed pixels.
    """
    if patch <= 0:
        raise DomainError("patch size must be positive")
    if not (0.0 <= ratio <= 1.0):
        raise DomainError("mask ratio must be in [0, 1]")
    img = np.array(img, dtype=np.float64, copy=True)
    h, w = img.shape[:2]
    by = (h + patch - 1) // patch
    bx = (w + patch - 1) // patch
    n_mask = int(np.floor(ratio * by * bx))
    bitmap = np.zeros((h, w), dtype=bool)
    if n_mask:
        chosen = rng.choice(by * bx, size=n_mask, replace=False)
        for b in chosen:
            y0 = (b // bx) * patch
            x0 = (b % bx) * patch
            img[y0:y0 + patch, x0:x0 + patch] = 0.0
            bitmap[y0:y0 + patch, x0:x0 + patch] = True
    return img, bitmap


def lift_images(feats: ImageFeatureSet, dims, origin, voxel) -> DenseVolume:
    """Fill a volume by projecting voxel centers into the views.

    Each voxel center is projected into every camera; where it lands
    with positive depth and full bilinear support inside the feature
    lattice, the map is sampled; the voxel value is the mean over
    contributing views (zero when none contribute).
    """
    if not feats.feats:
        raise DomainError("lift_images needs at least one view")
    dims = tuple(int(d) for d in dims)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    voxel = np.broadcast_to(np.asarray(voxel, dtype=np.float64), (3,)).copy()
    ch = np.asarray(feats.feats[0]).shape[2]
    centers = voxel_centers(dims, origin, voxel)
    acc = np.zeros((len(centers), ch))
    hits = np.zeros(len(centers))
    for fmap, (intr, pose) in zip(feats.feats, feats.cameras):
        fmap = np.asarray(fmap, dtype=np.float64)
        if fmap.shape[2] != ch:
            raise DomainError("feature maps must share channel count")
        pix, depth, behind = project_points(intr, pose, centers)
        val, ok = bilinear_sample(fmap, pix)
        ok &= ~behind
        acc[ok] += val[ok]
        hits[ok] += 1.0
    nz = hits > 0
    acc[nz] /= hits[nz, None]
    return DenseVolume(dims, ch, origin, voxel, acc.reshape(*dims, ch))


def voxel_centers(dims, origin, voxel) -> np.ndarray:
    """(lx*ly*lz, 3) centers in data layout order (x-major, then y, z)."""
    ix, iy, iz = np.meshgrid(np.arange(dims[0]), np.arange(dims[1]),
                             np.arange(dims[2]), indexing="ij")
    idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
    return origin + (idx + 0.5) * voxel


def bilinear_sample(fmap: np.ndarray, pix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample (h, w, ch) at image coords; feature (i, j) sits at pixel
    center (j + 0.5, i + 0.5).  Returns (values, in-support mask)."""
    h, w = fmap.shape[:2]
    x = pix[:, 0] - 0.5
    y = pix[:, 1] - 0.5
    ok = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(y), np.int64)
    fx = x - x0
    fy = y - y0
    if w == 1:
        fx = np.zeros_like(fx)
    if h == 1:
        fy = np.zeros_like(fy)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    val = (fmap[y0, x0] * ((1 - fx) * (1 - fy))[:, None]
           + fmap[y0, x1] * (fx * (1 - fy))[:, None]
           + fmap[y1, x0] * ((1 - fx) * fy)[:, None]
           + fmap[y1, x1] * (fx * fy)[:, None])
    return val, ok


def save_volume(path, vol: DenseVolume) -> None:
    """Debug dump: one JSON header line, newline, raw little-endian f64."""
    header = {
        "dims": list(vol.dims), "channels": vol.channels,
        "origin": [float(v) for v in vol.origin],
        "voxel": [float(v) for v in vol.voxel], "dtype": "f64",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        fh.write(vol.plain().astype("<f8").tobytes())


def load_volume(path) -> DenseVolume:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"volume header: {exc}") from exc
        if header.get("dtype") != "f64":
            raise FormatError(f"unsupported volume dtype {header.get('dtype')!r}")
        dims = tuple(header["dims"])
        ch = header["channels"]
        raw = fh.read()
    expect = int(np.prod(dims)) * ch * 8
    if len(raw) != expect:
        raise FormatError(f"volume payload is {len(raw)} bytes, expected {expect}")
    data = np.frombuffer(raw, dtype="<f8").reshape(*dims, ch).copy()
    return DenseVolume(dims, ch, np.asarray(header["origin"]),
                       np.asarray(header["voxel"]), data)
