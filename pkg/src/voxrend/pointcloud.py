"""Point clouds: grid sampling, augmentation, group masking, RGB-D fusion.

Feature column convention: when a cloud carries both colors and
normals, colors occupy columns 0-2 and normals columns 3-5.  The
``normal_cols`` attribute records which columns co-rotate with the
coordinates under augmentation; color channels are never touched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError
from .geometry import Intrinsics, Pose


@dataclass
class PointCloud:
    coords: np.ndarray  # (n, 3) meters
    feats: np.ndarray  # (n, ch)
    normal_cols: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim == 1:
            self.feats = self.feats[:, None]
        if len(self.coords) != len(self.feats):
            raise DomainError("coords and feats must have equal row counts")
        if not (np.isfinite(self.coords).all() and np.isfinite(self.feats).all()):
            raise DomainError("point cloud contains non-finite entries")
        if self.normal_cols and (min(self.normal_cols) < 0
                                 or max(self.normal_cols) >= self.feats.shape[1]):
            raise DomainError("normal_cols out of feature range")

    @property
    def count(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def select(self, index: np.ndarray) -> "PointCloud":
        return PointCloud(self.coords[index], self.feats[index], self.normal_cols)


@dataclass(frozen=True)
class GridSpec:
    cell: np.ndarray  # (3,) meters
    origin: np.ndarray  # (3,) meters

    def __post_init__(self):
        c = np.broadcast_to(np.asarray(self.cell, dtype=np.float64), (3,)).copy()
        o = np.broadcast_to(np.asarray(self.origin, dtype=np.float64), (3,)).copy()
        if np.any(c <= 0):
            raise DomainError("grid cell sizes must be positive")
        object.__setattr__(self, "cell", c)
        object.__setattr__(self, "origin", o)


def grid_sample(pc: PointCloud, grid: GridSpec) -> PointCloud:
    """Keep one representative point per occupied cell.

    The representative is the input point nearest the cell center (ties
    broken by lowest input index); output rows are ordered by ascending
    (iz, iy, ix) cell index.
    """
    if pc.count == 0:
        return pc.select(np.array([], dtype=np.int64))
    idx = np.floor((pc.coords - grid.origin) / grid.cell).astype(np.int64)
    centers = grid.origin + (idx + 0.5) * grid.cell
    dist = np.linalg.norm(pc.coords - centers, axis=1)
    # lexsort: last key is primary -> order by (iz, iy, ix), then distance,
    # then input index so ties resolve to the lowest index.
    order = np.lexsort((np.arange(pc.count), dist, idx[:, 0], idx[:, 1], idx[:, 2]))
    sorted_cells = idx[order]
    first = np.ones(pc.count, dtype=bool)
    first[1:] = np.any(sorted_cells[1:] != sorted_cells[:-1], axis=1)
    return pc.select(order[first])


def augment(pc: PointCloud, params: dict, rng=None) -> tuple[PointCloud, np.ndarray]:
    """Rotate about world z, scale, and optionally mirror the cloud.

    Returns the transformed cloud and the applied homogeneous 4x4
    (linear part = scale * flip * rotation) so cameras or rays can be
    carried into the same frame.  Normal feature columns co-rotate and
    flip but are not scaled.  ``rng`` is accepted for signature
    stability; the transform is fully determined by ``params``.
    """
    rot_z = float(params.get("rot_z", 0.0))
    scale = float(params.get("scale", 1.0))
    flip_x = bool(params.get("flip_x", False))
    flip_y = bool(params.get("flip_y", False))
    if scale <= 0:
        raise DomainError("scale must be positive")
    c, s = np.cos(rot_z), np.sin(rot_z)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    flip = np.diag([-1.0 if flip_x else 1.0, -1.0 if flip_y else 1.0, 1.0])
    ortho = flip @ rot
    linear = scale * ortho
    coords = pc.coords @ linear.T
    feats = pc.feats.copy()
    if pc.normal_cols:
        cols = list(pc.normal_cols)
        feats[:, cols] = feats[:, cols] @ ortho.T
    m = np.eye(4)
    m[:3, :3] = linear
    return PointCloud(coords, feats, pc.normal_cols), m


def mask_groups(pc: PointCloud, num_groups: int, group_size: int, ratio: float,
                rng: np.random.Generator) -> PointCloud:
    """Drop a random fraction of nearest-seed point groups.

    Seeds are ``num_groups`` random point picks (``group_size`` is the
    nominal paper-style group population and only caps the seed count
    via ``n``); every point joins its nearest seed and
    ``floor(ratio * k)`` groups are removed uniformly at random.
    Surviving points keep their original relative order.
    """
    if not (0.0 <= ratio <= 1.0):
        raise DomainError("mask ratio must be in [0, 1]")
    if num_groups < 1 or group_size < 1:
        raise DomainError("num_groups and group_size must be >= 1")
    if pc.count == 0:
        return pc.select(np.array([], dtype=np.int64))
    k = min(num_groups, pc.count)
    seeds = rng.choice(pc.count, size=k, replace=False)
    removed = int(np.floor(ratio * k))
    if removed == 0:
        return pc.select(np.arange(pc.count))
    assign = _nearest_seed(pc.coords, pc.coords[seeds])
    dropped = rng.choice(k, size=removed, replace=False)
    keep = ~np.isin(assign, dropped)
    return pc.select(np.flatnonzero(keep))


def group_partition(pc: PointCloud, num_groups: int, rng: np.random.Generator) -> np.ndarray:
    """Expose the nearest-seed partition used by :func:`mask_groups`."""
    k = min(num_groups, pc.count)
    seeds = rng.choice(pc.count, size=k, replace=False)
    return _nearest_seed(pc.coords, pc.coords[seeds])


def _nearest_seed(coords: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    """Chunked argmin of squared distance (ties -> lowest seed index)."""
    out = np.empty(len(coords), dtype=np.int64)
    step = max(1, int(4e6 // max(len(seeds), 1)))
    for i in range(0, len(coords), step):
        d = ((coords[i:i + step, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
        out[i:i + step] = np.argmin(d, axis=1)
    return out


def backproject_rgbd(depth: np.ndarray, color: np.ndarray, intr: Intrinsics,
                     pose: Pose) -> PointCloud:
    """Lift an RGB-D frame to a world-space cloud (z-depth convention).

    A pixel ``(u, v)`` with depth ``z`` maps to
    ``o + z * R @ ((u+0.5-cx)/fx, (v+0.5-cy)/fy, 1)``; pixels with
    non-finite or non-positive depth are skipped.  Points come out in
    row-major pixel order.
    """
    depth = np.asarray(depth, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    if depth.shape != color.shape[:2]:
        raise DomainError("depth and color must share height and width")
    h, w = depth.shape
    if (h, w) != (intr.height, intr.width):
        raise DomainError("depth map size does not match intrinsics")
    valid = np.isfinite(depth) & (depth > 0)
    vs, us = np.nonzero(valid)
    z = depth[vs, us]
    d_cam = np.stack([
        (us + 0.5 - intr.cx) / intr.fx,
        (vs + 0.5 - intr.cy) / intr.fy,
        np.ones(len(us)),
    ], axis=1)
    coords = pose.translation + (z[:, None] * d_cam) @ pose.rotation.T
    return PointCloud(coords, color[vs, us])


def merge(clouds: list[PointCloud]) -> PointCloud:
    if not clouds:
        raise DomainError("merge needs at least one cloud")
    ch = clouds[0].channels
    norm = clouds[0].normal_cols
    for c in clouds[1:]:
        if c.channels != ch:
            raise DomainError(f"feature channel mismatch: {c.channels} vs {ch}")
        if c.normal_cols != norm:
            raise DomainError("normal column convention mismatch")
    return PointCloud(
        np.concatenate([c.coords for c in clouds]),
        np.concatenate([c.feats for c in clouds]),
        norm,
    )


# ---------------------------------------------------------------------------
# ASCII PLY: x y z [red green blue] [nx ny nz]

_PLY_GROUPS = {
    ("x", "y", "z"): "xyz",
    ("red", "green", "blue"): "rgb",
    ("nx", "ny", "nz"): "normal",
}


def save_ply(path, pc: PointCloud, has_colors: bool | None = None) -> None:
    """Write the canonical ASCII layout.

    Columns 0-2 are emitted as colors when present (unless the cloud is
    normals-only, signalled by ``normal_cols == (0, 1, 2)``).
    """
    n = pc.count
    colors = normals = None
    if pc.normal_cols == (0, 1, 2):
        normals = pc.feats[:, 0:3]
    else:
        if pc.channels >= 3 and (has_colors is None or has_colors):
            colors = pc.feats[:, 0:3]
        if pc.normal_cols:
            normals = pc.feats[:, list(pc.normal_cols)]
    lines = ["ply", "format ascii 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    if normals is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines.append("end_header")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
        for i in range(n):
            parts = [_fmt(v) for v in pc.coords[i]]
            if colors is not None:
                parts += [str(int(round(min(max(v, 0.0), 1.0) * 255))) for v in colors[i]]
            if normals is not None:
                parts += [_fmt(v) for v in normals[i]]
            fh.write(" ".join(parts) + "\n")


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def load_ply(path) -> PointCloud:
    with open(path, encoding="ascii") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise FormatError("not a ply file")
        fmt = fh.readline().strip()
        if fmt != "format ascii 1.0":
            raise FormatError(f"unsupported ply format line: {fmt!r}")
        count = None
        props: list[str] = []
        while True:
            line = fh.readline()
            if not line:
                raise FormatError("ply header missing end_header")
            line = line.strip()
            if line.startswith("comment"):
                continue
            if line.startswith("element"):
                parts = line.split()
                if parts[1] != "vertex":
                    raise FormatError(f"unsupported ply element: {parts[1]!r}")
                count = int(parts[2])
            elif line.startswith("property"):
                parts = line.split()
                ptype, pname = parts[1], parts[2]
                expected = "uchar" if pname in ("red", "green", "blue") else "float"
                if ptype != expected:
                    raise FormatError(f"property {pname!r} must be {expected}, got {ptype!r}")
                props.append(pname)
            elif line == "end_header":
                break
            else:
                raise FormatError(f"unexpected ply header line: {line!r}")
        if count is None:
            raise FormatError("ply header missing vertex element")
        layout = _check_layout(props)
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2, max_rows=count) if count else \
            np.zeros((0, len(props)))
    if data.shape != (count, len(props)):
        raise FormatError(f"ply payload shape {data.shape} does not match header")
    coords = data[:, 0:3]
    feats_parts = []
    normal_cols: tuple[int, ...] = ()
    col = 3
    if "rgb" in layout:
        feats_parts.append(data[:, col:col + 3] / 255.0)
        col += 3
    if "normal" in layout:
        normal_cols = tuple(range(col - 3, col)) if "rgb" in layout else (0, 1, 2)
        feats_parts.append(data[:, col:col + 3])
        col += 3
    feats = np.concatenate(feats_parts, axis=1) if feats_parts else np.zeros((count, 0))
    return PointCloud(coords, feats, normal_cols)


def _check_layout(props: list[str]) -> list[str]:
    groups = []
    i = 0
    while i < len(props):
        tail = tuple(props[i:i + 3])
        if tail in _PLY_GROUPS:
            groups.append(_PLY_GROUPS[tail])
            i += 3
        else:
            raise FormatError(f"unsupported ply property {props[i]!r}")
    if not groups or groups[0] != "xyz":
        raise FormatError("ply must start with x y z properties")
    rest = groups[1:]
    if rest not in ([], ["rgb"], ["normal"], ["rgb", "normal"]):
        raise FormatError(f"unsupported ply property layout: {' '.join(rest)}")
    return rest
