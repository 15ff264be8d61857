"""Marching-cubes surface extraction from the learned SDF and mesh
quality metrics.

The extraction lattice is a fresh uniform grid of cell corners spanning
the feature volume's bounds, so mesh resolution is independent of the
feature resolution.  Vertices are created once per lattice edge and
shared between adjacent cells, which makes watertightness exact on
closed surfaces.  Triangles are oriented so their normals point toward
positive SDF.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError
from .fields import FieldBundle, sdf_scalar_plain
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

_DEGENERATE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (v, 3) meters
    triangles: np.ndarray  # (t, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise DomainError("triangle index out of range")

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def marching_cubes(values: np.ndarray, lattice_origin, spacing, iso: float = 0.0,
                   ) -> TriangleMesh:
    """Triangulate the iso level of a scalar lattice (nx, ny, nz).

    Corners with ``value < iso`` count as inside.  Edge vertices are
    keyed by (lattice edge), computed once, and linearly interpolated;
    degenerate (sub-1e-12 area) triangles are dropped.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 3 or min(vals.shape) < 2:
        raise DomainError("lattice must be 3d with at least 2 samples per axis")
    origin = np.asarray(lattice_origin, dtype=np.float64).reshape(3)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,)).copy()
    nx, ny, nz = vals.shape
    inside = vals < iso

    # cube case index per cell, from the 8 corner inside-bits
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int32)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        case |= inside[ox:nx - 1 + ox, oy:ny - 1 + oy, oz:nz - 1 + oz] << bit
    active = np.argwhere((case > 0) & (case < 255))

    vert_ids: dict[tuple[int, int, int, int], int] = {}
    verts: list[np.ndarray] = []
    tris: list[tuple[int, int, int]] = []

    def edge_vertex(cx: int, cy: int, cz: int, edge: int) -> int:
        c0, c1 = EDGE_CORNERS[edge]
        o0, o1 = CORNER_OFFSETS[c0], CORNER_OFFSETS[c1]
        p0 = (cx + o0[0], cy + o0[1], cz + o0[2])
        p1 = (cx + o1[0], cy + o1[1], cz + o1[2])
        # canonical key: the lattice edge (min endpoint, axis)
        axis = 0 if p0[0] != p1[0] else (1 if p0[1] != p1[1] else 2)
        lo = min(p0, p1)
        key = (*lo, axis)
        vid = vert_ids.get(key)
        if vid is not None:
            return vid
        v0 = vals[p0]
        v1 = vals[p1]
        t = (iso - v0) / (v1 - v0)
        pos = origin + spacing * (np.asarray(p0, dtype=np.float64)
                                  + t * (np.asarray(p1) - np.asarray(p0)))
        vid = len(verts)
        vert_ids[key] = vid
        verts.append(pos)
        return vid

    for cx, cy, cz in active:
        code = case[cx, cy, cz]
        if EDGE_TABLE[code] == 0:
            continue
        tri_edges = TRI_TABLE[code]
        for i in range(0, len(tri_edges), 3):
            ids = (edge_vertex(cx, cy, cz, tri_edges[i]),
                   edge_vertex(cx, cy, cz, tri_edges[i + 1]),
                   edge_vertex(cx, cy, cz, tri_edges[i + 2]))
            if ids[0] == ids[1] or ids[1] == ids[2] or ids[0] == ids[2]:
                continue
            tris.append(ids)

    if not tris:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    mesh = TriangleMesh(np.asarray(verts), np.asarray(tris, dtype=np.int64))
    keep = mesh.areas() > _DEGENERATE_AREA
    return TriangleMesh(mesh.vertices, mesh.triangles[keep])


def extract_mesh(volumes, bundle: FieldBundle, resolution: int, iso: float = 0.0,
                 threads: int = 1) -> TriangleMesh:
    """Marching cubes over the learned SDF sampled on the volume bounds."""
    if resolution < 2:
        raise DomainError("mesh resolution must be >= 2")
    volumes = volumes if isinstance(volumes, (list, tuple)) else [volumes]
    lo, hi = volumes[0].bounds
    spacing = (hi - lo) / (resolution - 1)
    axes = [lo[a] + spacing[a] * np.arange(resolution) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    vals = np.empty(len(pts))
    n_chunks = max(1, threads)
    spans = np.array_split(np.arange(len(pts)), n_chunks * 4)

    def fill(span):
        if len(span):
            vals[span] = sdf_scalar_plain(bundle, volumes, pts[span])
    if threads <= 1:
        for span in spans:
            fill(span)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, spans))
    return marching_cubes(vals.reshape(resolution, resolution, resolution), lo, spacing, iso)


def sample_mesh_points(mesh: TriangleMesh, count: int = 10_000,
                       seed: int = 0) -> np.ndarray:
    """Area-uniform surface samples (seeded, deterministic)."""
    if mesh.empty:
        raise ContractError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    total = areas.sum()
    if total <= 0:
        return mesh.vertices[rng.integers(0, len(mesh.vertices), count)]
    pick = rng.choice(len(areas), size=count, p=areas / total)
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a = mesh.vertices[mesh.triangles[pick, 0]]
    b = mesh.vertices[mesh.triangles[pick, 1]]
    c = mesh.vertices[mesh.triangles[pick, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def chamfer(mesh, reference, samples: int = 10_000, seed: int = 0,
            ) -> tuple[float, float]:
    """Symmetric nearest-neighbor mean distances (mesh->ref, ref->mesh).

    ``mesh`` may be a TriangleMesh (sampled uniformly by area) or a
    point array; ``reference`` is a point array.
    """
    if isinstance(mesh, TriangleMesh):
        pts = sample_mesh_points(mesh, samples, seed)
    else:
        pts = np.asarray(mesh, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0 or len(ref) == 0:
        raise ContractError("chamfer needs non-empty point sets")
    return (_mean_nn(pts, ref), _mean_nn(ref, pts))


def _mean_nn(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over a of the distance to the nearest b (chunked brute force)."""
    total = 0.0
    step = max(1, int(8e6) // max(len(b), 1))
    bb = (b * b).sum(axis=1)
    for i in range(0, len(a), step):
        chunk = a[i:i + step]
        d2 = ((chunk * chunk).sum(axis=1)[:, None] - 2.0 * chunk @ b.T + bb[None, :])
        total += np.sqrt(np.maximum(d2.min(axis=1), 0.0)).sum()
    return total / len(a)


def edge_incidence(mesh: TriangleMesh) -> dict[tuple[int, int], int]:
    """Undirected edge -> incident triangle count (watertight iff all 2)."""
    counts: dict[tuple[int, int], int] = {}
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    return counts


def save_obj(path, mesh: TriangleMesh) -> None:
    """ASCII OBJ: `v x y z` lines then 1-based `f i j k` lines."""
    with open(path, "w", encoding="ascii") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
