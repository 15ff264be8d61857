"""Analytic SDF scenes and the sphere-tracing oracle renderer.

These provide self-contained ground truth: RGB/depth/class-id frames
plus a fused back-projected cloud, replacing any real RGB-D dataset.
Depths are stored in the camera z convention (the parameter of the
z=1-normalized pixel ray), so back-projected points land exactly on
analytic surfaces.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import imgio
from .errors import DomainError, FormatError
from .geometry import Intrinsics, Pose, look_at, save_cameras
from .pointcloud import PointCloud, backproject_rgbd, merge, save_ply

TRACE_EPS = 1e-5
TRACE_STEPS = 64
DEFAULT_LIGHT = np.array([0.35, -0.25, 0.9]) / np.linalg.norm([0.35, -0.25, 0.9])


@dataclass(frozen=True)
class Primitive:
    kind: str  # sphere | box | plane
    params: np.ndarray  # sphere: center+radius; box: center+half; plane: normal+offset
    albedo: np.ndarray  # (3,) in [0,1]
    class_id: int

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        if self.kind == "sphere":
            c, r = self.params[:3], self.params[3]
            return np.linalg.norm(p - c, axis=1) - r
        if self.kind == "box":
            c, he = self.params[:3], self.params[3:6]
            q = np.abs(p - c) - he
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(np.max(q, axis=1), 0.0)
            return outside + inside
        if self.kind == "plane":
            n, off = self.params[:3], self.params[3]
            return p @ n - off
        raise DomainError(f"unknown primitive kind {self.kind!r}")


@dataclass
class AnalyticScene:
    primitives: list[Primitive]

    def __post_init__(self):
        if not self.primitives:
            raise DomainError("scene needs at least one primitive")
        for prim in self.primitives:
            if prim.kind == "sphere" and prim.params[3] <= 0:
                raise DomainError("sphere radius must be positive")
            if prim.kind == "box" and np.any(prim.params[3:6] <= 0):
                raise DomainError("box half extents must be positive")
            if prim.kind == "plane" and abs(np.linalg.norm(prim.params[:3]) - 1) > 1e-9:
                raise DomainError("plane normal must be unit length")

    def bounding_radius(self) -> float:
        """Radius about the origin covering all bounded primitives."""
        r = 0.0
        for prim in self.primitives:
            if prim.kind == "sphere":
                r = max(r, float(np.linalg.norm(prim.params[:3]) + prim.params[3]))
            elif prim.kind == "box":
                r = max(r, float(np.linalg.norm(prim.params[:3])
                                 + np.linalg.norm(prim.params[3:6])))
            else:  # planes are unbounded; use their offset as a weak bound
                r = max(r, abs(float(prim.params[3])) + 1.0)
        return max(r, 1e-6)


def scene_sdf(scene: AnalyticScene, pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Min-union SDF with attributes from the argmin primitive.

    Returns (distance (n,), albedo (n,3), class id (n,)); ties go to the
    lowest primitive index (argmin keeps the first minimum).
    """
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    dists = np.stack([prim.sdf(p) for prim in scene.primitives], axis=1)
    best = np.argmin(dists, axis=1)
    albedo = np.stack([prim.albedo for prim in scene.primitives])[best]
    cls = np.asarray([prim.class_id for prim in scene.primitives], dtype=np.int64)[best]
    return dists[np.arange(len(p)), best], albedo, cls


def scene_normal(scene: AnalyticScene, pts: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    grad = np.empty_like(p)
    for ax in range(3):
        d = np.zeros(3)
        d[ax] = eps
        grad[:, ax] = scene_sdf(scene, p + d)[0] - scene_sdf(scene, p - d)[0]
    norm = np.linalg.norm(grad, axis=1)
    norm[norm == 0] = 1.0
    return grad / norm[:, None]


def oracle_render(scene: AnalyticScene, intr: Intrinsics, pose: Pose,
                  light_dir=DEFAULT_LIGHT, threads: int = 1):
    """Sphere-traced ground truth: (rgb, depth, class map).

    Marching runs along the z=1 unprojection of each pixel, so the hit
    parameter stored in the depth map is camera z-depth; misses store
    depth 0, black color and class 0.  Shading is Lambertian with a 0.1
    ambient floor: ``albedo * (0.9 * max(0, n . light) + 0.1)``.
    """
    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    h, w = intr.height, intr.width
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    cls = np.zeros((h, w), dtype=np.int64)
    max_range = 2.0 * (2.0 * scene.bounding_radius())

    def trace_rows(v0: int, v1: int) -> None:
        vs, us = np.meshgrid(np.arange(v0, v1), np.arange(w), indexing="ij")
        us = us.ravel()
        vs_r = vs.ravel()
        d_cam = np.stack([
            (us + 0.5 - intr.cx) / intr.fx,
            (vs_r + 0.5 - intr.cy) / intr.fy,
            np.ones(len(us)),
        ], axis=1)
        d_world = d_cam @ pose.rotation.T
        d_norm = np.linalg.norm(d_world, axis=1)
        t = np.zeros(len(us))
        alive = np.ones(len(us), dtype=bool)
        hit = np.zeros(len(us), dtype=bool)
        for _ in range(TRACE_STEPS):
            if not alive.any():
                break
            pts = pose.translation + t[alive, None] * d_world[alive]
            dist = scene_sdf(scene, pts)[0]
            newly_hit = dist < TRACE_EPS
            idx = np.flatnonzero(alive)
            hit[idx[newly_hit]] = True
            t[idx] += np.where(newly_hit, 0.0, dist / d_norm[idx])
            dead = newly_hit | (t[idx] > max_range / d_norm[idx])
            alive[idx[dead]] = False
        if hit.any():
            hp = pose.translation + t[hit, None] * d_world[hit]
            _, albedo, cid = scene_sdf(scene, hp)
            n = scene_normal(scene, hp)
            shade = 0.9 * np.maximum(n @ light, 0.0) + 0.1
            rows = vs_r[hit]
            cols = us[hit]
            rgb[rows, cols] = albedo * shade[:, None]
            depth[rows, cols] = t[hit]
            cls[rows, cols] = cid
    if threads <= 1 or h < 2:
        trace_rows(0, h)
    else:
        step = (h + threads - 1) // threads
        spans = [(v, min(v + step, h)) for v in range(0, h, step)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda s: trace_rows(*s), spans))
    return rgb, depth, cls


def ring_cameras(scene: AnalyticScene, n_views: int, resolution: int,
                 radius_scale: float = 1.9, target=None,
                 phase: float = 0.0) -> list[tuple[Intrinsics, Pose]]:
    """Cameras on a two-height ring, all looking at the scene center."""
    r = scene.bounding_radius() * radius_scale
    target = np.array([0.0, 0.0, 0.15 * scene.bounding_radius()]) if target is None \
        else np.asarray(target, dtype=np.float64)
    fov = np.deg2rad(52.0)
    f = 0.5 * resolution / np.tan(0.5 * fov)
    intr = Intrinsics(f, f, resolution / 2.0, resolution / 2.0, resolution, resolution)
    cams = []
    for i in range(n_views):
        ang = 2.0 * np.pi * i / n_views + phase
        elev = np.deg2rad(18.0 if i % 2 == 0 else 38.0)
        eye = np.array([r * np.cos(ang) * np.cos(elev),
                        r * np.sin(ang) * np.cos(elev),
                        target[2] + r * np.sin(elev)])
        cams.append((intr, look_at(eye, target)))
    return cams


def make_dataset(scene: AnalyticScene, out_dir: str, n_views: int, resolution: int,
                 rng: np.random.Generator, fuse_views: int = 5,
                 light_dir=DEFAULT_LIGHT, threads: int = 1) -> dict:
    """Render a ring of views and fuse a cloud from the first k views.

    Writes ``cam_%03d.json``, ``rgb_%03d.ppm``, ``depth_%03d.pfm``,
    ``sem_%03d.pgm`` and ``cloud.ply``; the held-out split is the last
    ceil(20%) views.  ``rng`` jitters the ring phase so different seeds
    give different trajectories.
    """
    if n_views < 2:
        raise DomainError("need at least 2 views")
    os.makedirs(out_dir, exist_ok=True)
    phase = rng.random() * 2.0 * np.pi / max(n_views, 1)
    cams = ring_cameras(scene, n_views, resolution, phase=phase)
    clouds = []
    k = min(fuse_views, n_views)
    for i, (intr, pose) in enumerate(cams):
        rgb, depth, cls = oracle_render(scene, intr, pose, light_dir, threads=threads)
        save_cameras(os.path.join(out_dir, f"cam_{i:03d}.json"), (intr, pose))
        imgio.write_ppm(os.path.join(out_dir, f"rgb_{i:03d}.ppm"), rgb)
        imgio.write_pfm(os.path.join(out_dir, f"depth_{i:03d}.pfm"), depth)
        imgio.write_pgm(os.path.join(out_dir, f"sem_{i:03d}.pgm"), cls)
        if i < k:
            clouds.append(backproject_rgbd(depth, rgb, intr, pose))
    fused = merge(clouds)
    save_ply(os.path.join(out_dir, "cloud.ply"), fused)
    held_out = int(np.ceil(0.2 * n_views))
    return {"views": n_views, "held_out": held_out, "fused_points": fused.count}


def heldout_count(n_views: int) -> int:
    return int(np.ceil(0.2 * n_views))


# ---------------------------------------------------------------------------
# scene JSON: list of primitives


def scene_from_json(payload) -> AnalyticScene:
    if not isinstance(payload, list):
        raise FormatError("scene json must be a list of primitives")
    prims = []
    for i, item in enumerate(payload):
        try:
            kind = item["kind"]
            albedo = np.asarray(item["albedo"], dtype=np.float64).reshape(3)
            class_id = int(item["class_id"])
            if kind == "sphere":
                params = np.array([*item["center"], item["radius"]], dtype=np.float64)
            elif kind == "box":
                params = np.array([*item["center"], *item["half_extents"]],
                                  dtype=np.float64)
            elif kind == "plane":
                params = np.array([*item["normal"], item["offset"]], dtype=np.float64)
            else:
                raise FormatError(f"primitive {i}: unknown kind {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"primitive {i}: {exc}") from exc
        prims.append(Primitive(kind, params, albedo, class_id))
    return AnalyticScene(prims)


def load_scene(path) -> AnalyticScene:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"scene json line {exc.lineno} column {exc.colno}: {exc.msg}") \
                from exc
    return scene_from_json(payload)


def save_scene(path, scene: AnalyticScene) -> None:
    items = []
    for prim in scene.primitives:
        item = {"kind": prim.kind, "albedo": [float(v) for v in prim.albedo],
                "class_id": prim.class_id}
        if prim.kind == "sphere":
            item["center"] = [float(v) for v in prim.params[:3]]
            item["radius"] = float(prim.params[3])
        elif prim.kind == "box":
            item["center"] = [float(v) for v in prim.params[:3]]
            item["half_extents"] = [float(v) for v in prim.params[3:6]]
        else:
            item["normal"] = [float(v) for v in prim.params[:3]]
            item["offset"] = float(prim.params[3])
        items.append(item)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(items, fh, indent=1)
        fh.write("\n")


def demo_scene() -> AnalyticScene:
    """Two spheres resting over a thin box floor (the acceptance scene)."""
    return AnalyticScene([
        Primitive("box", np.array([0.0, 0.0, -0.05, 1.15, 1.15, 0.05]),
                  np.array([0.62, 0.60, 0.58]), 1),
        Primitive("sphere", np.array([-0.42, -0.05, 0.42, 0.40]),
                  np.array([0.85, 0.25, 0.20]), 2),
        Primitive("sphere", np.array([0.48, 0.18, 0.32, 0.30]),
                  np.array([0.20, 0.40, 0.85]), 3),
    ])


def surface_points(scene: AnalyticScene, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted samples of the union boundary (analytic reference set)."""
    areas = []
    for prim in scene.primitives:
        if prim.kind == "sphere":
            areas.append(4.0 * np.pi * prim.params[3] ** 2)
        elif prim.kind == "box":
            he = prim.params[3:6]
            areas.append(8.0 * (he[0] * he[1] + he[1] * he[2] + he[0] * he[2]))
        else:
            areas.append(0.0)  # unbounded: skip planes for reference sampling
    areas = np.asarray(areas)
    if areas.sum() == 0:
        raise DomainError("scene has no bounded primitive surface to sample")
    out = []
    target = n
    while len(out) < target:
        batch = max(256, target)
        pick = rng.choice(len(areas), size=batch, p=areas / areas.sum())
        pts = np.empty((batch, 3))
        for j, prim_idx in enumerate(pick):
            prim = scene.primitives[prim_idx]
            if prim.kind == "sphere":
                v = rng.standard_normal(3)
                v /= np.linalg.norm(v)
                pts[j] = prim.params[:3] + prim.params[3] * v
            else:
                pts[j] = _box_surface_point(prim.params[:3], prim.params[3:6], rng)
        dist, _, _ = scene_sdf(scene, pts)
        keep = pts[dist > -1e-9]  # drop samples buried inside the union
        out.extend(keep)
    return np.asarray(out[:target])


def _box_surface_point(center, half, rng) -> np.ndarray:
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    face_ax = rng.choice(3, p=areas / areas.sum())
    side = 1.0 if rng.random() < 0.5 else -1.0
    p = (rng.random(3) * 2.0 - 1.0) * half
    p[face_ax] = side * half[face_ax]
    return center + p
