"""Pinhole cameras, rigid transforms, rays and ray-parameter sampling.

Conventions (fixed for the whole package):

* camera frame: x right, y down, z forward; a pixel ``(u, v)`` samples
  the ray through the continuous image point ``(u + 0.5, v + 0.5)``;
* poses are stored camera-to-world, so the stored translation is the
  ray origin;
* ``project_point`` returns raw image coordinates ``fx*x/z + cx`` (so a
  ray built from pixel ``(u, v)`` projects back to ``(u+0.5, v+0.5)``)
  together with the camera-frame z depth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError, FormatError

_EPS_Z = 1e-6  # depths at or below this count as behind the camera


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point must lie inside the image")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rotation and camera center."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise DomainError("rotation must be 3x3")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise DomainError("rotation must be orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise DomainError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def inverse_matrix(self) -> np.ndarray:
        """World-to-camera 4x4, computed on demand."""
        m = np.eye(4)
        m[:3, :3] = self.rotation.T
        m[:3, 3] = -self.rotation.T @ self.translation
        return m

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise DomainError("ray direction must be unit length")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class RigidTransform:
    """Row-major homogeneous 4x4 with an orthonormal linear part."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise DomainError("transform must be 4x4")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=0.0):
            raise DomainError("bottom row must be (0,0,0,1)")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise DomainError("linear part must be orthonormal")
        object.__setattr__(self, "matrix", m)


class Projection(NamedTuple):
    pixel: np.ndarray  # (2,) image coordinates
    depth: float  # camera-frame z, meters
    behind: bool


def pixel_to_ray(intr: Intrinsics, pose: Pose, px) -> Ray:
    """World-space ray through the center of pixel ``px``."""
    u, v = float(px[0]), float(px[1])
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise DomainError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")
    d_cam = np.array([(u + 0.5 - intr.cx) / intr.fx, (v + 0.5 - intr.cy) / intr.fy, 1.0])
    d = pose.rotation @ d_cam
    return Ray(pose.translation.copy(), d / np.linalg.norm(d))


def rays_for_pixels(intr: Intrinsics, pose: Pose, pixels: np.ndarray):
    """Vectorised :func:`pixel_to_ray` for an (n, 2) pixel array.

    Returns (origins (n,3), unit directions (n,3), inverse unprojection
    norms (n,) = z-depth per unit ray length).
    """
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 2 or px.shape[1] != 2:
        raise DomainError("pixels must be (n, 2)")
    if np.any(px[:, 0] < 0) or np.any(px[:, 0] >= intr.width) or \
       np.any(px[:, 1] < 0) or np.any(px[:, 1] >= intr.height):
        raise DomainError("pixel outside image bounds")
    d_cam = np.stack([
        (px[:, 0] + 0.5 - intr.cx) / intr.fx,
        (px[:, 1] + 0.5 - intr.cy) / intr.fy,
        np.ones(len(px)),
    ], axis=1)
    norms = np.linalg.norm(d_cam, axis=1)
    dirs = (d_cam / norms[:, None]) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs, 1.0 / norms


def project_point(intr: Intrinsics, pose: Pose, p) -> Projection:
    """Project a world point; never raises for behind-camera points."""
    y = pose.rotation.T @ (np.asarray(p, dtype=np.float64).reshape(3) - pose.translation)
    depth = float(y[2])
    if depth <= _EPS_Z:
        return Projection(np.zeros(2), depth, True)
    pixel = np.array([intr.fx * y[0] / depth + intr.cx, intr.fy * y[1] / depth + intr.cy])
    return Projection(pixel, depth, False)


def project_points(intr: Intrinsics, pose: Pose, pts: np.ndarray):
    """Vectorised projection: returns (pixels (n,2), depths (n,), behind (n,))."""
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    y = (p - pose.translation) @ pose.rotation
    depths = y[:, 2]
    behind = depths <= _EPS_Z
    safe = np.where(behind, 1.0, depths)
    pixels = np.stack([
        intr.fx * y[:, 0] / safe + intr.cx,
        intr.fy * y[:, 1] / safe + intr.cy,
    ], axis=1)
    pixels[behind] = 0.0
    return pixels, depths, behind


def sample_t_values(near: float, far: float, count: int, mode: str = "uniform-center",
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Sorted ray parameters in ``[near, far)``.

    ``uniform-center`` puts one sample at each bin center (deterministic),
    ``stratified`` draws one uniform sample per bin.
    """
    if not (0 <= near < far):
        raise DomainError(f"need 0 <= near < far, got [{near}, {far})")
    if count < 1:
        raise DomainError("count must be >= 1")
    delta = (far - near) / count
    j = np.arange(count, dtype=np.float64)
    if mode == "uniform-center":
        return near + (j + 0.5) * delta
    if mode == "stratified":
        if rng is None:
            raise DomainError("stratified mode needs an rng")
        return near + (j + rng.random(count)) * delta
    raise DomainError(f"unknown sampling mode {mode!r}")


def sample_t_batch(near: np.ndarray, far: np.ndarray, count: int, mode: str,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-ray version of :func:`sample_t_values` for (r,) near/far arrays."""
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if np.any(near < 0) or np.any(near >= far):
        raise DomainError("need 0 <= near < far per ray")
    if count < 1:
        raise DomainError("count must be >= 1")
    delta = (far - near)[:, None] / count
    j = np.arange(count, dtype=np.float64)[None, :]
    if mode == "uniform-center":
        offs = j + 0.5
    elif mode == "stratified":
        if rng is None:
            raise DomainError("stratified mode needs an rng")
        offs = j + rng.random((len(near), count))
    else:
        raise DomainError(f"unknown sampling mode {mode!r}")
    return near[:, None] + offs * delta


def ray_aabb_clip(ray: Ray, box_min, box_max) -> tuple[float, float] | None:
    """Parametric interval where the ray crosses the box, clipped to t >= 0."""
    res = ray_aabb_clip_batch(ray.origin[None, :], ray.direction[None, :], box_min, box_max)
    t0, t1, hit = res
    return (float(t0[0]), float(t1[0])) if hit[0] else None


def ray_aabb_clip_batch(origins: np.ndarray, dirs: np.ndarray, box_min, box_max):
    """Slab clip for (n,3) rays; returns (t_enter, t_exit, hit mask)."""
    lo = np.asarray(box_min, dtype=np.float64)
    hi = np.asarray(box_max, dtype=np.float64)
    if np.any(lo >= hi):
        raise DomainError("box min must be < box max componentwise")
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t_enter = np.zeros(len(o))
    t_exit = np.full(len(o), np.inf)
    hit = np.ones(len(o), dtype=bool)
    for ax in range(3):
        dz = d[:, ax] == 0.0
        inside = (o[:, ax] >= lo[ax]) & (o[:, ax] <= hi[ax])
        hit &= ~dz | inside
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo[ax] - o[:, ax]) / d[:, ax]
            t1 = (hi[ax] - o[:, ax]) / d[:, ax]
        t0, t1 = np.minimum(t0, t1), np.maximum(t0, t1)
        t_enter = np.where(dz, t_enter, np.maximum(t_enter, t0))
        t_exit = np.where(dz, t_exit, np.minimum(t_exit, t1))
    hit &= (t_exit >= t_enter) & (t_exit > 0)
    return t_enter, t_exit, hit


# ---------------------------------------------------------------------------
# camera file i/o: {"fx","fy","cx","cy","width","height","cam_to_world": 16}


def camera_to_dict(intr: Intrinsics, pose: Pose) -> dict:
    return {
        "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
        "width": intr.width, "height": intr.height,
        "cam_to_world": [float(v) for v in pose.matrix().reshape(-1)],
    }


def camera_from_dict(d: dict) -> tuple[Intrinsics, Pose]:
    try:
        intr = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                          int(d["width"]), int(d["height"]))
        m = np.asarray(d["cam_to_world"], dtype=np.float64).reshape(4, 4)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"camera json missing field: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"camera json malformed: {exc}") from exc
    return intr, Pose(m[:3, :3], m[:3, 3])


def save_cameras(path, cams: list[tuple[Intrinsics, Pose]] | tuple[Intrinsics, Pose]) -> None:
    if isinstance(cams, tuple) and isinstance(cams[0], Intrinsics):
        payload = camera_to_dict(*cams)
    else:
        payload = [camera_to_dict(i, p) for i, p in cams]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_cameras(path) -> list[tuple[Intrinsics, Pose]]:
    """Load one camera or a trajectory; always returns a list."""
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"camera json: {exc}") from exc
    items = payload if isinstance(payload, list) else [payload]
    return [camera_from_dict(d) for d in items]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose looking from ``eye`` toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(r)
    if n < 1e-12:  # looking straight along up: pick any perpendicular right
        r = np.cross(f, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(r)
    r = r / n
    y = np.cross(f, r)  # (r, y, f) is right-handed by construction
    return Pose(np.stack([r, y, f], axis=1), eye)
