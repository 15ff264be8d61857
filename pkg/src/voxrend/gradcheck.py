"""Finite-difference verification of the full-pipeline gradients.

A fixed micro-scene (tiny cloud, tiny widths, 4 rays x 8 samples) is
pushed through encode -> densify -> refine -> render -> loss; analytic
adjoints from the tape are compared against central differences for
every parameter.

Normals are frozen at their base-point values while differencing: the
engine declares them stop-gradient constants, so the function under
test is ``loss(theta; n(theta_0))``.  The harness also asserts the
micro-scene sits clear of the non-smooth gates (alpha clamps, the
weight-sum gate, L1 kinks) so the comparison is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .pipeline import (RayBatchGT, SizeSpec, assemble_loss, build_model, build_volumes,
                       init_params, param_group)
from .pointcloud import PointCloud
from .renderer import render_batch
from .seeding import stream

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-8
GROUPS = ("encoder", "conv", "sdf", "rgb", "semantic", "log_s")

MICRO_SIZES = SizeSpec(
    enc_in=2, enc_hidden=(4,), enc_out=3, enc_radius=0.3,
    vol_dims=(5,), vol_channels=3,
    sdf_layers=3, rgb_layers=2, sem_layers=2, hidden=6, h_dim=4,
    pe_bands=1, sem_dim=3, semantic=True, log_s_init=float(np.log(3.0)),
)


@dataclass
class MicroScene:
    cloud: PointCloud
    bounds: tuple[np.ndarray, np.ndarray]
    origins: np.ndarray
    dirs: np.ndarray
    t: np.ndarray
    gt: RayBatchGT
    lambdas: tuple[float, float, float]
    min_weight_sum: float


def make_micro_scene(seed: int = 0) -> MicroScene:
    rng = stream(seed, "gradcheck")
    n_pts = 40
    coords = rng.random((n_pts, 3)) * 0.8 + 0.1
    feats = rng.random((n_pts, MICRO_SIZES.enc_in))
    cloud = PointCloud(coords, feats)
    bounds = (np.zeros(3), np.ones(3))
    n_rays, depth = 4, 8
    origins = np.tile(np.array([[0.5, 0.5, -0.6]]), (n_rays, 1))
    angles = np.linspace(-0.25, 0.25, n_rays)
    dirs = np.stack([np.sin(angles), 0.1 * np.cos(angles), np.cos(angles)], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t = np.linspace(0.7, 2.0, depth)[None, :] + 0.03 * rng.random((n_rays, depth))
    gt = RayBatchGT(
        rgb=rng.random((n_rays, 3)),
        depth_t=1.0 + 0.5 * rng.random(n_rays),
        depth_valid=np.array([True, True, True, False]),
        sem_emb=rng.standard_normal((n_rays, MICRO_SIZES.sem_dim)) * 0.5,
        sem_valid=np.array([True, True, False, True]),
    )
    return MicroScene(cloud, bounds, origins, dirs, t, gt,
                      lambdas=(1.0, 0.1, 0.05), min_weight_sum=0.05)


def micro_params(seed: int = 0) -> dict[str, np.ndarray]:
    params = init_params(MICRO_SIZES, stream(seed, "init"))
    rng = stream(seed, "gradcheck")
    for name, arr in params.items():
        # give the zero-initialized final layers generic values so every
        # path carries signal through the check
        if arr.ndim and not np.any(arr):
            params[name] = rng.standard_normal(arr.shape) * 0.3
    return params


def micro_loss(params: dict[str, np.ndarray], scene: MicroScene,
               frozen_normals: np.ndarray | None = None, with_tape: bool = False):
    """One full forward; returns (loss value or node, batch, tape)."""
    tape = ad.Tape() if with_tape else None
    model = build_model(params, MICRO_SIZES, tape)
    volumes = build_volumes(scene.cloud, model, scene.bounds, MICRO_SIZES)
    batch = render_batch(volumes, model.bundle, scene.origins, scene.dirs, scene.t,
                         tape=tape, frozen_normals=frozen_normals)
    lc, ld, ls = scene.lambdas
    node, _ = assemble_loss(batch, scene.gt, lc, ld, ls, scene.min_weight_sum)
    return node, batch, tape


def check_margins(batch, scene: MicroScene, sharpness: float,
                  margin: float = 1e-3) -> None:
    """Fail loudly if the scene sits near a non-smooth gate."""
    from ._kernels import softplus_value

    gap = np.abs(batch.weight_sum - scene.min_weight_sum)
    if gap.min() < margin:
        raise ContractError(f"micro-scene weight sum within {gap.min():.2e} of the gate")
    x = sharpness * batch.sdf
    sp = softplus_value(-x, 1.0)
    raw_alpha = 1.0 - np.exp(sp[:, :-1] - sp[:, 1:])
    near_gate = np.minimum(np.abs(raw_alpha), np.abs(1.0 - 1e-7 - raw_alpha))
    if near_gate.min() < 1e-6:
        raise ContractError("micro-scene alpha sits on a clamp boundary")
    if np.abs(batch.rgb - scene.gt.rgb).min() < 1e-4:
        raise ContractError("micro-scene color residual sits on the L1 kink")


def run(seed: int = 0, corrupt_group: str | None = None) -> dict[str, dict]:
    """Compare analytic and FD gradients; returns per-group stats.

    ``corrupt_group`` perturbs that group's analytic adjoints (test hook
    for the harness itself).
    """
    scene = make_micro_scene(seed)
    params = micro_params(seed)

    node, batch, tape = micro_loss(params, scene, with_tape=True)
    check_margins(batch, scene, float(np.exp(params["log_s"])))
    frozen = batch.normals
    grads = tape.backward(node)
    if corrupt_group:
        for name in grads:
            if param_group(name) == corrupt_group:
                grads[name] = grads[name] * 1.01 + 1e-6

    report = {g: {"worst_rel": 0.0, "worst_param": "", "count": 0, "ok": True}
              for g in GROUPS}
    for name, arr in params.items():
        group = param_group(name)
        flat = arr.reshape(-1) if arr.ndim else arr.reshape(1)
        g_flat = grads[name].reshape(-1) if grads[name].ndim else grads[name].reshape(1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + FD_STEP
            up, _, _ = micro_loss(params, scene, frozen_normals=frozen)
            flat[j] = orig - FD_STEP
            dn, _, _ = micro_loss(params, scene, frozen_normals=frozen)
            flat[j] = orig
            fd = (float(ad.value_of(up)) - float(ad.value_of(dn))) / (2.0 * FD_STEP)
            an = float(g_flat[j])
            denom = max(abs(an), abs(fd), ABS_TOL / REL_TOL)
            rel = abs(an - fd) / denom
            stats = report[group]
            stats["count"] += 1
            if rel > stats["worst_rel"]:
                stats["worst_rel"] = rel
                stats["worst_param"] = f"{name}[{j}]"
            if abs(an - fd) > max(REL_TOL * max(abs(an), abs(fd)), ABS_TOL):
                stats["ok"] = False
    return report


def passed(report: dict[str, dict]) -> bool:
    return all(stats["ok"] for stats in report.values())
