"""Loss, optimizer, schedules, checkpoints and the pre-training loop.

One training step: sample a cloud, augment + mask + grid-sample it,
encode and densify into feature volumes, render random rays from a few
supervision frames, take the L1 loss against the stored RGB-D(+class)
frames, backpropagate through the tape and apply an AdamW step.  All
randomness flows through named per-step streams of one seed, so runs
are bit-for-bit reproducible.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import config as config_mod
from .errors import ContractError, DomainError, FormatError
from .geometry import load_cameras, ray_aabb_clip_batch, rays_for_pixels, sample_t_batch
from .imgio import read_pfm, read_pgm, read_ppm
from .pipeline import (Model, RayBatchGT, SizeSpec, assemble_loss, build_model,
                       build_volumes, build_volumes_from_images, class_embeddings,
                       decay_exempt, init_params, volume_bounds)
from .pointcloud import GridSpec, PointCloud, augment, grid_sample, load_ply, mask_groups
from .renderer import render_batch, render_image
from .seeding import stream
from .volume import mask_image

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
CSV_HEADER = "step,loss,loss_c,loss_d,loss_sem,lr"


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_d: float = 0.1
    lambda_sem: float = 0.01

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_d, self.lambda_sem) < 0:
            raise DomainError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    frames_per_cloud: int = 5
    rays_per_image: int = 128
    samples_per_ray: int = 128
    lr: float = 1e-4
    weight_decay: float = 0.05
    schedule: str = "exponential"
    schedule_gamma: float = 1.0
    iters: int = 2000
    seed: int = 0
    t_mode: str = "stratified"
    eval_every: int = 500
    min_weight_sum: float = 0.05

    def __post_init__(self):
        if self.frames_per_cloud < 1 or self.rays_per_image < 1 or self.samples_per_ray < 1:
            raise DomainError("counts must be positive")
        if self.lr <= 0:
            raise DomainError("lr must be positive")
        if self.iters < 0:
            raise DomainError("iters must be >= 0")
        if self.schedule not in ("exponential", "one-cycle"):
            raise DomainError(f"unknown schedule {self.schedule!r}")

    @staticmethod
    def from_config(cfg: dict) -> "TrainConfig":
        return TrainConfig(
            frames_per_cloud=cfg["frames_per_cloud"], rays_per_image=cfg["rays_per_image"],
            samples_per_ray=cfg["samples_per_ray"], lr=cfg["lr"],
            weight_decay=cfg["weight_decay"], schedule=cfg["schedule"],
            schedule_gamma=cfg["schedule_gamma"], iters=cfg["iters"], seed=cfg["seed"],
            t_mode=cfg["t_mode"], eval_every=cfg["eval_every"],
            min_weight_sum=cfg["min_weight_sum"],
        )


def schedule_lr(tc: TrainConfig, step: int) -> float:
    """lr at a step: exponential ``lr0 * gamma^(t/T)`` or one-cycle
    (linear warm-up over the first 30%, cosine decay after)."""
    t_total = max(tc.iters, 1)
    if tc.schedule == "exponential":
        return tc.lr * tc.schedule_gamma ** (step / t_total)
    warm = 0.3 * t_total
    if step < warm:
        return tc.lr * (0.04 + 0.96 * step / warm)
    frac = (step - warm) / max(t_total - warm, 1e-12)
    return tc.lr * (1e-4 + (1.0 - 1e-4) * 0.5 * (1.0 + np.cos(np.pi * min(frac, 1.0))))


def loss(pred: dict, gt: dict, w: LossWeights, min_weight_sum: float = 0.05) -> float:
    """Spec-level loss on plain arrays (miss rays excluded from the mean).

    ``pred``: rgb (r,3), depth (r,), sem (r,k) optional, weight_sum (r,),
    miss (r,) bool.  ``gt``: rgb, depth, depth_valid, sem optional,
    sem_valid optional.
    """
    keep = ~np.asarray(pred.get("miss", np.zeros(len(pred["rgb"]), dtype=bool)))
    n = int(keep.sum())
    if n == 0:
        raise ContractError("loss over an empty effective batch")
    gate = pred["weight_sum"][keep] >= min_weight_sum
    color = np.abs(pred["rgb"][keep] - gt["rgb"][keep]).sum(axis=1) * gate
    total = w.lambda_c * color.sum()
    dmask = np.asarray(gt["depth_valid"], dtype=bool)[keep]
    total += w.lambda_d * (np.abs(pred["depth"][keep] - gt["depth"][keep]) * dmask).sum()
    if gt.get("sem") is not None:
        smask = np.asarray(gt["sem_valid"], dtype=bool)[keep] & gate
        total += w.lambda_sem * (np.abs(pred["sem"][keep] - gt["sem"][keep]).sum(axis=1)
                                 * smask).sum()
    return float(total) / n


# ---------------------------------------------------------------------------
# AdamW


def adamw_init(params: dict[str, np.ndarray]) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """Decoupled-weight-decay Adam update, in place.

    Biases and the sharpness scalar are exempt from decay.
    """
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DomainError(f"gradient shape mismatch for {name}")
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay != 0.0 and not decay_exempt(name):
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Frame:
    intr: object
    pose: object
    rgb: np.ndarray  # (h, w, 3) in [0, 1]
    depth: np.ndarray  # (h, w) z-depth meters, 0 = invalid
    sem: np.ndarray | None  # (h, w) class ids


@dataclass
class SceneDataset:
    frames: list[Frame]
    cloud: PointCloud
    train_idx: list[int]
    heldout_idx: list[int]
    num_classes: int


def load_dataset(data_dir: str) -> SceneDataset:
    """Load the synth-layout directory; corrupt frames are skipped with a
    warning, and more than 50% skipped aborts."""
    i = 0
    frames: list[Frame] = []
    attempted = 0
    while True:
        cam_path = os.path.join(data_dir, f"cam_{i:03d}.json")
        if not os.path.exists(cam_path):
            break
        attempted += 1
        try:
            (intr, pose), = load_cameras(cam_path)
            rgb = read_ppm(os.path.join(data_dir, f"rgb_{i:03d}.ppm"))
            depth = read_pfm(os.path.join(data_dir, f"depth_{i:03d}.pfm"))
            sem_path = os.path.join(data_dir, f"sem_{i:03d}.pgm")
            sem = read_pgm(sem_path) if os.path.exists(sem_path) else None
            if rgb.shape[:2] != (intr.height, intr.width) or depth.shape != rgb.shape[:2]:
                raise FormatError("frame image sizes disagree with intrinsics")
            frames.append(Frame(intr, pose, rgb, depth, sem))
        except (FormatError, OSError, ValueError) as exc:
            log.warning("skipping corrupt frame %d: %s", i, exc)
        i += 1
    if attempted == 0:
        raise DomainError(f"no frames found under {data_dir}")
    if len(frames) < attempted / 2.0:
        raise DomainError(f"more than half of the frames are corrupt "
                          f"({attempted - len(frames)}/{attempted} skipped)")
    cloud = load_ply(os.path.join(data_dir, "cloud.ply"))
    held = int(np.ceil(0.2 * len(frames)))
    idx = list(range(len(frames)))
    num_classes = 1
    for f in frames:
        if f.sem is not None:
            num_classes = max(num_classes, int(f.sem.max()) + 1)
    return SceneDataset(frames, cloud, idx[:-held] if held else idx,
                        idx[len(frames) - held:] if held else [], num_classes)


# ---------------------------------------------------------------------------
# checkpoints: one JSON manifest line + little-endian f64 blob


def save_checkpoint(path, params: dict[str, np.ndarray], cfg: dict, step: int,
                    seed: int) -> None:
    manifest = {
        "format": "voxrend-checkpoint",
        "version": 1,
        "step": step,
        "rng": {"seed": seed, "next_step": step},
        "config": config_mod.echo(cfg),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Returns (params, resolved config, manifest)."""
    with open(path, "rb") as fh:
        try:
            manifest = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise FormatError(f"checkpoint manifest: {exc}") from exc
        if manifest.get("format") != "voxrend-checkpoint":
            raise FormatError("not a voxrend checkpoint")
        params: dict[str, np.ndarray] = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise FormatError(f"checkpoint blob truncated at {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
    if trailing:
        raise FormatError("checkpoint has trailing bytes after the parameter blob")
    cfg = config_mod.from_echo(manifest["config"])
    return params, cfg, manifest


# ---------------------------------------------------------------------------
# the training loop


def prepare_input_cloud(ds: SceneDataset, cfg: dict, step: int, seed: int,
                        ) -> tuple[PointCloud, np.ndarray, float]:
    """Down-sample, augment, mask and grid-sample the scene cloud.

    Returns (processed cloud, applied 4x4 transform, scale factor).
    """
    cloud = ds.cloud
    if cfg["max_points"] and cloud.count > cfg["max_points"]:
        rng = stream(seed, "downsample", step)
        pick = np.sort(rng.choice(cloud.count, size=cfg["max_points"], replace=False))
        cloud = cloud.select(pick)
    if cfg["aug_enabled"]:
        rng = stream(seed, "augment", step)
        params = {
            "rot_z": rng.random() * cfg["aug_rot_max"],
            "scale": cfg["aug_scale_min"] + rng.random() * (cfg["aug_scale_max"]
                                                            - cfg["aug_scale_min"]),
            "flip_x": bool(cfg["aug_flip"] and rng.random() < 0.5),
            "flip_y": bool(cfg["aug_flip"] and rng.random() < 0.5),
        }
        cloud, xform = augment(cloud, params)
        scale = params["scale"]
    else:
        xform = np.eye(4)
        scale = 1.0
    grid = GridSpec(np.asarray(cfg["grid_cell"] if len(cfg["grid_cell"]) == 3
                               else cfg["grid_cell"] * 3), np.zeros(3))
    mask_rng = stream(seed, "mask", step)
    if cfg["mask_before_grid"]:
        if cfg["mask_ratio"] > 0:
            cloud = mask_groups(cloud, cfg["mask_num_groups"], cfg["mask_group_size"],
                                cfg["mask_ratio"], mask_rng)
        cloud = grid_sample(cloud, grid)
    else:
        cloud = grid_sample(cloud, grid)
        if cfg["mask_ratio"] > 0:
            cloud = mask_groups(cloud, cfg["mask_num_groups"], cfg["mask_group_size"],
                                cfg["mask_ratio"], mask_rng)
    return cloud, xform, scale


def _training_rays(ds: SceneDataset, cfg: dict, tc: TrainConfig, step: int,
                   xform: np.ndarray, scale: float, bounds, emb: np.ndarray | None):
    """Draw frames and pixels, carry rays into the augmented frame, clip."""
    f_rng = stream(tc.seed, "frames", step)
    p_rng = stream(tc.seed, "pixels", step)
    n_frames = min(tc.frames_per_cloud, len(ds.train_idx))
    chosen = f_rng.choice(np.asarray(ds.train_idx), size=n_frames, replace=False)
    lin = xform[:3, :3]
    ortho = lin / scale
    origins, dirs, gt_rgb, gt_t, gt_valid, gt_cls, cos_all = [], [], [], [], [], [], []
    for fi in chosen:
        frame = ds.frames[fi]
        h, w = frame.depth.shape
        flat = p_rng.choice(h * w, size=min(tc.rays_per_image, h * w), replace=False)
        pix = np.stack([flat % w, flat // w], axis=1).astype(np.float64)
        o, d, cos_z = rays_for_pixels(frame.intr, frame.pose, pix)
        origins.append(o @ lin.T)
        dirs.append(d @ ortho.T)
        vs, us = pix[:, 1].astype(int), pix[:, 0].astype(int)
        gt_rgb.append(frame.rgb[vs, us])
        z = frame.depth[vs, us]
        valid = np.isfinite(z) & (z > 0)
        gt_valid.append(valid)
        gt_t.append(np.where(valid, scale * z / cos_z, 0.0))
        gt_cls.append(frame.sem[vs, us] if frame.sem is not None
                      else np.zeros(len(us), dtype=np.int64))
        cos_all.append(cos_z)
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    gt = RayBatchGT(
        rgb=np.concatenate(gt_rgb),
        depth_t=np.concatenate(gt_t),
        depth_valid=np.concatenate(gt_valid),
        sem_emb=emb[np.concatenate(gt_cls)] if emb is not None else None,
        sem_valid=(np.concatenate(gt_cls) > 0) if emb is not None else None,
    )
    t0, t1, hit = ray_aabb_clip_batch(origins, dirs, bounds[0], bounds[1])
    keep = np.flatnonzero(hit)
    if len(keep) == 0:
        raise ContractError("every supervision ray missed the feature volume")
    gt = RayBatchGT(gt.rgb[keep], gt.depth_t[keep], gt.depth_valid[keep],
                    None if gt.sem_emb is None else gt.sem_emb[keep],
                    None if gt.sem_valid is None else gt.sem_valid[keep])
    t_rng = stream(tc.seed, "tsamples", step)
    t = sample_t_batch(t0[keep], t1[keep], tc.samples_per_ray, tc.t_mode, t_rng)
    return origins[keep], dirs[keep], t, gt


def train_step(ds: SceneDataset, cfg: dict, tc: TrainConfig, sizes: SizeSpec,
               params: dict[str, np.ndarray], opt_state: dict, step: int,
               bounds, emb: np.ndarray | None, weights: LossWeights) -> dict:
    """One full forward/backward/update; returns the CSV metric parts."""
    tape = ad.Tape()
    model = build_model(params, sizes, tape)
    if cfg["input_mode"] == "images":
        volumes = _image_volumes(ds, cfg, model, bounds, sizes, step, tc.seed)
        xform, scale = np.eye(4), 1.0  # the image branch trains unaugmented
    else:
        cloud, xform, scale = prepare_input_cloud(ds, cfg, step, tc.seed)
        volumes = build_volumes(cloud, model, bounds, sizes, cfg["vol_f32"])
    origins, dirs, t, gt = _training_rays(ds, cfg, tc, step, xform, scale, bounds, emb)
    batch = render_batch(volumes, model.bundle, origins, dirs, t, tape=tape,
                         want_semantic=emb is not None)
    loss_node, parts = assemble_loss(batch, gt, weights.lambda_c, weights.lambda_d,
                                     weights.lambda_sem, tc.min_weight_sum)
    grads = tape.backward(loss_node)
    lr_t = schedule_lr(tc, step)
    adamw_step(params, grads, opt_state, lr_t, weight_decay=tc.weight_decay)
    parts["lr"] = lr_t
    return parts


def _image_volumes(ds: SceneDataset, cfg: dict, model: Model, bounds, sizes: SizeSpec,
                   step: int, seed: int):
    rng = stream(seed, "image-mask", step)
    maps, cams, masks = [], [], []
    for fi in ds.train_idx:
        frame = ds.frames[fi]
        masked, bitmap = mask_image(frame.rgb, cfg["img_patch"], cfg["img_mask_ratio"], rng)
        maps.append(masked)
        cams.append((frame.intr, frame.pose))
        masks.append(bitmap)
    return build_volumes_from_images(maps, cams, masks, model, bounds, sizes)


def pretrain(ds: SceneDataset, cfg: dict, weights: LossWeights | None = None,
             out_checkpoint: str | None = None, log_path: str | None = None,
             on_metrics=None) -> dict:
    """Run the pre-training loop; returns summary metrics.

    Writes the checkpoint and a CSV log (`step,loss,loss_c,loss_d,
    loss_sem,lr`) when paths are given.  Deterministic for a fixed
    config and seed.
    """
    tc = TrainConfig.from_config(cfg)
    weights = weights or LossWeights(cfg["lambda_c"], cfg["lambda_d"], cfg["lambda_sem"])
    sizes = SizeSpec.from_config(cfg, enc_in=ds.cloud.channels)
    init_rng = stream(tc.seed, "init")
    params = init_params(sizes, init_rng)
    opt_state = adamw_init(params)
    bounds = volume_bounds(ds.cloud.coords, cfg["vol_margin"], cfg["vol_pad"])
    emb = class_embeddings(ds.num_classes, sizes.sem_dim, tc.seed) \
        if (sizes.semantic and any(f.sem is not None for f in ds.frames)) else None

    rows = [CSV_HEADER]
    first_loss = None
    last_parts = {"loss": float("nan")}
    eval_metrics = {}
    for step in range(tc.iters):
        parts = train_step(ds, cfg, tc, sizes, params, opt_state, step, bounds, emb,
                           weights)
        if first_loss is None:
            first_loss = parts["loss"]
        last_parts = parts
        rows.append(f"{step},{parts['loss']!r},{parts['loss_c']!r},"
                    f"{parts['loss_d']!r},{parts['loss_sem']!r},{parts['lr']!r}")
        if tc.eval_every and (step + 1) % tc.eval_every == 0:
            eval_metrics = eval_heldout(params, cfg, ds)
            log.info("step %d: loss=%.6f psnr=%.2f mae=%.4f", step, parts["loss"],
                     eval_metrics["psnr_rgb"], eval_metrics["mae_depth"])
            if on_metrics:
                on_metrics(step, parts, eval_metrics)
    if tc.iters > 0 and (not tc.eval_every or tc.iters % tc.eval_every != 0):
        eval_metrics = eval_heldout(params, cfg, ds)
    elif tc.iters == 0:
        eval_metrics = eval_heldout(params, cfg, ds)
    if out_checkpoint:
        save_checkpoint(out_checkpoint, params, cfg, tc.iters, tc.seed)
    if log_path:
        with open(log_path, "w", encoding="ascii") as fh:
            fh.write("\n".join(rows) + "\n")
    return {
        "params": params,
        "initial_loss": first_loss,
        "final_loss": last_parts["loss"],
        **eval_metrics,
    }


def rebuild_volumes(params: dict[str, np.ndarray], cfg: dict, ds: SceneDataset):
    """Evaluation-time volumes from the unaugmented, unmasked cloud."""
    sizes = SizeSpec.from_config(cfg, enc_in=ds.cloud.channels)
    model = build_model(params, sizes)
    bounds = volume_bounds(ds.cloud.coords, cfg["vol_margin"], cfg["vol_pad"])
    grid = GridSpec(np.asarray(cfg["grid_cell"] if len(cfg["grid_cell"]) == 3
                               else cfg["grid_cell"] * 3), np.zeros(3))
    cloud = grid_sample(ds.cloud, grid)
    return build_volumes(cloud, model, bounds, sizes, cfg["vol_f32"]), model, bounds


def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(ref)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


def eval_views(params: dict[str, np.ndarray], cfg: dict, ds: SceneDataset,
               view_indices) -> dict:
    """Full-image render metrics over the given views."""
    volumes, model, _ = rebuild_volumes(params, cfg, ds)
    psnrs, maes, covs = [], [], []
    for vi in view_indices:
        frame = ds.frames[vi]
        rgb, zdepth, acc, _ = render_image(volumes, model.bundle, frame.intr, frame.pose,
                                           cfg["samples_per_ray"])
        psnrs.append(psnr(rgb, frame.rgb))
        valid = np.isfinite(frame.depth) & (frame.depth > 0)
        if valid.any():
            maes.append(float(np.abs(zdepth - frame.depth)[valid].mean()))
        covs.append(float(acc.mean()))
    return {
        "psnr_rgb": float(np.median(psnrs)) if psnrs else float("nan"),
        "mae_depth": float(np.mean(maes)) if maes else float("nan"),
        "weight_coverage": float(np.mean(covs)) if covs else float("nan"),
    }


def eval_heldout(params: dict[str, np.ndarray], cfg: dict, ds: SceneDataset) -> dict:
    views = ds.heldout_idx or ds.train_idx[-1:]
    return eval_views(params, cfg, ds, views)
