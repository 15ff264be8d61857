"""Forward composition of the full pipeline.

Owns the parameter manifest (flat name -> array in a fixed order), the
cloud -> feature-volume forward pass, ray batch preparation with
augmentation carried onto the rays, and the L1 loss assembly.  The same
functions run taped (training, gradient checks) and tape-free
(evaluation, rendering).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import EncoderParams, encode, init_encoder_params
from .errors import ContractError, DomainError
from .fields import FieldBundle, MlpParams, init_mlp_arrays, pe_dim
from .pointcloud import PointCloud
from .volume import ConvParams, DenseVolume, densify, lift_images, mask_image, refine

SDF_BIAS_INIT = 0.1  # the scene starts slightly outside every surface


@dataclass(frozen=True)
class SizeSpec:
    """Width/depth knobs resolved from the run config."""

    enc_in: int
    enc_hidden: tuple[int, ...]
    enc_out: int
    enc_radius: float
    vol_dims: tuple[int, ...]
    vol_channels: int
    sdf_layers: int
    rgb_layers: int
    sem_layers: int
    hidden: int
    h_dim: int
    pe_bands: int
    sem_dim: int
    semantic: bool
    log_s_init: float

    @staticmethod
    def from_config(cfg: dict, enc_in: int = 3) -> "SizeSpec":
        return SizeSpec(
            enc_in=enc_in,
            enc_hidden=tuple(cfg["enc_hidden"]),
            enc_out=int(cfg["enc_out"]),
            enc_radius=float(cfg["enc_radius"]),
            vol_dims=tuple(cfg["vol_dims"]),
            vol_channels=int(cfg["vol_channels"]),
            sdf_layers=int(cfg["sdf_layers"]),
            rgb_layers=int(cfg["rgb_layers"]),
            sem_layers=int(cfg["sem_layers"]),
            hidden=int(cfg["hidden"]),
            h_dim=int(cfg["h_dim"]),
            pe_bands=int(cfg["pe_bands"]),
            sem_dim=int(cfg["sem_dim"]),
            semantic=bool(cfg["semantic"]),
            log_s_init=float(cfg["log_s_init"]),
        )

    @property
    def feat_dim(self) -> int:
        return self.vol_channels * len(self.vol_dims)

    def mlp_sizes(self, head: str) -> list[int]:
        pe = pe_dim(self.pe_bands)
        f = self.feat_dim
        if head == "sdf":
            inner = [self.hidden] * max(self.sdf_layers - 2, 0)
            return [pe + f] + inner + [self.h_dim, 1]
        if head == "rgb":
            inner = [self.hidden] * max(self.rgb_layers - 1, 0)
            return [pe + f + 3 + 3 + self.h_dim] + inner + [3]
        if head == "sem":
            inner = [self.hidden] * max(self.sem_layers - 1, 0)
            return [pe + f + 3 + self.h_dim] + inner + [self.sem_dim]
        raise DomainError(f"unknown head {head!r}")


def init_params(sizes: SizeSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter manifest; insertion order is the checkpoint order.

    Final layers of the SDF/RGB/semantic heads start at zero weights so
    the initial field is exactly s = +0.1 (empty-ish scene), mid-gray
    color, and zero semantics.
    """
    params: dict[str, np.ndarray] = {}
    enc_arrays = init_encoder_params(sizes.enc_in, list(sizes.enc_hidden),
                                     sizes.enc_out, sizes.enc_radius, rng)
    for i in range(0, len(enc_arrays), 2):
        params[f"enc.l{i // 2}.w"] = enc_arrays[i]
        params[f"enc.l{i // 2}.b"] = enc_arrays[i + 1]
    for r in range(len(sizes.vol_dims)):
        fan_in = sizes.enc_out * 27
        params[f"conv.r{r}.w"] = rng.standard_normal(
            (3, 3, 3, sizes.enc_out, sizes.vol_channels)) * np.sqrt(2.0 / fan_in)
        params[f"conv.r{r}.b"] = np.zeros(sizes.vol_channels)
    heads = [("sdf", 0.0, SDF_BIAS_INIT), ("rgb", 0.0, 0.0)]
    if sizes.semantic:
        heads.append(("sem", 0.0, 0.0))
    for head, w_scale, bias in heads:
        arrays = init_mlp_arrays(sizes.mlp_sizes(head), rng,
                                 final_weight_scale=w_scale, final_bias=bias)
        for i in range(0, len(arrays), 2):
            params[f"{head}.l{i // 2}.w"] = arrays[i]
            params[f"{head}.l{i // 2}.b"] = arrays[i + 1]
    params["log_s"] = np.array(sizes.log_s_init)
    return params


def param_group(name: str) -> str:
    if name == "log_s":
        return "log_s"
    prefix = name.split(".", 1)[0]
    return {"enc": "encoder", "conv": "conv", "sdf": "sdf", "rgb": "rgb",
            "sem": "semantic"}[prefix]


def decay_exempt(name: str) -> bool:
    return name == "log_s" or name.endswith(".b")


@dataclass
class Model:
    """Parameter structures bound to one tape (or to plain arrays)."""

    encoder: EncoderParams
    convs: list[ConvParams]
    bundle: FieldBundle
    leaves: dict[str, object]


def build_model(params: dict[str, np.ndarray], sizes: SizeSpec, tape=None) -> Model:
    leaves = {name: (tape.leaf(arr, name) if tape is not None else arr)
              for name, arr in params.items()}

    def mlp(head: str, n_layers: int, out_act: str) -> MlpParams:
        layers = [(leaves[f"{head}.l{i}.w"], leaves[f"{head}.l{i}.b"])
                  for i in range(n_layers)]
        return MlpParams(layers, out_act)

    n_enc = len(sizes.enc_hidden) + 1
    enc = EncoderParams([(leaves[f"enc.l{i}.w"], leaves[f"enc.l{i}.b"])
                         for i in range(n_enc)], sizes.enc_radius)
    convs = [ConvParams(leaves[f"conv.r{r}.w"], leaves[f"conv.r{r}.b"], "softplus")
             for r in range(len(sizes.vol_dims))]
    bundle = FieldBundle(
        sdf=mlp("sdf", sizes.sdf_layers, "linear"),
        rgb=mlp("rgb", sizes.rgb_layers, "logistic"),
        log_s=leaves["log_s"],
        semantic=mlp("sem", sizes.sem_layers, "linear") if sizes.semantic else None,
        pe_bands=sizes.pe_bands,
    )
    return Model(enc, convs, bundle, leaves)


def volume_bounds(coords: np.ndarray, margin: float = 1.15,
                  pad_frac: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounds covering the cloud under the training
    augmentations (rotation about the world z axis, mirror flips, and
    scale up to ``margin``), plus a small absolute pad."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if len(coords) == 0:
        raise DomainError("cannot derive volume bounds from an empty cloud")
    r_xy = float(np.max(np.linalg.norm(coords[:, :2], axis=1))) * margin
    zmin, zmax = float(coords[:, 2].min()), float(coords[:, 2].max())
    z_lo = zmin * margin if zmin < 0 else zmin / margin
    z_hi = zmax * margin if zmax > 0 else zmax / margin
    lo = np.array([-r_xy, -r_xy, z_lo])
    hi = np.array([r_xy, r_xy, z_hi])
    pad = pad_frac * float(np.max(hi - lo))
    return lo - pad, hi + pad


def build_volumes(cloud: PointCloud, model: Model, bounds, sizes: SizeSpec,
                  f32_storage: bool = False) -> list[DenseVolume]:
    """encode -> densify -> refine, one volume per configured resolution."""
    lo, hi = bounds
    sf = encode(cloud, model.encoder)
    vols = []
    for r, dims in enumerate(sizes.vol_dims):
        voxel = (np.asarray(hi) - np.asarray(lo)) / dims
        dense = densify(sf, (dims, dims, dims), lo, voxel)
        if f32_storage and not isinstance(dense.data, ad.Var):
            dense.data = dense.data.astype(np.float32).astype(np.float64)
        vols.append(refine(dense, model.convs[r]))
    return vols


def build_volumes_from_images(feature_maps, cameras, masks, model: Model, bounds,
                              sizes: SizeSpec) -> list[DenseVolume]:
    """Image branch: lift multi-view 2D features, then refine."""
    from .volume import ImageFeatureSet

    lo, hi = bounds
    vols = []
    fs = ImageFeatureSet(list(feature_maps), list(cameras), list(masks or []))
    for r, dims in enumerate(sizes.vol_dims):
        voxel = (np.asarray(hi) - np.asarray(lo)) / dims
        lifted = lift_images(fs, (dims, dims, dims), lo, voxel)
        vols.append(refine(lifted, model.convs[r]))
    return vols


@dataclass
class RayBatchGT:
    """Ground truth for one supervision batch (non-miss rays only)."""

    rgb: np.ndarray  # (r, 3)
    depth_t: np.ndarray  # (r,) ray-distance ground truth
    depth_valid: np.ndarray  # (r,) bool
    sem_emb: np.ndarray | None  # (r, sem_dim)
    sem_valid: np.ndarray | None  # (r,) bool


def assemble_loss(batch, gt: RayBatchGT, lambda_c: float, lambda_d: float,
                  lambda_sem: float, min_weight_sum: float):
    """Eq.-style mean over rays of the weighted L1 terms.

    Color and semantic terms are gated off for rays whose weight sum is
    below ``min_weight_sum`` (the gate is computed from forward values
    and treated as a constant); the depth term applies wherever ground
    truth depth is valid.  Returns (scalar loss node, float parts).
    """
    n = len(gt.rgb)
    if n == 0:
        raise ContractError("loss over an empty effective batch")
    gate = (np.asarray(ad.value_of(batch.wsum_node if batch.rgb_node is not None
                                   else batch.weight_sum)) >= min_weight_sum)
    gate = gate.astype(np.float64)
    rgb_node = batch.rgb_node if batch.rgb_node is not None else batch.rgb
    depth_node = batch.depth_node if batch.depth_node is not None else batch.depth
    color_per_ray = ad.sum_(ad.absolute(ad.sub(rgb_node, gt.rgb)), axis=1)
    color_term = ad.sum_(ad.mul(color_per_ray, gate))
    dmask = gt.depth_valid.astype(np.float64)
    depth_term = ad.sum_(ad.mul(ad.absolute(ad.sub(depth_node, gt.depth_t)), dmask))
    loss = ad.mul(color_term, lambda_c / n)
    loss = ad.add(loss, ad.mul(depth_term, lambda_d / n))
    parts = {
        "loss_c": lambda_c * float(ad.value_of(color_term)) / n,
        "loss_d": lambda_d * float(ad.value_of(depth_term)) / n,
        "loss_sem": 0.0,
    }
    if gt.sem_emb is not None:
        sem_node = batch.sem_node if batch.sem_node is not None else batch.sem
        if sem_node is None:
            raise ContractError("semantic ground truth without semantic render")
        smask = gt.sem_valid.astype(np.float64) * gate
        sem_per_ray = ad.sum_(ad.absolute(ad.sub(sem_node, gt.sem_emb)), axis=1)
        sem_term = ad.sum_(ad.mul(sem_per_ray, smask))
        loss = ad.add(loss, ad.mul(sem_term, lambda_sem / n))
        parts["loss_sem"] = lambda_sem * float(ad.value_of(sem_term)) / n
    parts["loss"] = float(ad.value_of(loss))
    return loss, parts


def class_embeddings(num_classes: int, sem_dim: int, seed: int) -> np.ndarray:
    """Fixed random orthonormal embedding per class id (row 0 = void)."""
    from .seeding import stream

    if num_classes > sem_dim:
        raise DomainError("orthonormal embeddings need sem_dim >= num_classes")
    rng = stream(seed, "semantic")
    q, _ = np.linalg.qr(rng.standard_normal((sem_dim, sem_dim)))
    return q[:num_classes]
