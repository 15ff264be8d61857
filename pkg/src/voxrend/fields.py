"""Neural field decoders over the feature volume.

The SDF head maps ``concat(pe(p), f)`` to a scalar distance plus the
last hidden activation ``h`` (the geometry feature consumed by the
color and semantic heads).  Hidden layers use softplus with beta=100;
color output is squashed by a logistic; the semantic head is linear.

Surface normals are central finite differences of the composed field
``s(p) = sdf(pe(p), trilinear(volume, p))`` with step ``0.5 * min
voxel`` and are treated as constants by the gradient engine
(stop-gradient); that is the one intentional deviation from exact
end-to-end differentiability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DomainError

HIDDEN_BETA = 100.0
NORMAL_FALLBACK = np.array([0.0, 0.0, 1.0])
_NORMAL_MIN_NORM = 1e-8


@dataclass
class MlpParams:
    """(weight, bias) pairs; hidden softplus(beta=100), output per tag."""

    layers: list[tuple]
    out_activation: str = "linear"  # "linear" | "logistic"

    def __post_init__(self):
        if not self.layers:
            raise DomainError("mlp needs at least one layer")
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if ad.value_of(w0).shape[1] != ad.value_of(w1).shape[0]:
                raise DomainError("mlp layer dimensions do not chain")
        for w, b in self.layers:
            if ad.value_of(b).shape != (ad.value_of(w).shape[1],):
                raise DomainError("bias width must match layer output")

    @property
    def in_dim(self) -> int:
        return ad.value_of(self.layers[0][0]).shape[0]

    @property
    def out_dim(self) -> int:
        return ad.value_of(self.layers[-1][0]).shape[1]


@dataclass
class FieldBundle:
    """Every trainable decoder: SDF, RGB, optional semantic, sharpness."""

    sdf: MlpParams
    rgb: MlpParams
    log_s: object  # scalar, sharpness stored in log space
    semantic: MlpParams | None = None
    pe_bands: int = 4

    def __post_init__(self):
        if self.pe_bands < 0:
            raise DomainError("pe_bands must be >= 0")
        if len(self.sdf.layers) < 2:
            raise DomainError("sdf mlp needs a hidden layer to expose h")

    @property
    def h_dim(self) -> int:
        return ad.value_of(self.sdf.layers[-2][0]).shape[1]

    @property
    def feat_dim(self) -> int:
        return self.sdf.in_dim - pe_dim(self.pe_bands)

    def sharpness(self):
        return ad.exp(self.log_s)


def pe_dim(bands: int) -> int:
    return 3 + 6 * bands


def positional_encoding(pts: np.ndarray, bands: int) -> np.ndarray:
    """(n, 3) -> (n, 3 + 6*bands): raw p plus sin/cos octaves 2^k * pi * p.

    With 0 bands the encoding is the identity.  Points are constants in
    this pipeline, so the encoding is computed tape-free.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if bands == 0:
        return pts
    parts = [pts]
    for k in range(bands):
        w = (2.0 ** k) * np.pi
        parts.append(np.sin(w * pts))
        parts.append(np.cos(w * pts))
    return np.concatenate(parts, axis=1)


def mlp_forward(params: MlpParams, x, want_hidden: bool = False):
    """Shared MLP evaluator; returns output or (output, last hidden)."""
    hidden = None
    for i, (w, b) in enumerate(params.layers):
        x = ad.add(ad.matmul(x, w), b)
        if i < len(params.layers) - 1:
            x = ad.softplus(x, HIDDEN_BETA)
            hidden = x
    if params.out_activation == "logistic":
        x = ad.logistic(x)
    return (x, hidden) if want_hidden else x


def eval_sdf(bundle: FieldBundle, pts, feats):
    """(s, h) at points with interpolated features.

    Inputs are concat(pe(p), f); ``s`` is the scalar head output and
    ``h`` the activation of the last hidden layer.
    """
    pe = positional_encoding(pts, bundle.pe_bands)
    f_val = ad.value_of(feats)
    if pe.shape[1] + f_val.shape[1] != bundle.sdf.in_dim:
        raise DomainError(
            f"sdf expects {bundle.sdf.in_dim} inputs, got {pe.shape[1]}+{f_val.shape[1]}")
    x = ad.concat([pe, feats], axis=1)
    s, h = mlp_forward(bundle.sdf, x, want_hidden=True)
    return s, h


def eval_rgb(bundle: FieldBundle, pts, feats, dirs, normals, hidden):
    """Color in (0,1): logistic over the MLP of concat(pe, f, d, n, h)."""
    pe = positional_encoding(pts, bundle.pe_bands)
    x = ad.concat([pe, feats, np.asarray(dirs, np.float64),
                   np.asarray(normals, np.float64), hidden], axis=1)
    if ad.value_of(x).shape[1] != bundle.rgb.in_dim:
        raise DomainError(
            f"rgb expects {bundle.rgb.in_dim} inputs, got {ad.value_of(x).shape[1]}")
    return mlp_forward(bundle.rgb, x)


def eval_semantic(bundle: FieldBundle, pts, feats, normals, hidden):
    """Linear semantic features of width sem_dim (head must exist)."""
    if bundle.semantic is None:
        raise ContractError("field bundle has no semantic head")
    pe = positional_encoding(pts, bundle.pe_bands)
    x = ad.concat([pe, feats, np.asarray(normals, np.float64), hidden], axis=1)
    if ad.value_of(x).shape[1] != bundle.semantic.in_dim:
        raise DomainError(
            f"semantic expects {bundle.semantic.in_dim} inputs, "
            f"got {ad.value_of(x).shape[1]}")
    return mlp_forward(bundle.semantic, x)


def sdf_scalar_plain(bundle: FieldBundle, volumes, pts: np.ndarray) -> np.ndarray:
    """Tape-free s(p) over a list of DenseVolume (features concatenated)."""
    from .volume import trilinear_query

    feats = np.concatenate([ad.value_of(trilinear_query(v, pts)) for v in volumes], axis=1)
    plain = FieldBundle(_plain_mlp(bundle.sdf), _plain_mlp(bundle.rgb),
                        ad.value_of(bundle.log_s), None, bundle.pe_bands)
    s, _ = eval_sdf(plain, pts, feats)
    return np.asarray(s)[:, 0]


def _plain_mlp(params: MlpParams) -> MlpParams:
    return MlpParams([(ad.value_of(w), ad.value_of(b)) for w, b in params.layers],
                     params.out_activation)


def eval_normal(bundle: FieldBundle, volumes, pts) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals from central differences of the composed SDF.

    Returns (normals (n,3), fallback flags (n,)).  Where the raw
    gradient norm is below 1e-8 the fallback (0,0,1) is substituted and
    flagged.  All arithmetic is tape-free: gradients never flow through
    the normal.
    """
    volumes = volumes if isinstance(volumes, (list, tuple)) else [volumes]
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    eps = 0.5 * min(float(np.min(v.voxel)) for v in volumes)
    n = len(pts)
    shifted = np.repeat(pts, 6, axis=0)
    for ax in range(3):
        shifted[2 * ax::6, ax] += eps
        shifted[2 * ax + 1::6, ax] -= eps
    s = sdf_scalar_plain(bundle, volumes, shifted).reshape(n, 6)
    grad = np.stack([(s[:, 0] - s[:, 1]), (s[:, 2] - s[:, 3]), (s[:, 4] - s[:, 5])],
                    axis=1) / (2.0 * eps)
    norm = np.linalg.norm(grad, axis=1)
    fallback = norm < _NORMAL_MIN_NORM
    out = np.empty_like(grad)
    out[fallback] = NORMAL_FALLBACK
    ok = ~fallback
    out[ok] = grad[ok] / norm[ok, None]
    return out, fallback


def init_mlp_arrays(sizes: list[int], rng: np.random.Generator,
                    final_weight_scale: float = 0.0,
                    final_bias: float = 0.0) -> list[np.ndarray]:
    """He-initialised [w0, b0, ...]; the final layer is scaled separately.

    ``final_weight_scale=0`` zeroes the last weight matrix, which pins
    the initial output to the final bias (used to start the SDF at a
    small positive constant and the color at mid-gray).
    """
    arrays: list[np.ndarray] = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        last = i == len(sizes) - 2
        if last:
            arrays.append(rng.standard_normal((a, b)) * final_weight_scale)
            arrays.append(np.full(b, final_bias))
        else:
            arrays.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
            arrays.append(np.zeros(b))
    return arrays
