"""Flat `key = value` run configuration.

Every tunable named by the other modules lives here with its default;
unknown keys are rejected by name.  Presets bundle the indoor/outdoor
paper settings; explicit overrides always win over file values, which
win over the preset.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import FormatError

# key -> (type tag, default). Tags: int, float, str, bool, floats (comma
# list of 1 or 3), ints (comma list).
SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "threads": ("int", 1),
    "data_dir": ("str", ""),
    "input_mode": ("str", "points"),  # points | images
    # point-cloud preprocessing
    "grid_cell": ("floats", (0.02,)),
    "max_points": ("int", 20000),  # 0 disables the random down-sample
    "mask_num_groups": ("int", 2048),
    "mask_group_size": ("int", 64),
    "mask_ratio": ("float", 0.75),
    "mask_before_grid": ("bool", True),
    "aug_enabled": ("bool", True),
    "aug_rot_max": ("float", 2.0 * np.pi),
    "aug_scale_min": ("float", 0.9),
    "aug_scale_max": ("float", 1.1),
    "aug_flip": ("bool", True),
    # image branch masking
    "img_patch": ("int", 32),
    "img_mask_ratio": ("float", 0.3),
    # encoder
    "enc_hidden": ("ints", (32, 32)),
    "enc_out": ("int", 16),
    "enc_radius": ("float", 0.05),
    # feature volume(s)
    "vol_dims": ("ints", (64,)),
    "vol_channels": ("int", 16),
    "vol_margin": ("float", 1.15),
    "vol_pad": ("float", 0.05),
    "vol_f32": ("bool", False),
    # field decoders
    "sdf_layers": ("int", 5),
    "rgb_layers": ("int", 3),
    "sem_layers": ("int", 2),
    "hidden": ("int", 128),
    "h_dim": ("int", 32),
    "pe_bands": ("int", 4),
    "semantic": ("bool", True),
    "sem_dim": ("int", 16),
    "log_s_init": ("float", float(np.log(3.0))),
    # rendering / supervision
    "rays_per_image": ("int", 128),
    "samples_per_ray": ("int", 128),
    "frames_per_cloud": ("int", 5),
    "t_mode": ("str", "stratified"),
    "lambda_c": ("float", 1.0),
    "lambda_d": ("float", 0.1),
    "lambda_sem": ("float", 0.01),
    "min_weight_sum": ("float", 0.05),
    # optimization
    "lr": ("float", 1e-4),
    "weight_decay": ("float", 0.05),
    "schedule": ("str", "exponential"),  # exponential | one-cycle
    "schedule_gamma": ("float", 1.0),
    "iters": ("int", 2000),
    "eval_every": ("int", 500),
    # dataset generation
    "fuse_views": ("int", 5),
    "views": ("int", 8),
    "resolution": ("int", 64),
}

PRESETS: dict[str, dict[str, str]] = {
    # paper indoor setting (RGB-D variant knobs)
    "indoor": {
        "rays_per_image": "128", "samples_per_ray": "128",
        "frames_per_cloud": "5", "lambda_c": "1.0", "lambda_d": "0.1",
        "lr": "1e-4", "weight_decay": "0.05", "schedule": "exponential",
        "grid_cell": "0.02",
    },
    # paper outdoor setting
    "outdoor": {
        "rays_per_image": "512", "samples_per_ray": "96",
        "sdf_layers": "6", "rgb_layers": "4", "hidden": "32",
        "lambda_c": "10.0", "lambda_d": "10.0",
        "grid_cell": "0.075,0.075,0.2", "mask_ratio": "0.8",
        "img_patch": "32", "img_mask_ratio": "0.3",
    },
}


def defaults() -> dict[str, object]:
    return {k: v for k, (_, v) in SCHEMA.items()}


def parse_value(key: str, raw: str) -> object:
    if key not in SCHEMA:
        raise FormatError(f"unknown config key {key!r}")
    tag = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "str":
            return raw
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tag == "floats":
            vals = tuple(float(t) for t in raw.split(","))
            if len(vals) not in (1, 3):
                raise ValueError("expected 1 or 3 comma-separated floats")
            return vals
        if tag == "ints":
            return tuple(int(t) for t in raw.split(","))
    except ValueError as exc:
        raise FormatError(f"config key {key!r}: {exc}") from exc
    raise FormatError(f"unhandled config type {tag!r}")


def format_value(key: str, value: object) -> str:
    tag = SCHEMA[key][0]
    if tag in ("floats", "ints"):
        return ",".join(repr(v) if tag == "floats" else str(v) for v in value)
    if tag == "bool":
        return "true" if value else "false"
    if tag == "float":
        return repr(float(value))
    return str(value)


def parse_file(path) -> dict[str, object]:
    out: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise FormatError(f"config line {lineno}: expected `key = value`")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in SCHEMA:
                raise FormatError(f"config line {lineno}: unknown config key {key!r}")
            out[key] = parse_value(key, raw)
    return out


def resolve(preset: str | None = None, file_path=None,
            overrides: dict[str, str] | None = None) -> dict[str, object]:
    """defaults <- preset <- file <- explicit overrides (strongest last)."""
    cfg = defaults()
    if preset is not None:
        if preset not in PRESETS:
            raise FormatError(f"unknown preset {preset!r}")
        for k, raw in PRESETS[preset].items():
            cfg[k] = parse_value(k, raw)
    if file_path is not None:
        cfg.update(parse_file(file_path))
    for k, raw in (overrides or {}).items():
        cfg[k] = parse_value(k, raw)
    return cfg


def echo(cfg: dict[str, object]) -> dict[str, str]:
    """String form of every value, embedded in checkpoint manifests."""
    return {k: format_value(k, cfg[k]) for k in sorted(cfg)}


def from_echo(echoed: dict[str, str]) -> dict[str, object]:
    cfg = defaults()
    for k, raw in echoed.items():
        cfg[k] = parse_value(k, raw)
    return cfg


def schema_hash() -> str:
    blob = ";".join(f"{k}:{t}:{format_value(k, d)}" for k, (t, d) in sorted(SCHEMA.items()))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]
