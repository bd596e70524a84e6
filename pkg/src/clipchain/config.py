"""Config files: JSON documents with versioned defaults and a published schema.

Every training-side command takes ``--config file.json``.  The file must
carry ``version`` (currently 1) and ``kind`` matching the command; known
sections are deep-merged over the defaults below, unknown keys are
rejected.  Paths inside configs (and CLI path arguments) resolve against
the ``CLIPCHAIN_ROOT`` environment variable when they are relative and the
variable is set.

Generation defaults mirror the recommended sampling operating point
(guidance 10.0, 50 inference steps, 4 prompt frames, alpha 4, beta 0.4 on
8-frame clips).  The stock denoiser works on 32x32 latents; production
systems run the same mechanism on latents encoded from 256x256 pixels, and
nothing here assumes the desk scale.
"""

from __future__ import annotations

import copy
import json
import os
from typing import Any

from .errors import ConfigError

ENV_ROOT = "CLIPCHAIN_ROOT"
CONFIG_VERSION = 1

GENERATE_DEFAULTS: dict[str, Any] = {
    "clips": 2,
    "frames": 8,
    "prompt_frames": 4,
    "alpha": 4.0,
    "beta": 0.4,
    "guidance": 10.0,
    "steps": 50,
    "seed": 0,
}

DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-data": {
        "mode": "moving_shapes",
        "count": 10,
        "seed": 0,
        "latent": False,
        "moving_shapes": {
            "canvas": 32,
            "frames": 8,
            "radius": 5,
            "speed_range": [1.0, 3.0],
        },
        "pseudo_video": {
            "image": "builtin",
            "image_size": 64,
            "frames": 8,
            "out_size": [32, 32],
        },
        "gaussian_world": {
            "mu": 0.0,
            "s": 1.0,
            "shape": [8, 1, 16, 16],
        },
    },
    "train": {
        "seed": 0,
        "init_seed": 0,
        "schedule": {"profile": "linear", "num_steps": 1000, "params": {}},
        "model": {
            "latent_shape": [8, 1, 32, 32],
            "channels": 32,
            "cond_dim": 16,
            "vocab_size": 8,
            "temporal_layers": [
                {"kind": "temp_conv", "position": 1},
                {"kind": "temp_attn", "position": 2},
            ],
        },
        "data": {"path": None, "gaussian_world": None},
        "train": {
            "steps": 200,
            "batch_size": 4,
            "lr": 2e-3,
            "p_uncond": 0.1,
            "freeze": [],
        },
    },
    "train-ae": {
        "seed": 0,
        "init_seed": 0,
        "spec": {
            "latent_channels": 4,
            "base_channels": 16,
            "temporal_layers": [{"position": 1, "zero_init": True}],
        },
        "data": {"path": None},
        "train": {"steps": 300, "batch_size": 8, "lr": 2e-3, "a_reg": 1e-5},
    },
    "finetune-ae": {
        "seed": 0,
        "disc_seed": 0,
        "checkpoint": None,
        "data": {"path": None},
        "weights": {"a_rec": 1.0, "a_reg": 1e-5, "a_disc": 0.5},
        "train": {
            "steps": 200,
            "batch_size": 2,
            "lr": 2e-3,
            "disc_lr": 2e-3,
            "latent_noise_std": 0.05,
        },
    },
}


def data_root() -> str | None:
    return os.environ.get(ENV_ROOT) or None


def resolve_path(path: str | None) -> str | None:
    """Make a possibly relative path absolute against CLIPCHAIN_ROOT."""
    if path is None:
        return None
    root = data_root()
    if root is not None and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _deep_merge(base: Any, override: Any, crumb: str) -> Any:
    if isinstance(base, dict):
        if not isinstance(override, dict):
            raise ConfigError(f"config key {crumb!r} must be an object")
        merged = copy.deepcopy(base)
        for key, value in override.items():
            if key not in base:
                raise ConfigError(f"unknown config key {crumb + key!r}")
            merged[key] = _deep_merge(base[key], value, crumb + key + ".")
        return merged
    return copy.deepcopy(override)


def load_config(path: str, expected_kind: str) -> dict[str, Any]:
    """Read, validate, and default-fill a config document."""
    path = resolve_path(path)
    if path is None or not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    version = doc.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}; this build reads {CONFIG_VERSION}")
    kind = doc.pop("kind", expected_kind)
    if kind != expected_kind:
        raise ConfigError(f"config kind {kind!r} does not match command {expected_kind!r}")
    if expected_kind not in DEFAULTS:
        raise ConfigError(f"no defaults registered for {expected_kind!r}")
    merged = _deep_merge(DEFAULTS[expected_kind], doc, "")
    merged["version"] = CONFIG_VERSION
    merged["kind"] = expected_kind
    return merged


def schema() -> dict[str, Any]:
    """The published schema: defaults double as the shape/type reference."""
    return {
        "version": CONFIG_VERSION,
        "kinds": copy.deepcopy(DEFAULTS),
        "generate_flags": copy.deepcopy(GENERATE_DEFAULTS),
    }
