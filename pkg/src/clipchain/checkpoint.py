"""Checkpoint files: parameter arrays plus JSON metadata in one npz.

Layout: each parameter is stored under ``param/<name>`` as its exact numpy
array (npz preserves dtype, shape, and element bytes, so save/load
round-trips are bit-exact).  A single ``__meta__`` entry holds the canonical
JSON metadata (model kind, architecture spec, schedule summary, config
hash) as uint8 bytes.  Parameter-group digests let callers prove which
parts of a model a training stage touched.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any

import numpy as np

from .errors import DataError, TransportError
from .manifest import canonical_json, digest_bytes

META_KEY = "__meta__"
PARAM_PREFIX = "param/"


def save_checkpoint(
    path: str | os.PathLike[str],
    kind: str,
    meta: dict[str, Any],
    params: dict[str, np.ndarray],
) -> None:
    payload: dict[str, np.ndarray] = {}
    for name, arr in params.items():
        payload[PARAM_PREFIX + name] = np.asarray(arr)
    meta_doc = {"kind": kind, "meta": meta}
    payload[META_KEY] = np.frombuffer(canonical_json(meta_doc).encode("ascii"), dtype=np.uint8)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **payload)
    except OSError as exc:
        raise TransportError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | os.PathLike[str]) -> tuple[str, dict[str, Any], dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as data:
            if META_KEY not in data:
                raise DataError(f"checkpoint {path} has no metadata entry")
            meta_doc = json.loads(bytes(data[META_KEY].tobytes()).decode("ascii"))
            params = {
                key[len(PARAM_PREFIX) :]: data[key]
                for key in data.files
                if key.startswith(PARAM_PREFIX)
            }
    except OSError as exc:
        raise TransportError(f"cannot read checkpoint {path}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise DataError(f"checkpoint {path} is malformed: {exc}") from exc
    if not isinstance(meta_doc, dict) or "kind" not in meta_doc or "meta" not in meta_doc:
        raise DataError(f"checkpoint {path} metadata is malformed")
    return meta_doc["kind"], meta_doc["meta"], params


def params_digest(params: dict[str, np.ndarray], names: list[str] | None = None) -> str:
    """sha256 over the named parameters (all when names is None), order-free.

    Each parameter contributes its name, dtype, shape, and raw bytes; the
    iteration order is the sorted name order, so two state dicts with equal
    content always digest identically.
    """
    selected = sorted(params.keys() if names is None else names)
    h = hashlib.sha256()
    for name in selected:
        if name not in params:
            raise DataError(f"parameter {name!r} missing from checkpoint state")
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode("utf-8"))
        h.update(f"|{arr.dtype.str}|{arr.shape}|".encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def digest_groups(params: dict[str, np.ndarray], groups: dict[str, list[str]]) -> dict[str, str]:
    return {group: params_digest(params, names) for group, names in sorted(groups.items())}


__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "params_digest",
    "digest_groups",
    "digest_bytes",
]
