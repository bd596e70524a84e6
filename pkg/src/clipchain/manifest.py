"""Run manifests: canonical JSON, content digests, and verification.

Every CLI command writes a ``run_manifest.json`` next to its outputs.  The
manifest records the resolved configuration, the seed, digests of all input
and output files, and a self-digest over the canonical serialization of
everything else.  ``verify`` recomputes the digests and reports mismatches,
which is what makes "bit-exact replay" a checkable claim instead of a hope.

Canonical JSON here means: sorted keys, no whitespace, ASCII escapes, and
the shortest round-tripping float representation (python's ``repr``).  Two
manifests with equal content always serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any

import numpy as np

from .errors import DataError, TransportError

MANIFEST_NAME = "run_manifest.json"
MANIFEST_VERSION = 1


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_json(obj: Any) -> str:
    return digest_bytes(canonical_json(obj).encode("ascii"))


def digest_array(arr: np.ndarray) -> str:
    """Digest dtype, shape, and raw element bytes (C order)."""
    header = f"{arr.dtype.str}|{arr.shape}|".encode("ascii")
    return digest_bytes(header + np.ascontiguousarray(arr).tobytes())


def digest_file(path: str | os.PathLike[str]) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise TransportError(f"cannot read {path}: {exc}") from exc
    return h.hexdigest()


def build_manifest(
    command: str,
    config: dict[str, Any],
    seed: int | None,
    inputs: dict[str, str],
    outputs: dict[str, str],
    extra: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Assemble the manifest body and stamp its self-digest.

    ``inputs`` and ``outputs`` map artifact names (paths relative to the run
    directory, or logical names for inputs) to sha256 hex digests.
    """
    body: dict[str, Any] = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": dict(sorted(inputs.items())),
        "outputs": dict(sorted(outputs.items())),
        "extra": extra or {},
    }
    body["manifest_digest"] = digest_json(body)
    return body


def manifest_self_digest(manifest: dict[str, Any]) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_digest"}
    return digest_json(body)


def write_manifest(run_dir: str | os.PathLike[str], manifest: dict[str, Any]) -> str:
    path = os.path.join(os.fspath(run_dir), MANIFEST_NAME)
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(canonical_json(manifest))
            fh.write("\n")
    except OSError as exc:
        raise TransportError(f"cannot write {path}: {exc}") from exc
    return path


def load_manifest(run_dir: str | os.PathLike[str]) -> dict[str, Any]:
    path = os.path.join(os.fspath(run_dir), MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST_NAME} in {run_dir}")
    try:
        with open(path, "r", encoding="ascii") as fh:
            raw = fh.read()
    except OSError as exc:
        raise TransportError(f"cannot read {path}: {exc}") from exc
    try:
        manifest = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "outputs" not in manifest:
        raise DataError(f"{path} lacks the manifest structure")
    return manifest


def verify_run(run_dir: str | os.PathLike[str]) -> list[str]:
    """Recompute digests for a run directory; return a list of mismatches.

    An empty list means the manifest is internally consistent and every
    listed output file still hashes to its recorded digest.
    """
    run_dir = os.fspath(run_dir)
    manifest = load_manifest(run_dir)
    problems: list[str] = []
    recorded = manifest.get("manifest_digest")
    if recorded != manifest_self_digest(manifest):
        problems.append("manifest self-digest mismatch")
    for rel, want in sorted(manifest.get("outputs", {}).items()):
        path = os.path.join(run_dir, rel)
        if not os.path.exists(path):
            problems.append(f"missing output {rel}")
            continue
        got = digest_file(path)
        if got != want:
            problems.append(f"digest mismatch for {rel}: recorded {want[:12]}.., found {got[:12]}..")
    return problems
