"""Pixel frame files: binary PPM (P6) plus a JSON index per run.

Byte layout of each frame file, exactly:

    "P6\\n{width} {height}\\n255\\n"  (ASCII header)
    height * width * 3 bytes          (uint8 RGB, row-major, top to bottom)

Values are quantized from float [0, 1] by round(v * 255) after clipping.
The format is dependency-free to read and write, which keeps golden-file
tests and external inspection trivial.  ``frames_index.json`` lists every
frame file with its clip/frame position and sha256 digest.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any

import numpy as np

from .errors import ConfigError, DataError, TransportError
from .manifest import digest_bytes

INDEX_NAME = "frames_index.json"


def encode_ppm(frame: np.ndarray) -> bytes:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ConfigError(f"frame must be [3,H,W], got shape {frame.shape}")
    h, w = frame.shape[1], frame.shape[2]
    quant = np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0)
    quant = np.round(quant * 255.0).astype(np.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + quant.transpose(1, 2, 0).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    # Header: magic, width, height, maxval, separated by whitespace; '#'
    # starts a comment running to end of line.
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4 and pos < len(data):
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
    if len(fields) < 4 or fields[0] != b"P6":
        raise DataError("not a binary PPM (P6) file")
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as exc:
        raise DataError(f"malformed PPM header: {exc}") from exc
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval}; expected 255")
    pos += 1  # single whitespace byte after maxval
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError("PPM pixel payload is truncated")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def write_ppm(path: str | os.PathLike[str], frame: np.ndarray) -> None:
    data = encode_ppm(frame)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise TransportError(f"cannot write frame {path}: {exc}") from exc


def read_ppm(path: str | os.PathLike[str]) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise TransportError(f"cannot read frame {path}: {exc}") from exc
    return decode_ppm(data)


def frame_filename(clip: int, frame: int) -> str:
    return f"clip{clip:03d}_frame{frame:03d}.ppm"


def write_clip_frames(
    out_dir: str | os.PathLike[str],
    pixel_clips: list[np.ndarray],
    workers: int = 1,
) -> dict[str, Any]:
    """Write every frame of every clip plus the index; returns the index.

    Frame files are pure functions of their frame content, so any worker
    count produces identical bytes; workers only parallelize encoding.
    """
    out_dir = os.fspath(out_dir)
    if not pixel_clips:
        raise ConfigError("no clips to write")
    jobs = [
        (ci, fi, clip[fi])
        for ci, clip in enumerate(pixel_clips)
        for fi in range(clip.shape[0])
    ]

    def encode(job: tuple[int, int, np.ndarray]) -> tuple[int, int, bytes]:
        ci, fi, frame = job
        return ci, fi, encode_ppm(frame)

    if workers <= 1:
        encoded = [encode(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            encoded = list(pool.map(encode, jobs))
    files = []
    for ci, fi, data in encoded:
        name = frame_filename(ci, fi)
        try:
            with open(os.path.join(out_dir, name), "wb") as fh:
                fh.write(data)
        except OSError as exc:
            raise TransportError(f"cannot write frame {name}: {exc}") from exc
        files.append({"path": name, "clip": ci, "frame": fi, "sha256": digest_bytes(data)})
    first = pixel_clips[0]
    index = {
        "format_version": 1,
        "clips": len(pixel_clips),
        "frames_per_clip": int(first.shape[0]),
        "height": int(first.shape[2]),
        "width": int(first.shape[3]),
        "files": files,
    }
    index_path = os.path.join(out_dir, INDEX_NAME)
    with open(index_path, "w", encoding="ascii") as fh:
        json.dump(index, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return index


def read_clip_frames(run_dir: str | os.PathLike[str]) -> list[np.ndarray]:
    """Load the clips a run wrote, using its index."""
    run_dir = os.fspath(run_dir)
    index_path = os.path.join(run_dir, INDEX_NAME)
    if not os.path.exists(index_path):
        raise DataError(f"no {INDEX_NAME} in {run_dir}")
    with open(index_path, "r", encoding="ascii") as fh:
        index = json.load(fh)
    clips: dict[int, dict[int, np.ndarray]] = {}
    for entry in index["files"]:
        frame = read_ppm(os.path.join(run_dir, entry["path"]))
        clips.setdefault(int(entry["clip"]), {})[int(entry["frame"])] = frame
    out = []
    for ci in sorted(clips):
        frames = clips[ci]
        out.append(np.stack([frames[fi] for fi in sorted(frames)]))
    return out
