"""Synthetic training data and clip-composition utilities.

Three data sources feed the rest of the stack:

* moving-shapes clips: a disc or square bouncing around a small canvas,
  labeled by shape and initial direction (the training dataset);
* pseudo-videos: a single image turned into a clip by sliding/zooming a
  crop window along a linear path (bilinear resampling, exact and
  deterministic);
* Gaussian latent clips for calibration against the analytic denoiser.

It also hosts the segment-then-caption pipeline: per-frame relevance
scores are thresholded into kept segments, short runs are dropped, and a
captioner client (a deterministic mock here; a real model in production)
names each surviving segment.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

from .denoiser import GaussianWorld
from .errors import ConfigError, DataError, TransportError
from .seeding import stream

log = logging.getLogger(__name__)

SHAPE_KINDS = ("disc", "square")
DIRECTIONS = ("right", "left", "down", "up")
_DIRECTION_VECTORS = {
    "right": (0.0, 1.0),
    "left": (0.0, -1.0),
    "down": (1.0, 0.0),
    "up": (-1.0, 0.0),
}


@dataclass(frozen=True)
class MovingShapesSpec:
    canvas: int = 32
    frames: int = 8
    radius: int = 5
    speed_range: tuple[float, float] = (1.0, 3.0)

    def __post_init__(self) -> None:
        if self.canvas < 2 * self.radius + 2:
            raise ConfigError(
                f"shape of radius {self.radius} does not fit a {self.canvas}px canvas"
            )
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        lo, hi = self.speed_range
        if not 0.0 <= lo <= hi:
            raise ConfigError("speed_range must satisfy 0 <= lo <= hi")
        travel = self.canvas - 1 - 2 * self.radius
        if hi > travel:
            raise ConfigError(
                f"max speed {hi} exceeds the {travel}px travel range; reflection "
                "handles at most one wall hit per frame"
            )

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return tuple(f"{kind}_{d}" for kind in SHAPE_KINDS for d in DIRECTIONS)

    def describe(self) -> dict[str, Any]:
        return {
            "canvas": self.canvas,
            "frames": self.frames,
            "radius": self.radius,
            "speed_range": list(self.speed_range),
        }


def _bounce(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    pos = pos + vel
    if pos < lo:
        return 2.0 * lo - pos, -vel
    if pos > hi:
        return 2.0 * hi - pos, -vel
    return pos, vel


_SHAPE_COLORS = {"disc": (0.85, 0.35, 0.25), "square": (0.25, 0.45, 0.85)}
_BACKGROUND = 0.08


def _render_shape(kind: str, canvas: int, radius: int, cy: float, cx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    if kind == "disc":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    else:
        mask = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= radius
    frame = np.full((3, canvas, canvas), _BACKGROUND, dtype=np.float32)
    color = _SHAPE_COLORS[kind]
    for ch in range(3):
        frame[ch][mask] = color[ch]
    return frame


def gen_moving_shapes(spec: MovingShapesSpec, seed: int) -> tuple[np.ndarray, int]:
    """One bouncing-shape clip [F,3,H,W] in [0,1] plus its vocabulary label."""
    rng = stream(seed, "moving_shapes")
    kind_idx = int(rng.integers(len(SHAPE_KINDS)))
    dir_idx = int(rng.integers(len(DIRECTIONS)))
    kind = SHAPE_KINDS[kind_idx]
    dy, dx = _DIRECTION_VECTORS[DIRECTIONS[dir_idx]]
    speed = float(rng.uniform(*spec.speed_range))
    lo = float(spec.radius)
    hi = float(spec.canvas - 1 - spec.radius)
    cy = float(rng.uniform(lo, hi))
    cx = float(rng.uniform(lo, hi))
    vy, vx = dy * speed, dx * speed
    frames = []
    for _ in range(spec.frames):
        frames.append(_render_shape(kind, spec.canvas, spec.radius, cy, cx))
        cy, vy = _bounce(cy, vy, lo, hi)
        cx, vx = _bounce(cx, vx, lo, hi)
    label = kind_idx * len(DIRECTIONS) + dir_idx
    return np.stack(frames), label


@dataclass(eq=False)
class ClipDataset:
    """In-memory clip collection: [n,F,C,H,W] float32 plus integer labels."""

    clips: np.ndarray
    labels: np.ndarray
    vocabulary: tuple[str, ...]
    space: str = "pixel"

    def __post_init__(self) -> None:
        clips = np.asarray(self.clips, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if clips.ndim != 5:
            raise DataError(f"clips must be [n,F,C,H,W], got shape {clips.shape}")
        if labels.shape != (clips.shape[0],):
            raise DataError("labels must be one integer per clip")
        if self.space not in ("pixel", "latent"):
            raise DataError(f"unknown clip space {self.space!r}")
        self.clips = clips
        self.labels = labels
        self.vocabulary = tuple(self.vocabulary)

    def __len__(self) -> int:
        return int(self.clips.shape[0])


def clip_seeds(seed: int, count: int) -> list[int]:
    """Per-clip seeds derived from the dataset seed; recorded in manifests
    so a dataset can be regenerated clip by clip."""
    return [int(stream(seed, "clipseed", i).integers(2**63)) for i in range(count)]


def moving_shapes_dataset(spec: MovingShapesSpec, count: int, seed: int) -> ClipDataset:
    if count < 1:
        raise ConfigError("count must be >= 1")
    clips = []
    labels = []
    for clip_seed in clip_seeds(seed, count):
        clip, label = gen_moving_shapes(spec, seed=clip_seed)
        clips.append(clip)
        labels.append(label)
    return ClipDataset(
        clips=np.stack(clips),
        labels=np.asarray(labels, dtype=np.int64),
        vocabulary=spec.vocabulary,
        space="pixel",
    )


def clip_to_gray_latents(clip: np.ndarray) -> np.ndarray:
    """RGB [F,3,H,W] in [0,1] -> single-channel latents [F,1,H,W] in [-1,1].

    Luma weights 0.299/0.587/0.114.  This identity-resolution codec lets the
    denoiser train directly on pixel content without an autoencoder.
    """
    clip = np.asarray(clip, dtype=np.float32)
    if clip.ndim != 4 or clip.shape[1] != 3:
        raise ConfigError(f"expected [F,3,H,W] RGB clip, got shape {clip.shape}")
    gray = 0.299 * clip[:, 0] + 0.587 * clip[:, 1] + 0.114 * clip[:, 2]
    return (2.0 * gray - 1.0)[:, None].astype(np.float32)


def gray_latents_to_clip(latents: np.ndarray) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 4 or latents.shape[1] != 1:
        raise ConfigError(f"expected [F,1,H,W] latents, got shape {latents.shape}")
    gray = np.clip((latents[:, 0] + 1.0) / 2.0, 0.0, 1.0)
    return np.repeat(gray[:, None], 3, axis=1).astype(np.float32)


def moving_shapes_latent_dataset(spec: MovingShapesSpec, count: int, seed: int) -> ClipDataset:
    pixel = moving_shapes_dataset(spec, count, seed)
    latents = np.stack([clip_to_gray_latents(c) for c in pixel.clips])
    return ClipDataset(
        clips=latents, labels=pixel.labels, vocabulary=pixel.vocabulary, space="latent"
    )


def gaussian_world_clips(
    world: GaussianWorld,
    latent_shape: tuple[int, int, int, int],
    count: int,
    seed: int,
) -> ClipDataset:
    rng = stream(seed, "gaussian_world")
    clips = world.mu + world.s * rng.standard_normal(
        size=(count, *latent_shape), dtype=np.float32
    )
    return ClipDataset(
        clips=clips.astype(np.float32),
        labels=np.zeros(count, dtype=np.int64),
        vocabulary=("gaussian",),
        space="latent",
    )


DATASET_META_KEY = "__meta__"


def save_dataset(path: str | os.PathLike[str], dataset: ClipDataset) -> None:
    meta = {
        "format_version": 1,
        "vocabulary": list(dataset.vocabulary),
        "space": dataset.space,
    }
    try:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                clips=dataset.clips,
                labels=dataset.labels,
                **{
                    DATASET_META_KEY: np.frombuffer(
                        json.dumps(meta, sort_keys=True).encode("ascii"), dtype=np.uint8
                    )
                },
            )
    except OSError as exc:
        raise TransportError(f"cannot write dataset {path}: {exc}") from exc


def load_dataset(path: str | os.PathLike[str]) -> ClipDataset:
    if not os.path.exists(path):
        raise DataError(f"dataset not found: {path}")
    try:
        with np.load(path) as data:
            if DATASET_META_KEY not in data or "clips" not in data or "labels" not in data:
                raise DataError(f"dataset {path} is missing required entries")
            meta = json.loads(bytes(data[DATASET_META_KEY].tobytes()).decode("ascii"))
            clips = data["clips"]
            labels = data["labels"]
    except OSError as exc:
        raise TransportError(f"cannot read dataset {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"dataset {path} is malformed: {exc}") from exc
    return ClipDataset(
        clips=clips,
        labels=labels,
        vocabulary=tuple(meta.get("vocabulary", ())),
        space=str(meta.get("space", "pixel")),
    )


@dataclass(frozen=True)
class ZoomPanSpec:
    """Linear crop-window path over a still image.

    Rectangles are (top, left, height, width) in source pixels; frame k uses
    the elementwise interpolation start + k * (end - start) / (frames - 1).
    """

    source: np.ndarray
    start_rect: tuple[float, float, float, float]
    end_rect: tuple[float, float, float, float]
    frames: int
    out_size: tuple[int, int]

    def __post_init__(self) -> None:
        src = np.asarray(self.source, dtype=np.float32)
        if src.ndim != 3 or src.shape[0] != 3:
            raise ConfigError(f"source image must be [3,H,W], got shape {src.shape}")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        oh, ow = self.out_size
        if oh < 1 or ow < 1:
            raise ConfigError("output size must be positive")
        for name, rect in (("start_rect", self.start_rect), ("end_rect", self.end_rect)):
            top, left, height, width = rect
            if height <= 0 or width <= 0:
                raise ConfigError(f"{name} must have positive extent")
            if top < 0 or left < 0 or top + height > src.shape[1] or left + width > src.shape[2]:
                raise ConfigError(f"{name} {rect} leaves the source image bounds")
        object.__setattr__(self, "source", src)


def rect_at(spec: ZoomPanSpec, k: int) -> tuple[float, float, float, float]:
    """The crop rectangle for frame k; exact linear path by construction."""
    if spec.frames == 1:
        return spec.start_rect
    f = k / (spec.frames - 1)
    return tuple(
        s + f * (e - s) for s, e in zip(spec.start_rect, spec.end_rect)
    )  # type: ignore[return-value]


def _crop_resize(
    img: np.ndarray, rect: tuple[float, float, float, float], out_size: tuple[int, int]
) -> np.ndarray:
    """Bilinear crop-resize with the documented sampling rule.

    Output pixel (r, c) samples the source at
        y = top  + (r + 0.5) * rect_h / out_h - 0.5
        x = left + (c + 0.5) * rect_w / out_w - 0.5
    blending the four integer neighbors (indices clamped to the image).
    """
    top, left, rect_h, rect_w = rect
    out_h, out_w = out_size
    ys = top + (np.arange(out_h, dtype=np.float64) + 0.5) * rect_h / out_h - 0.5
    xs = left + (np.arange(out_w, dtype=np.float64) + 0.5) * rect_w / out_w - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)
    h, w = img.shape[1], img.shape[2]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    rows0 = img[:, y0c, :]
    rows1 = img[:, y1c, :]
    p00 = rows0[:, :, x0c]
    p01 = rows0[:, :, x1c]
    p10 = rows1[:, :, x0c]
    p11 = rows1[:, :, x1c]
    wy_ = wy[None, :, None]
    wx_ = wx[None, None, :]
    out = (
        p00 * (1.0 - wy_) * (1.0 - wx_)
        + p01 * (1.0 - wy_) * wx_
        + p10 * wy_ * (1.0 - wx_)
        + p11 * wy_ * wx_
    )
    return out.astype(np.float32)


def make_pseudo_video(spec: ZoomPanSpec) -> np.ndarray:
    """Render the clip: one crop-resize per frame along the linear path."""
    return np.stack([_crop_resize(spec.source, rect_at(spec, k), spec.out_size) for k in range(spec.frames)])


def make_test_image(size: int = 64) -> np.ndarray:
    """Procedural test image: gradients plus a disc and a square.

    Generated, not stored, so golden checks need no binary assets.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
    img = np.stack([xx, yy, 1.0 - 0.5 * (xx + yy)])
    cy = cx = size * 0.35
    r = size * 0.15
    disc = (yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2 <= r * r
    img[0][disc] = 0.9
    img[1][disc] = 0.2
    img[2][disc] = 0.2
    sq = (np.abs(yy * (size - 1) - size * 0.7) <= size * 0.12) & (
        np.abs(xx * (size - 1) - size * 0.7) <= size * 0.12
    )
    img[0][sq] = 0.15
    img[1][sq] = 0.7
    img[2][sq] = 0.3
    return img.astype(np.float32)


@dataclass(frozen=True, eq=False)
class SegmentDecision:
    """Kept-frame mask and the maximal kept runs of length >= min_len."""

    keep_mask: np.ndarray
    segments: tuple[tuple[int, int], ...]
    min_len: int

    def __post_init__(self) -> None:
        mask = np.asarray(self.keep_mask, dtype=bool)
        object.__setattr__(self, "keep_mask", mask)
        object.__setattr__(self, "segments", tuple((int(s), int(e)) for s, e in self.segments))
        prev_end = -1
        for s, e in self.segments:
            if not (0 <= s < e <= mask.shape[0]):
                raise ConfigError(f"segment [{s},{e}) outside the mask")
            if e - s < self.min_len:
                raise ConfigError(f"segment [{s},{e}) shorter than min_len={self.min_len}")
            if s <= prev_end:
                raise ConfigError("segments must be sorted and non-overlapping")
            if not mask[s:e].all():
                raise ConfigError(f"segment [{s},{e}) covers dropped frames")
            if s > 0 and mask[s - 1]:
                raise ConfigError(f"segment [{s},{e}) is not maximal on the left")
            if e < mask.shape[0] and mask[e]:
                raise ConfigError(f"segment [{s},{e}) is not maximal on the right")
            prev_end = e


def segment_video(scores: np.ndarray, keep_threshold: float, min_len: int) -> SegmentDecision:
    """Threshold scores into kept frames; keep maximal runs of >= min_len."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] < 1:
        raise ConfigError("scores must be a non-empty 1-d array")
    if min_len < 1:
        raise ConfigError("min_len must be >= 1")
    mask = scores >= keep_threshold
    segments: list[tuple[int, int]] = []
    start: int | None = None
    for i, kept in enumerate(mask.tolist() + [False]):
        if kept and start is None:
            start = i
        elif not kept and start is not None:
            if i - start >= min_len:
                segments.append((start, i))
            start = None
    return SegmentDecision(keep_mask=mask, segments=tuple(segments), min_len=min_len)


def combine_scores(*score_arrays: np.ndarray) -> np.ndarray:
    """Elementwise minimum: a frame survives only if every scorer keeps it."""
    if not score_arrays:
        raise ConfigError("need at least one score array")
    out = np.asarray(score_arrays[0], dtype=np.float64)
    for arr in score_arrays[1:]:
        out = np.minimum(out, np.asarray(arr, dtype=np.float64))
    return out


class CaptionerClient(Protocol):
    """External scorer/captioner boundary.

    ``score`` returns per-frame relevance in [0, 1]; ``caption`` names a
    clip given a label hint and a template id.  Implementations may raise
    TransportError for delivery failures; callers treat those as retryable.
    """

    def score(self, frame: np.ndarray, label: str) -> float: ...

    def caption(self, frames: np.ndarray, label: str, template_id: int) -> str: ...


DEFAULT_TEMPLATES = ("{label}", "a video of {label}", "footage showing {label}")


class MockCaptioner:
    """Deterministic stand-in for the external captioning service.

    Optionally file-backed: a JSON object mapping "label/template_id" to a
    fixed caption overrides the template expansion.  ``fail_keys`` simulates
    transport failures for testing the retry path.
    """

    def __init__(
        self,
        responses_path: str | None = None,
        templates: tuple[str, ...] = DEFAULT_TEMPLATES,
        fail_keys: tuple[str, ...] = (),
    ) -> None:
        self.templates = templates
        self.fail_keys = set(fail_keys)
        self.responses: dict[str, str] = {}
        if responses_path is not None:
            try:
                with open(responses_path, "r", encoding="utf-8") as fh:
                    self.responses = dict(json.load(fh))
            except OSError as exc:
                raise TransportError(f"cannot read captioner responses: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise DataError(f"captioner responses file is not JSON: {exc}") from exc

    def score(self, frame: np.ndarray, label: str) -> float:
        # Brightness as a stand-in relevance signal: deterministic and cheap.
        return float(np.mean(frame))

    def caption(self, frames: np.ndarray, label: str, template_id: int) -> str:
        key = f"{label}/{template_id}"
        if key in self.fail_keys:
            raise TransportError(f"simulated delivery failure for {key}")
        if key in self.responses:
            return self.responses[key]
        template = self.templates[template_id % len(self.templates)]
        return template.format(label=label)


@dataclass(frozen=True)
class SegmentCaption:
    segment: tuple[int, int]
    template_id: int
    caption: str | None
    error: str | None = None


@dataclass(frozen=True)
class ClipCaption:
    frame_index: int
    template_id: int
    caption: str | None
    error: str | None = None


def caption_clip(
    frames: np.ndarray,
    label: str,
    client: CaptionerClient,
    templates: tuple[str, ...] = DEFAULT_TEMPLATES,
    seed: int = 0,
) -> ClipCaption:
    """Caption a short clip from one seeded representative frame.

    Long videos go through segment_video + caption_segments; a short clip
    gets a single caption drawn from one randomly chosen frame, since its
    content barely changes over its few frames.  The frame and template
    choices replay exactly for a given seed.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 1:
        raise ConfigError(f"expected a non-empty [F,C,H,W] clip, got shape {frames.shape}")
    rng = stream(seed, "caption_clip")
    frame_index = int(rng.integers(frames.shape[0]))
    template_id = int(rng.integers(len(templates)))
    try:
        text = client.caption(frames[frame_index : frame_index + 1], label, template_id)
        return ClipCaption(frame_index=frame_index, template_id=template_id, caption=text)
    except TransportError as exc:
        log.warning("captioning clip frame %d failed: %s", frame_index, exc)
        return ClipCaption(
            frame_index=frame_index, template_id=template_id, caption=None, error=str(exc)
        )


def caption_segments(
    decision: SegmentDecision,
    frames: np.ndarray,
    label: str,
    client: CaptionerClient,
    templates: tuple[str, ...] = DEFAULT_TEMPLATES,
    seed: int = 0,
    max_workers: int = 1,
) -> list[SegmentCaption]:
    """Caption every surviving segment with a seeded template choice.

    Results keep segment order regardless of worker count.  A transport
    failure leaves that segment uncaptioned (caption None, error recorded)
    without failing the batch; the caller may retry just those segments.
    """
    frames = np.asarray(frames)
    template_ids = [
        int(stream(seed, "caption_template", idx).integers(len(templates)))
        for idx in range(len(decision.segments))
    ]

    def run(idx: int) -> SegmentCaption:
        start, end = decision.segments[idx]
        tid = template_ids[idx]
        try:
            text = client.caption(frames[start:end], label, tid)
            return SegmentCaption(segment=(start, end), template_id=tid, caption=text)
        except TransportError as exc:
            log.warning("captioning segment [%d,%d) failed: %s", start, end, exc)
            return SegmentCaption(segment=(start, end), template_id=tid, caption=None, error=str(exc))

    if max_workers <= 1 or len(decision.segments) <= 1:
        return [run(i) for i in range(len(decision.segments))]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(run, range(len(decision.segments))))
