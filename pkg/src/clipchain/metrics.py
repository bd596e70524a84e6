"""Temporal-consistency diagnostics for generated clips.

These run on pixel clips by default and on latent clips unchanged (they
only assume [F, C, H, W] float arrays).  They substitute for heavyweight
distribution metrics that need pretrained video classifiers; report
generation labels those as not computed.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


def _check_clip_pair(clip_a: np.ndarray, clip_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(clip_a, dtype=np.float64)
    b = np.asarray(clip_b, dtype=np.float64)
    if a.ndim != 4 or b.ndim != 4:
        raise ConfigError("clips must be 4-d [F,C,H,W]")
    if a.shape != b.shape:
        raise ConfigError(f"clip shapes differ: {a.shape} vs {b.shape}")
    return a, b


def boundary_consistency(clip_a: np.ndarray, clip_b: np.ndarray) -> float:
    """Mean absolute difference between clip_a's last and clip_b's first frame.

    0 means the boundary is seamless; larger is worse.
    """
    a, b = _check_clip_pair(clip_a, clip_b)
    return float(np.mean(np.abs(a[-1] - b[0])))


def smoothness(clip: np.ndarray) -> float:
    """Mean absolute difference between adjacent frames; 0 for a static clip."""
    c = np.asarray(clip, dtype=np.float64)
    if c.ndim != 4:
        raise ConfigError("clip must be 4-d [F,C,H,W]")
    if c.shape[0] < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(c, axis=0))))


def _normalized_correlation(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    xn = float(np.sqrt(np.sum(xc * xc)))
    yn = float(np.sqrt(np.sum(yc * yc)))
    if xn == 0.0 or yn == 0.0:
        log.warning("zero-variance frame in cycling_score; counting correlation as 0")
        return 0.0
    return float(np.sum(xc * yc) / (xn * yn))


def cycling_score(clip_prev: np.ndarray, clip_next: np.ndarray) -> float:
    """Detect reversed-repetition across a clip boundary.

    Mean over j of the normalized correlation between clip_next frame j and
    clip_prev frame N-1-j.  1.0 means clip_next replays clip_prev backwards
    exactly (up to per-frame affine gain), -1.0 the anti-correlated analog,
    near 0 unrelated content.  Invariant to adding a constant to either
    clip.  Zero-variance frames contribute 0 with a logged warning.
    """
    prev, nxt = _check_clip_pair(clip_prev, clip_next)
    frames = prev.shape[0]
    scores = [
        _normalized_correlation(nxt[j], prev[frames - 1 - j]) for j in range(frames)
    ]
    return float(np.mean(scores))
