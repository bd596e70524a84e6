"""Clip-by-clip long-video generation with noise reuse across boundaries.

A long video is sampled as ``num_clips`` clips of ``frames`` frames each.
Clip 0 starts from fresh standard-normal noise.  Every later clip derives
its initial noise from its predecessor in three moves:

1. Reverse the predecessor's initial noise along the frame axis, so the
   new clip's frame j starts from what frame N-1-j started from.
2. Keep the first ``prompt_frames`` frames of that reversal verbatim; for
   every later frame, shrink the reused noise by ``alpha / sqrt(1+alpha^2)``
   and add fresh Gaussian noise with variance ``1 / (1+alpha^2)``, which
   preserves unit element variance for any ``alpha >= 0`` (``alpha = 0``
   means all-fresh noise, large ``alpha`` means mostly reused).
3. While denoising, steer the prompt frames toward the predecessor: frame
   j's update is replaced by the predecessor's recorded latent (at the same
   timestep, for mirrored frame N-1-j) during an initial span of steps that
   shrinks linearly from ``beta`` of the total for frame 0 down to nothing
   at frame ``prompt_frames``.

The replacement span is computed on the inference-step scale: with K
visited steps, counting the current position k from the end as t = K - k,
frame j is steered while  t > (1 - beta) * K + beta * K * j / prompt_frames.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .clips import LatentClip
from .denoiser import Conditioning
from .errors import ConfigError
from .sampler import (
    DenoisingTrajectory,
    SamplerConfig,
    inference_timesteps,
    sample_clip,
)
from .schedule import NoiseSchedule
from .seeding import stream


@dataclass(frozen=True)
class LongVideoConfig:
    frames: int = 8
    prompt_frames: int = 4
    alpha: float = 4.0
    beta: float = 0.4
    num_clips: int = 2
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if not 0 <= self.prompt_frames <= self.frames:
            raise ConfigError(
                f"prompt_frames must lie in [0, frames]; got {self.prompt_frames} "
                f"with frames={self.frames}"
            )
        if self.alpha < 0.0:
            raise ConfigError("alpha must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.beta > 0.0 and self.prompt_frames == 0:
            raise ConfigError("beta > 0 requires prompt_frames >= 1")
        if self.num_clips < 1:
            raise ConfigError("num_clips must be >= 1")

    def describe(self) -> dict[str, Any]:
        return {
            "frames": self.frames,
            "prompt_frames": self.prompt_frames,
            "alpha": self.alpha,
            "beta": self.beta,
            "num_clips": self.num_clips,
            "sampler": self.sampler.describe(),
            "seed": self.seed,
        }


@dataclass(eq=False)
class LongVideoResult:
    clips: list[LatentClip]
    trajectories: list[DenoisingTrajectory]
    config: LongVideoConfig
    initial_noises: list[np.ndarray]
    metrics_digest: str | None = None


def reverse_initial_noise(prev_initial_noise: np.ndarray) -> np.ndarray:
    """Pure frame-order reversal: output[j] = input[N-1-j].  An involution."""
    noise = np.asarray(prev_initial_noise)
    if noise.ndim != 4 or noise.shape[0] < 1:
        raise ConfigError(f"initial noise must be non-empty [N,C,H,W], got {noise.shape}")
    return noise[::-1].copy()


def blend_fresh_noise(
    reversed_noise: np.ndarray,
    prompt_frames: int,
    alpha: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Re-randomize the non-prompt frames while preserving unit variance.

    Frames before ``prompt_frames`` pass through unchanged.  Each later
    frame becomes ``alpha/sqrt(1+alpha^2) * frame + eps`` with independent
    ``eps ~ N(0, 1/(1+alpha^2))`` per element; the squared coefficients sum
    to 1, so unit-variance noise stays unit-variance.
    """
    noise = np.asarray(reversed_noise, dtype=np.float32)
    if noise.ndim != 4:
        raise ConfigError(f"expected [N,C,H,W] noise, got shape {noise.shape}")
    frames = noise.shape[0]
    if not 0 <= prompt_frames <= frames:
        raise ConfigError(f"prompt_frames {prompt_frames} outside [0, {frames}]")
    if alpha < 0.0:
        raise ConfigError("alpha must be >= 0")
    out = noise.copy()
    if prompt_frames == frames:
        return out
    keep = float(alpha / np.sqrt(1.0 + alpha * alpha))
    fresh_std = float(np.sqrt(1.0 / (1.0 + alpha * alpha)))
    eps = rng.standard_normal(size=out[prompt_frames:].shape, dtype=np.float32)
    out[prompt_frames:] = keep * out[prompt_frames:] + fresh_std * eps
    return out


def guided_step_plan(
    frames: int,
    prompt_frames: int,
    beta: float,
    timesteps: np.ndarray,
) -> dict[int, tuple[int, ...]]:
    """Which visited timesteps each frame is steered at.

    Returns, per frame j, the timesteps t_k whose outgoing update gets
    replaced.  Counting position k from the end of the K-step subsequence
    as t = K - k, frame j is steered while t exceeds
    ``(1 - beta) * K + beta * K * j / prompt_frames``; frames at or past
    ``prompt_frames`` are never steered.  Span sizes shrink (weakly) as j
    grows, so early frames track the previous clip longest.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError("beta must lie in [0, 1]")
    if frames < 1:
        raise ConfigError("frames must be >= 1")
    plan: dict[int, tuple[int, ...]] = {}
    if beta == 0.0:
        return {j: () for j in range(frames)}
    if prompt_frames == 0:
        raise ConfigError("beta > 0 requires prompt_frames >= 1")
    total = len(timesteps)
    for j in range(frames):
        if j >= prompt_frames:
            plan[j] = ()
            continue
        threshold = (1.0 - beta) * total + beta * total * j / prompt_frames
        plan[j] = tuple(
            int(timesteps[k]) for k in range(total) if (total - k) > threshold
        )
    return plan


def build_override(
    plan: dict[int, tuple[int, ...]],
    prev_trajectory: DenoisingTrajectory,
    timesteps: np.ndarray,
) -> dict[tuple[int, int], np.ndarray]:
    """Materialize the steering plan against the previous clip's trajectory.

    For frame j steered at visited timestep t_k, the injected value is the
    previous clip's latent at the *next* timestep in the subsequence (the
    same lattice position the update would have produced) for the mirrored
    frame N-1-j.
    """
    ts = [int(t) for t in timesteps]
    next_of: dict[int, int | None] = {
        ts[k]: (ts[k + 1] if k + 1 < len(ts) else None) for k in range(len(ts))
    }
    frames = len(plan)
    override: dict[tuple[int, int], np.ndarray] = {}
    for j, guided in plan.items():
        mirror = frames - 1 - j
        for t in guided:
            if t not in next_of:
                raise ConfigError(f"plan names timestep {t} outside the subsequence")
            t_next = next_of[t]
            if t_next is None:
                if prev_trajectory.final is None:
                    raise ConfigError("previous trajectory lacks its final lattice entry")
                source = prev_trajectory.final[mirror]
            else:
                source = prev_trajectory.at(t_next)[mirror]
            override[(t, j)] = source.copy()
    return override


def generate_long_video(
    model: Any,
    schedule: NoiseSchedule,
    cond: Conditioning | None,
    config: LongVideoConfig,
) -> LongVideoResult:
    """Run the full multi-clip loop.

    Deterministic given (model state, schedule, cond, config): initial
    noise and fresh-noise draws come from named streams of ``config.seed``,
    and the sampler itself is noise-free.  Only the predecessor clip's
    trajectory is held at any time, so memory does not grow with
    ``num_clips``.
    """
    latent_shape = tuple(getattr(model, "latent_shape"))
    if latent_shape[0] != config.frames:
        raise ConfigError(
            f"model generates {latent_shape[0]}-frame clips but config.frames={config.frames}"
        )
    timesteps = inference_timesteps(schedule.num_steps, config.sampler.num_inference_steps)
    plan = guided_step_plan(config.frames, config.prompt_frames, config.beta, timesteps)
    needs_trajectory = config.num_clips > 1
    inner_sampler = config.sampler
    if needs_trajectory and not inner_sampler.record_trajectory:
        inner_sampler = dataclasses.replace(config.sampler, record_trajectory=True)

    clips: list[LatentClip] = []
    initial_noises: list[np.ndarray] = []
    prev_init: np.ndarray | None = None
    prev_traj: DenoisingTrajectory | None = None
    last_traj: DenoisingTrajectory | None = None
    for i in range(config.num_clips):
        if i == 0:
            init = stream(config.seed, "init", 0).standard_normal(
                size=latent_shape, dtype=np.float32
            )
            override = None
        else:
            assert prev_init is not None and prev_traj is not None
            reused = reverse_initial_noise(prev_init)
            init = blend_fresh_noise(
                reused, config.prompt_frames, config.alpha, stream(config.seed, "pns", i)
            )
            override = build_override(plan, prev_traj, timesteps)
        clip, traj = sample_clip(
            model,
            schedule,
            cond,
            init,
            inner_sampler,
            override=override,
            clip_index=i,
        )
        clips.append(clip)
        initial_noises.append(init)
        prev_init = init
        prev_traj = traj
        last_traj = traj
    trajectories = (
        [last_traj] if (config.sampler.record_trajectory and last_traj is not None) else []
    )
    return LongVideoResult(
        clips=clips,
        trajectories=trajectories,
        config=config,
        initial_noises=initial_noises,
    )
