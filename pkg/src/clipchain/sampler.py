"""Deterministic reverse-process sampler with guidance and trajectories.

The sampler visits a decreasing subsequence of schedule timesteps (uniform
stride, inclusive endpoints: ``round(linspace(T - 1, 0, K))``).  At each
visited timestep it predicts noise, optionally mixes conditional and
unconditional predictions, applies the deterministic update

    x0_hat   = (z_t - sigma_bar_t * eps_hat) / alpha_bar_t
    z_{t'}   = alpha_bar_{t'} * x0_hat + sigma_bar_{t'} * eps_hat

and, for frames named by the override, throws the updated value away and
stores the injected latent instead.  The final transition targets the
terminal state (alpha_bar = 1, sigma_bar = 0), so the chain ends at x0_hat.

Everything here is a pure function of its inputs; rerunning with identical
arguments is bitwise identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

import json

from .clips import LatentClip
from .denoiser import Conditioning
from .errors import ConfigError, NumericError
from .manifest import canonical_json, digest_json
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class SamplerConfig:
    num_inference_steps: int = 50
    guidance_scale: float = 10.0
    eta: float = 0.0
    record_trajectory: bool = True
    signal_range: float | None = None

    def __post_init__(self) -> None:
        if self.num_inference_steps < 1:
            raise ConfigError("num_inference_steps must be >= 1")
        if self.guidance_scale < 0.0:
            raise ConfigError("guidance_scale must be >= 0")
        if self.eta != 0.0:
            raise ConfigError("stochastic sampling (eta != 0) is not supported")
        if self.signal_range is not None:
            if not np.isfinite(self.signal_range) or self.signal_range <= 0.0:
                raise ConfigError("signal_range must be a finite positive number")

    def describe(self) -> dict[str, Any]:
        return {
            "num_inference_steps": self.num_inference_steps,
            "guidance_scale": self.guidance_scale,
            "eta": self.eta,
            "record_trajectory": self.record_trajectory,
            "signal_range": self.signal_range,
        }


@dataclass(eq=False)
class DenoisingTrajectory:
    """Per-step latent lattice of one clip's reverse process.

    ``steps[t]`` holds the [N,C,H,W] latents as they stood at visited
    timestep ``t`` (before the update that consumes them); ``final`` holds
    the clean output after the terminal transition.  ``timesteps`` is the
    visited subsequence in strictly decreasing order.
    """

    clip_index: int
    timesteps: tuple[int, ...]
    steps: dict[int, np.ndarray] = field(default_factory=dict)
    final: np.ndarray | None = None
    config_hash: str = ""

    def at(self, t: int) -> np.ndarray:
        if t not in self.steps:
            raise ConfigError(f"timestep {t} was not visited by this trajectory")
        return self.steps[t]

    def validate(self) -> None:
        if list(self.timesteps) != sorted(self.timesteps, reverse=True):
            raise ConfigError("trajectory timesteps must strictly decrease")
        if len(set(self.timesteps)) != len(self.timesteps):
            raise ConfigError("trajectory timesteps must be unique")
        shapes = {arr.shape for arr in self.steps.values()}
        if self.final is not None:
            shapes.add(self.final.shape)
        if len(shapes) > 1:
            raise ConfigError(f"trajectory entries disagree on shape: {shapes}")


def inference_timesteps(num_schedule_steps: int, num_inference_steps: int) -> np.ndarray:
    """The visited subsequence: uniform stride over [T - 1, 0], inclusive."""
    if num_inference_steps < 1:
        raise ConfigError("num_inference_steps must be >= 1")
    if num_inference_steps > num_schedule_steps:
        raise ConfigError(
            f"cannot take {num_inference_steps} inference steps on a "
            f"{num_schedule_steps}-step schedule"
        )
    if num_inference_steps == 1:
        return np.array([num_schedule_steps - 1], dtype=np.int64)
    ts = np.round(np.linspace(num_schedule_steps - 1, 0, num_inference_steps)).astype(np.int64)
    if not np.all(np.diff(ts) < 0):
        raise ConfigError("inference timesteps failed to decrease strictly")
    return ts


def guided_noise(eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free mix: ``eps_uncond + w * (eps_cond - eps_uncond)``.

    ``w = 1`` returns the conditional branch and ``w = 0`` the unconditional
    branch exactly (identity fast paths, no arithmetic rounding).
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ConfigError(
            f"guidance branches disagree on shape: {eps_uncond.shape} vs {eps_cond.shape}"
        )
    if w == 1.0:
        return eps_cond.copy()
    if w == 0.0:
        return eps_uncond.copy()
    w = float(w)
    return eps_uncond + w * (eps_cond - eps_uncond)


def ddim_step(
    schedule: NoiseSchedule,
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int | None,
    signal_range: float | None = None,
) -> np.ndarray:
    """One deterministic update from timestep ``t`` down to ``t_prev``.

    ``t_prev=None`` means the terminal state: the update returns the clean
    estimate ``x0_hat`` itself.  When ``signal_range`` is set, ``x0_hat`` is
    clamped to ``[-signal_range, signal_range]`` before recombination; weak
    denoisers otherwise blow the clean estimate far outside the data range
    at early (high-noise) timesteps, where the update divides by a tiny
    ``alpha_bar``.
    """
    if z_t.shape != eps_hat.shape:
        raise ConfigError(f"noise estimate shape {eps_hat.shape} != latent shape {z_t.shape}")
    t = int(t)
    if not 0 <= t < schedule.num_steps:
        raise ConfigError(f"timestep {t} outside [0, {schedule.num_steps})")
    if t_prev is not None and not 0 <= int(t_prev) < t:
        raise ConfigError(f"t_prev={t_prev} must satisfy 0 <= t_prev < t={t}")
    ab_t = float(schedule.alpha_bar[t])
    sb_t = float(np.sqrt(1.0 - ab_t * ab_t))
    x0_hat = (z_t - sb_t * eps_hat) / ab_t
    if signal_range is not None:
        x0_hat = np.clip(x0_hat, -float(signal_range), float(signal_range))
    if t_prev is None:
        out = x0_hat
    else:
        ab_p = float(schedule.alpha_bar[int(t_prev)])
        sb_p = float(np.sqrt(1.0 - ab_p * ab_p))
        out = ab_p * x0_hat + sb_p * eps_hat
    return out.astype(z_t.dtype, copy=False)


OverrideMap = Mapping[tuple[int, int], np.ndarray]


def _check_override(
    override: OverrideMap,
    timesteps: np.ndarray,
    frames: int,
    frame_shape: tuple[int, ...],
) -> None:
    visited = set(int(t) for t in timesteps)
    for (t, j), value in override.items():
        if int(t) not in visited:
            raise ConfigError(f"override names timestep {t} outside the inference subsequence")
        if not 0 <= int(j) < frames:
            raise ConfigError(f"override names frame {j} outside [0, {frames})")
        if tuple(value.shape) != tuple(frame_shape):
            raise ConfigError(
                f"override latent for (t={t}, j={j}) has shape {value.shape}, "
                f"expected {tuple(frame_shape)}"
            )


def sample_clip(
    model: Any,
    schedule: NoiseSchedule,
    cond: Conditioning | None,
    initial_noise: np.ndarray,
    config: SamplerConfig,
    override: OverrideMap | None = None,
    clip_index: int = 0,
) -> tuple[LatentClip, DenoisingTrajectory | None]:
    """Denoise one clip from its initial noise.

    ``override[(t, j)]`` replaces frame ``j``'s result of the update that
    consumes the latent at visited timestep ``t`` (the replacement lands in
    the next stored lattice entry, instead of the computed update).  The
    unconditional branch is evaluated only when the guidance scale is not
    exactly 1.
    """
    z = np.asarray(initial_noise, dtype=np.float32)
    if z.ndim != 4:
        raise ConfigError(f"initial noise must be [N,C,H,W], got shape {z.shape}")
    timesteps = inference_timesteps(schedule.num_steps, config.num_inference_steps)
    frames = z.shape[0]
    if override:
        _check_override(override, timesteps, frames, z.shape[1:])
    w = float(config.guidance_scale)
    null_cond = Conditioning.null(int(getattr(model, "cond_dim", 0) or 1))
    if cond is None:
        cond = null_cond

    config_hash = digest_json(
        {"sampler": config.describe(), "schedule": schedule.describe(), "clip": clip_index}
    )
    traj: DenoisingTrajectory | None = None
    if config.record_trajectory:
        traj = DenoisingTrajectory(
            clip_index=clip_index,
            timesteps=tuple(int(t) for t in timesteps),
            config_hash=config_hash,
        )
    z = z.copy()
    for k, t in enumerate(timesteps):
        t = int(t)
        if traj is not None:
            traj.steps[t] = z.copy()
        eps_cond = model.predict_noise(z, t, cond)
        if w == 1.0:
            eps_hat = eps_cond
        else:
            eps_uncond = model.predict_noise(z, t, null_cond)
            eps_hat = guided_noise(eps_uncond, eps_cond, w)
        t_prev = int(timesteps[k + 1]) if k + 1 < len(timesteps) else None
        z = ddim_step(schedule, z, eps_hat, t, t_prev, signal_range=config.signal_range)
        if override:
            for j in range(frames):
                injected = override.get((t, j))
                if injected is not None:
                    z[j] = injected.astype(np.float32, copy=False)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite latent after the update at timestep {t}")
    if traj is not None:
        traj.final = z.copy()
        traj.validate()
    return LatentClip(clip_index=clip_index, latents=z), traj


def save_trajectory(path: str, traj: DenoisingTrajectory) -> None:
    """Persist a trajectory as npz: one array per visited timestep plus meta."""
    arrays: dict[str, np.ndarray] = {
        f"step/{t}": arr for t, arr in traj.steps.items()
    }
    if traj.final is not None:
        arrays["final"] = traj.final
    arrays["timesteps"] = np.asarray(traj.timesteps, dtype=np.int64)
    meta = {
        "layout_version": 1,
        "clip_index": traj.clip_index,
        "config_hash": traj.config_hash,
    }
    arrays["__meta__"] = np.frombuffer(canonical_json(meta).encode("ascii"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_trajectory(path: str) -> DenoisingTrajectory:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode("ascii"))
        timesteps = tuple(int(t) for t in data["timesteps"])
        steps = {
            int(key.split("/", 1)[1]): data[key]
            for key in data.files
            if key.startswith("step/")
        }
        final = data["final"] if "final" in data.files else None
    traj = DenoisingTrajectory(
        clip_index=int(meta["clip_index"]),
        timesteps=timesteps,
        steps=steps,
        final=final,
        config_hash=str(meta["config_hash"]),
    )
    traj.validate()
    return traj
