"""Latent clip container shared across the sampling and training stack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True, eq=False)
class LatentClip:
    """One clip's latent tensor, frames x channels x height x width."""

    clip_index: int
    latents: np.ndarray

    def __post_init__(self) -> None:
        lat = np.asarray(self.latents)
        if lat.ndim != 4:
            raise ConfigError(f"latents must be 4-d [F,C,H,W], got shape {lat.shape}")
        if self.clip_index < 0:
            raise ConfigError("clip_index must be non-negative")
        if lat.dtype != np.float32:
            lat = lat.astype(np.float32)
        object.__setattr__(self, "latents", lat)

    @property
    def frames(self) -> int:
        return int(self.latents.shape[0])

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.latents.shape)  # type: ignore[return-value]
