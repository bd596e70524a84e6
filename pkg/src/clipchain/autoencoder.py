"""Tiny pixel/latent autoencoder with a temporally aware decoder.

The encoder is strictly per-frame (frames ride along in the batch axis).
The decoder carries optional temporal-convolution blocks between its
upsampling stages; each ends in a zero-initialized projection with a
residual connection, so a freshly built or merely pretrained model decodes
exactly like a per-frame decoder.  Fine-tuning freezes everything except
those temporal blocks and optimizes

    a_rec * reconstruction MSE
  + a_reg * mean squared latent magnitude
  + a_disc * non-saturating adversarial loss from a patch discriminator

with one discriminator update per generator update.  Latent jitter
(independent per-frame noise added to the encoded latents) simulates the
frame-to-frame latent inconsistency the temporal blocks exist to absorb;
without it the per-frame decoder is already optimal and fine-tuning would
have nothing to learn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np
import torch
from torch import nn

from .checkpoint import digest_groups, load_checkpoint, save_checkpoint
from .denoiser import _TempConvBlock, state_arrays
from .errors import ConfigError, DataError, NumericError

DOWNSAMPLE_FACTOR = 4


@dataclass(frozen=True)
class TemporalDecoderLayer:
    """One temporal block in the decoder.

    ``position`` counts decoder stages before the block: 0 = after the
    latent projection, 1 = after the first upsample, 2 = after the second.
    """

    position: int
    zero_init: bool = True

    def __post_init__(self) -> None:
        if self.position not in (0, 1, 2):
            raise ConfigError("temporal decoder position must be 0, 1, or 2")


@dataclass(frozen=True)
class AutoencoderSpec:
    latent_channels: int = 4
    base_channels: int = 16
    temporal_layers: tuple[TemporalDecoderLayer, ...] = (TemporalDecoderLayer(1),)

    def __post_init__(self) -> None:
        if self.latent_channels < 1 or self.base_channels < 4:
            raise ConfigError("latent_channels >= 1 and base_channels >= 4 required")
        layers = tuple(
            TemporalDecoderLayer(**layer) if isinstance(layer, dict) else layer
            for layer in self.temporal_layers
        )
        object.__setattr__(self, "temporal_layers", layers)

    @property
    def downsample_factor(self) -> int:
        return DOWNSAMPLE_FACTOR

    def describe(self) -> dict[str, Any]:
        return {
            "latent_channels": self.latent_channels,
            "base_channels": self.base_channels,
            "downsample_factor": self.downsample_factor,
            "temporal_layers": [
                {"position": layer.position, "zero_init": layer.zero_init}
                for layer in self.temporal_layers
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "AutoencoderSpec":
        return cls(
            latent_channels=int(doc["latent_channels"]),
            base_channels=int(doc["base_channels"]),
            temporal_layers=tuple(
                TemporalDecoderLayer(int(d["position"]), bool(d["zero_init"]))
                for d in doc["temporal_layers"]
            ),
        )


class TinyAutoencoder(nn.Module):
    """Factor-4 spatial autoencoder over [F, 3, H, W] clips in [0, 1]."""

    def __init__(self, spec: AutoencoderSpec, init_seed: int = 0) -> None:
        super().__init__()
        ch = spec.base_channels
        cz = spec.latent_channels
        self.spec = spec
        self.init_seed = int(init_seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(init_seed)
            self.enc_in = nn.Conv2d(3, ch, 3, padding=1)
            self.enc_down1 = nn.Conv2d(ch, ch, 4, stride=2, padding=1)
            self.enc_down2 = nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1)
            self.enc_out = nn.Conv2d(2 * ch, cz, 3, padding=1)
            self.dec_in = nn.Conv2d(cz, 2 * ch, 3, padding=1)
            self.dec_up1 = nn.ConvTranspose2d(2 * ch, ch, 4, stride=2, padding=1)
            self.dec_up2 = nn.ConvTranspose2d(ch, ch, 4, stride=2, padding=1)
            self.dec_out = nn.Conv2d(ch, 3, 3, padding=1)
            stage_channels = {0: 2 * ch, 1: ch, 2: ch}
            blocks = []
            for layer in spec.temporal_layers:
                block = _TempConvBlock(stage_channels[layer.position])
                if not layer.zero_init:
                    # Re-randomize the closing conv the block zeroed.
                    nn.init.kaiming_uniform_(block.conv2.weight, a=math.sqrt(5))
                    nn.init.zeros_(block.conv2.bias)
                blocks.append(block)
            self.temporal = nn.ModuleList(blocks)
        self._positions = tuple(layer.position for layer in spec.temporal_layers)

    def param_groups(self) -> dict[str, list[str]]:
        encoder = [n for n, _ in self.named_parameters() if n.startswith("enc_")]
        temporal = [n for n, _ in self.named_parameters() if n.startswith("temporal.")]
        decoder = [n for n, _ in self.named_parameters() if n.startswith("dec_")]
        return {"encoder": encoder, "decoder_spatial": decoder, "decoder_temporal": temporal}

    def _encode_t(self, frames_t: torch.Tensor) -> torch.Tensor:
        h = torch.nn.functional.silu(self.enc_in(frames_t))
        h = torch.nn.functional.silu(self.enc_down1(h))
        h = torch.nn.functional.silu(self.enc_down2(h))
        return self.enc_out(h)

    def _decode_t(self, latents_t: torch.Tensor, frames: int, enable_temporal: bool) -> torch.Tensor:
        h = self.dec_in(latents_t)
        h = self._maybe_temporal(h, frames, 0, enable_temporal)
        h = torch.nn.functional.silu(h)
        h = self.dec_up1(h)
        h = self._maybe_temporal(h, frames, 1, enable_temporal)
        h = torch.nn.functional.silu(h)
        h = self.dec_up2(h)
        h = self._maybe_temporal(h, frames, 2, enable_temporal)
        h = torch.nn.functional.silu(h)
        return self.dec_out(h)

    def _maybe_temporal(
        self, h: torch.Tensor, frames: int, position: int, enabled: bool
    ) -> torch.Tensor:
        if not enabled:
            return h
        for block, pos in zip(self.temporal, self._positions):
            if pos == position:
                h = block(h, frames)
        return h

    def encode(self, video: np.ndarray) -> np.ndarray:
        """Per-frame encoding of a [F,3,H,W] clip; no temporal mixing exists
        on this path, so frame-by-frame and whole-clip calls agree bitwise.

        Frames go through the network one at a time: batched convolution may
        pick a different kernel than the single-image case, which would break
        the exact frame-by-frame equivalence this contract promises.
        """
        video = np.asarray(video, dtype=np.float32)
        if video.ndim != 4 or video.shape[1] != 3:
            raise ConfigError(f"expected [F,3,H,W] pixels, got shape {video.shape}")
        if video.shape[2] % DOWNSAMPLE_FACTOR or video.shape[3] % DOWNSAMPLE_FACTOR:
            raise ConfigError(
                f"spatial dims {video.shape[2:]} must be divisible by {DOWNSAMPLE_FACTOR}"
            )
        with torch.no_grad():
            frames = [
                self._encode_t(torch.from_numpy(video[k : k + 1])).numpy()[0]
                for k in range(video.shape[0])
            ]
        return np.stack(frames)

    def decode(self, latents: np.ndarray, enable_temporal: bool = True) -> np.ndarray:
        latents = np.asarray(latents, dtype=np.float32)
        if latents.ndim != 4 or latents.shape[1] != self.spec.latent_channels:
            raise ConfigError(
                f"expected [F,{self.spec.latent_channels},h,w] latents, got shape {latents.shape}"
            )
        with torch.no_grad():
            return self._decode_t(
                torch.from_numpy(latents), latents.shape[0], enable_temporal
            ).numpy()

    @property
    def latent_channels(self) -> int:
        return self.spec.latent_channels


class PatchDiscriminator(nn.Module):
    """Three-layer convolutional patch critic over single frames."""

    def __init__(self, base_channels: int = 16, init_seed: int = 0) -> None:
        super().__init__()
        ch = base_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(init_seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, ch, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(ch, 2 * ch, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(2 * ch, 1, 4, stride=1, padding=1),
            )

    def forward(self, frames_t: torch.Tensor) -> torch.Tensor:
        return self.net(frames_t)


@dataclass(frozen=True)
class FinetuneLossWeights:
    a_rec: float = 1.0
    a_reg: float = 1e-5
    a_disc: float = 0.5

    def __post_init__(self) -> None:
        if self.a_rec < 0 or self.a_reg < 0 or self.a_disc < 0:
            raise ConfigError("loss weights must be >= 0")

    def describe(self) -> dict[str, float]:
        return {"a_rec": self.a_rec, "a_reg": self.a_reg, "a_disc": self.a_disc}


@dataclass(frozen=True)
class AETrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 2e-3
    disc_lr: float = 2e-3
    latent_noise_std: float = 0.0
    a_reg: float = 1e-5

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.disc_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.latent_noise_std < 0:
            raise ConfigError("latent_noise_std must be >= 0")

    def describe(self) -> dict[str, Any]:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "disc_lr": self.disc_lr,
            "latent_noise_std": self.latent_noise_std,
            "a_reg": self.a_reg,
        }


def _check_pixel_dataset(dataset: Any) -> np.ndarray:
    clips = np.asarray(dataset.clips, dtype=np.float32)
    if clips.ndim != 5 or clips.shape[2] != 3:
        raise DataError(f"autoencoder training needs [n,F,3,H,W] pixel clips, got {clips.shape}")
    if getattr(dataset, "space", "pixel") != "pixel":
        raise DataError("autoencoder training needs pixel-space clips")
    if clips.shape[3] % DOWNSAMPLE_FACTOR or clips.shape[4] % DOWNSAMPLE_FACTOR:
        raise DataError(
            f"clip spatial dims {clips.shape[3:]} must be divisible by {DOWNSAMPLE_FACTOR}"
        )
    return clips


def pretrain_autoencoder(
    ae: TinyAutoencoder,
    dataset: Any,
    config: AETrainConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Plain per-frame reconstruction training (encoder + spatial decoder).

    Temporal blocks stay out of both the forward path and the optimizer, so
    they remain exactly zero-initialized afterwards.
    """
    clips = _check_pixel_dataset(dataset)
    pool = clips.reshape(-1, *clips.shape[2:])
    names = ae.param_groups()
    trainable = [
        ae.get_parameter(n) for n in names["encoder"] + names["decoder_spatial"]
    ]
    optimizer = torch.optim.Adam(trainable, lr=config.lr)
    curve: list[float] = []
    for step in range(config.steps):
        idx = rng.integers(0, pool.shape[0], size=config.batch_size)
        x = torch.from_numpy(pool[idx])
        z = ae._encode_t(x)
        recon = ae._decode_t(z, frames=x.shape[0], enable_temporal=False)
        loss = torch.mean((recon - x) ** 2) + config.a_reg * torch.mean(z**2)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericError(f"non-finite pretraining loss at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curve.append(value)
    return curve


def finetune_decoder(
    ae: TinyAutoencoder,
    dataset: Any,
    weights: FinetuneLossWeights,
    discriminator: PatchDiscriminator,
    config: AETrainConfig,
    rng: np.random.Generator,
) -> dict[str, list[float]]:
    """Adversarial fine-tuning of the decoder's temporal blocks only.

    Everything except the temporal blocks is frozen; a parameter-digest
    check afterwards proves it (see ``autoencoder_group_digests``).  Per
    step: one generator update on the weighted three-term loss, then one
    discriminator update on real vs reconstructed frames.
    """
    clips = _check_pixel_dataset(dataset)
    groups = ae.param_groups()
    if not groups["decoder_temporal"]:
        raise ConfigError("autoencoder has no temporal blocks to fine-tune")
    for name in groups["encoder"] + groups["decoder_spatial"]:
        ae.get_parameter(name).requires_grad_(False)
    trainable = [ae.get_parameter(n) for n in groups["decoder_temporal"]]
    opt_g = torch.optim.Adam(trainable, lr=config.lr)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.disc_lr)
    frames = clips.shape[1]
    curves: dict[str, list[float]] = {
        "total": [], "rec": [], "reg": [], "disc_g": [], "disc_d": []
    }
    softplus = torch.nn.functional.softplus
    for step in range(config.steps):
        idx = rng.integers(0, clips.shape[0], size=config.batch_size)
        batch = clips[idx]
        x = torch.from_numpy(batch.reshape(-1, *batch.shape[2:]))
        with torch.no_grad():
            z = ae._encode_t(x)
        if config.latent_noise_std > 0.0:
            jitter = rng.standard_normal(size=tuple(z.shape), dtype=np.float32)
            z = z + float(config.latent_noise_std) * torch.from_numpy(jitter)
        recon = ae._decode_t(z, frames=frames, enable_temporal=True)
        rec_loss = torch.mean((recon - x) ** 2)
        reg_loss = torch.mean(z**2)
        if weights.a_disc > 0.0:
            disc_g_loss = softplus(-discriminator(recon)).mean()
        else:
            disc_g_loss = torch.zeros(())
        total = weights.a_rec * rec_loss + weights.a_reg * reg_loss + weights.a_disc * disc_g_loss
        value = float(total.detach())
        if not math.isfinite(value):
            raise NumericError(f"non-finite fine-tuning loss at step {step}")
        opt_g.zero_grad()
        total.backward()
        opt_g.step()

        if weights.a_disc > 0.0:
            d_loss = softplus(-discriminator(x)).mean() + softplus(
                discriminator(recon.detach())
            ).mean()
            if not math.isfinite(float(d_loss.detach())):
                raise NumericError(f"non-finite discriminator loss at step {step}")
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            curves["disc_d"].append(float(d_loss.detach()))
        else:
            curves["disc_d"].append(0.0)
        curves["total"].append(value)
        curves["rec"].append(float(rec_loss.detach()))
        curves["reg"].append(float(reg_loss.detach()))
        curves["disc_g"].append(float(disc_g_loss.detach()))
    return curves


def autoencoder_group_digests(ae: TinyAutoencoder) -> dict[str, str]:
    return digest_groups(state_arrays(ae), ae.param_groups())


def save_autoencoder(path: str, ae: TinyAutoencoder, extra_meta: dict[str, Any] | None = None) -> None:
    meta = {
        "spec": ae.spec.describe(),
        "init_seed": ae.init_seed,
        "groups": ae.param_groups(),
        "group_digests": autoencoder_group_digests(ae),
    }
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, "autoencoder", meta, state_arrays(ae))


def load_autoencoder(path: str) -> tuple[TinyAutoencoder, dict[str, Any]]:
    kind, meta, params = load_checkpoint(path)
    if kind != "autoencoder":
        raise DataError(f"{path} holds a {kind!r} checkpoint, expected an autoencoder")
    spec = AutoencoderSpec.from_dict(meta["spec"])
    ae = TinyAutoencoder(spec, init_seed=meta.get("init_seed", 0))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in params.items()}
    try:
        ae.load_state_dict(state)
    except RuntimeError as exc:
        raise DataError(f"{path} state does not fit the declared architecture: {exc}") from exc
    return ae, meta
