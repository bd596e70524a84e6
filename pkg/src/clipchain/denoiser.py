"""Noise-prediction models and their training loop.

Two denoisers satisfy the same contract (``predict_noise(z_t, t, cond)``
returns a same-shaped estimate of the standard-normal noise inside ``z_t``):

* :class:`GaussianWorldDenoiser` is exact.  When every data element is
  drawn i.i.d. from N(mu, s^2), the pair (noise, noisy latent) is jointly
  Gaussian and the conditional expectation of the noise has a closed form:

      E[eps | z_t] = sigma_bar_t * (z_t - alpha_bar_t * mu)
                     / (alpha_bar_t^2 * s^2 + sigma_bar_t^2)

  It needs no training and serves as the ground truth the sampler and the
  trainable model are checked against.

* :class:`TinyVideoDenoiser` is a small trainable network over clips shaped
  [frames, channels, height, width].  Spatial layers treat frames as batch
  entries; two kinds of temporal layers mix information across frames: a
  temporal convolution (3-wide kernel along the frame axis, applied per
  pixel) and temporal attention (frames attend to each other per pixel,
  with a learned per-frame-index bias).  Every temporal layer ends in a
  zero-initialized projection and adds its input back, so a freshly built
  model computes exactly the purely spatial, frame-parallel function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import digest_groups, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .schedule import NoiseSchedule

TEMPORAL_KINDS = ("temp_conv", "temp_attn")


@dataclass(frozen=True, eq=False)
class Conditioning:
    """A resolved conditioning vector, or the explicit unconditional marker.

    ``null_flag=True`` selects the model's learned unconditional embedding;
    the ``embedding`` content is ignored in that case.
    """

    embedding: np.ndarray
    null_flag: bool = False

    def __post_init__(self) -> None:
        emb = np.asarray(self.embedding, dtype=np.float32)
        if emb.ndim != 1:
            raise ConfigError("conditioning embedding must be a 1-d vector")
        object.__setattr__(self, "embedding", emb)

    @classmethod
    def null(cls, dim: int) -> "Conditioning":
        return cls(embedding=np.zeros(dim, dtype=np.float32), null_flag=True)


@dataclass(frozen=True)
class GaussianWorld:
    """Synthetic data model: every latent element i.i.d. N(mu, s^2)."""

    mu: float = 0.0
    s: float = 1.0

    def __post_init__(self) -> None:
        if not self.s > 0.0:
            raise ConfigError("GaussianWorld needs s > 0")


@dataclass(frozen=True)
class TemporalLayerSpec:
    kind: str
    position: int

    def __post_init__(self) -> None:
        if self.kind not in TEMPORAL_KINDS:
            raise ConfigError(f"temporal layer kind must be one of {TEMPORAL_KINDS}")
        if self.position < 0:
            raise ConfigError("temporal layer position must be non-negative")


DEFAULT_TEMPORAL_LAYERS = (
    TemporalLayerSpec("temp_conv", 1),
    TemporalLayerSpec("temp_attn", 2),
)


@dataclass(frozen=True)
class DenoiserSpec:
    """Architecture description; fully determines the network shape.

    ``position`` of a temporal layer counts spatial stages applied before
    it: 0 = right after the input convolution, 1 = after the first residual
    block, 2 = after the second.  ``param_count`` is filled in by the model
    (0 means "not yet built").
    """

    latent_shape: tuple[int, int, int, int] = (8, 1, 32, 32)
    channels: int = 32
    cond_dim: int = 16
    vocab_size: int = 8
    temporal_layers: tuple[TemporalLayerSpec, ...] = DEFAULT_TEMPORAL_LAYERS
    param_count: int = 0

    def __post_init__(self) -> None:
        shape = tuple(int(v) for v in self.latent_shape)
        if len(shape) != 4 or any(v < 1 for v in shape):
            raise ConfigError(f"latent_shape must be 4 positive ints, got {self.latent_shape}")
        if self.channels < 4 or self.channels % 2:
            raise ConfigError("channels must be an even integer >= 4")
        if self.cond_dim < 1 or self.vocab_size < 1:
            raise ConfigError("cond_dim and vocab_size must be positive")
        layers = tuple(
            TemporalLayerSpec(**layer) if isinstance(layer, dict) else layer
            for layer in self.temporal_layers
        )
        for layer in layers:
            if layer.position > 2:
                raise ConfigError("temporal layer position must be 0, 1, or 2")
        object.__setattr__(self, "latent_shape", shape)
        object.__setattr__(self, "temporal_layers", layers)

    def describe(self) -> dict[str, Any]:
        return {
            "latent_shape": list(self.latent_shape),
            "channels": self.channels,
            "cond_dim": self.cond_dim,
            "vocab_size": self.vocab_size,
            "temporal_layers": [
                {"kind": layer.kind, "position": layer.position}
                for layer in self.temporal_layers
            ],
            "param_count": self.param_count,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "DenoiserSpec":
        return cls(
            latent_shape=tuple(doc["latent_shape"]),
            channels=int(doc["channels"]),
            cond_dim=int(doc["cond_dim"]),
            vocab_size=int(doc["vocab_size"]),
            temporal_layers=tuple(
                TemporalLayerSpec(str(d["kind"]), int(d["position"]))
                for d in doc["temporal_layers"]
            ),
            param_count=int(doc.get("param_count", 0)),
        )


class GaussianWorldDenoiser:
    """Closed-form optimal denoiser for :class:`GaussianWorld` data.

    Conditioning is accepted and ignored: the synthetic world is
    unconditional, so both guidance branches coincide by construction.
    """

    def __init__(
        self,
        world: GaussianWorld,
        schedule: NoiseSchedule,
        latent_shape: tuple[int, int, int, int] = (8, 1, 16, 16),
    ) -> None:
        self.world = world
        self.schedule = schedule
        self.latent_shape = tuple(int(v) for v in latent_shape)
        self.num_timesteps = schedule.num_steps
        self.cond_dim = 0

    def predict_noise(
        self, z_t: np.ndarray, t: int, cond: Conditioning | None = None
    ) -> np.ndarray:
        ab = float(self.schedule.alpha_bar[int(t)])
        sb = math.sqrt(1.0 - ab * ab)
        gain = sb / (ab * ab * self.world.s**2 + sb * sb)
        shift = gain * ab * self.world.mu
        return (float(gain) * z_t - float(shift)).astype(z_t.dtype, copy=False)


def bayes_expected_loss(world: GaussianWorld, schedule: NoiseSchedule) -> float:
    """Expected per-element squared error of the optimal denoiser.

    At timestep t the residual variance of the noise given the latent is
    ``alpha_bar^2 s^2 / (alpha_bar^2 s^2 + sigma_bar^2)``; averaging over
    the uniform timestep distribution gives the floor no trained model can
    beat in expectation.
    """
    ab2 = schedule.alpha_bar**2
    sb2 = 1.0 - ab2
    per_t = ab2 * world.s**2 / (ab2 * world.s**2 + sb2)
    return float(per_t.mean())


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    )
    args = t.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _ResBlock2d(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb_proj = nn.Linear(channels, channels)

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        y = self.conv1(torch.nn.functional.silu(h))
        y = y + self.emb_proj(emb)[:, :, None, None]
        y = self.conv2(torch.nn.functional.silu(y))
        return h + y


class _TempConvBlock(nn.Module):
    """Temporal convolution: a (3,1,1) kernel slides along the frame axis.

    The closing convolution starts at zero and the input is added back, so
    the block is exactly transparent until training moves it.
    """

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, (3, 1, 1), padding=(1, 0, 0))
        self.conv2 = nn.Conv3d(channels, channels, (3, 1, 1), padding=(1, 0, 0))
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, h: torch.Tensor, frames: int) -> torch.Tensor:
        bf, ch, height, width = h.shape
        b = bf // frames
        y = h.reshape(b, frames, ch, height, width).permute(0, 2, 1, 3, 4)
        y = self.conv2(torch.nn.functional.silu(self.conv1(y)))
        y = y.permute(0, 2, 1, 3, 4).reshape(bf, ch, height, width)
        return h + y


class _TempAttnBlock(nn.Module):
    """Per-pixel self-attention across frames with a learned index bias.

    The additive per-frame-index embedding breaks permutation symmetry
    (frame order matters once it is nonzero); the output projection starts
    at zero with a residual connection, so the block is transparent at
    initialization.
    """

    def __init__(self, channels: int, max_frames: int) -> None:
        super().__init__()
        self.pos = nn.Parameter(torch.randn(max_frames, channels) * 0.02)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.out = nn.Linear(channels, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.scale = channels**-0.5

    def forward(self, h: torch.Tensor, frames: int) -> torch.Tensor:
        bf, ch, height, width = h.shape
        b = bf // frames
        y = h.reshape(b, frames, ch, height, width)
        y = y.permute(0, 3, 4, 1, 2).reshape(b * height * width, frames, ch)
        y = y + self.pos[:frames][None, :, :]
        q, k, v = self.qkv(y).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        y = self.out(att @ v)
        y = y.reshape(b, height, width, frames, ch).permute(0, 3, 4, 1, 2)
        y = y.reshape(bf, ch, height, width)
        return h + y


class TinyVideoDenoiser(nn.Module):
    """Small conditional noise predictor over fixed-shape latent clips.

    Parameter groups:

    * ``spatial``: input/output convolutions and the two residual blocks
      (including their timestep-embedding projections).
    * ``temporal``: all temporal convolution / attention blocks.
    * ``conditioning``: the frozen label-embedding table, its projection,
      the unconditional embedding, and the timestep MLP.

    The label table is frozen at construction; it stands in for an external
    embedding provider whose weights the trainer never touches.
    """

    def __init__(self, spec: DenoiserSpec, num_timesteps: int, init_seed: int = 0) -> None:
        super().__init__()
        if num_timesteps < 2:
            raise ConfigError("num_timesteps must be >= 2")
        frames, in_ch, _, _ = spec.latent_shape
        ch = spec.channels
        self.num_timesteps = int(num_timesteps)
        self.init_seed = int(init_seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(init_seed)
            self.label_table = nn.Embedding(spec.vocab_size, spec.cond_dim)
            self.null_embedding = nn.Parameter(torch.zeros(spec.cond_dim))
            self.cond_proj = nn.Linear(spec.cond_dim, ch)
            self.time_mlp = nn.Sequential(nn.Linear(ch, ch), nn.SiLU(), nn.Linear(ch, ch))
            self.conv_in = nn.Conv2d(in_ch, ch, 3, padding=1)
            self.block1 = _ResBlock2d(ch)
            self.block2 = _ResBlock2d(ch)
            self.conv_out = nn.Conv2d(ch, in_ch, 3, padding=1)
            temporal = []
            for layer in spec.temporal_layers:
                if layer.kind == "temp_conv":
                    temporal.append(_TempConvBlock(ch))
                else:
                    temporal.append(_TempAttnBlock(ch, frames))
            self.temporal = nn.ModuleList(temporal)
        self.label_table.weight.requires_grad_(False)
        self._positions = tuple(layer.position for layer in spec.temporal_layers)
        count = sum(p.numel() for p in self.parameters())
        self.spec = DenoiserSpec(
            latent_shape=spec.latent_shape,
            channels=spec.channels,
            cond_dim=spec.cond_dim,
            vocab_size=spec.vocab_size,
            temporal_layers=spec.temporal_layers,
            param_count=count,
        )

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return self.spec.latent_shape

    @property
    def cond_dim(self) -> int:
        return self.spec.cond_dim

    def conditioning_for_label(self, label: int) -> Conditioning:
        if not 0 <= int(label) < self.spec.vocab_size:
            raise ConfigError(f"label {label} outside vocabulary of {self.spec.vocab_size}")
        vec = self.label_table.weight[int(label)].detach().numpy().astype(np.float32)
        return Conditioning(embedding=vec, null_flag=False)

    def param_groups(self) -> dict[str, list[str]]:
        temporal_names = [n for n, _ in self.named_parameters() if n.startswith("temporal.")]
        cond_names = [
            n
            for n, _ in self.named_parameters()
            if n.startswith(("label_table.", "cond_proj.", "time_mlp.")) or n == "null_embedding"
        ]
        spatial_names = [
            n
            for n, _ in self.named_parameters()
            if n not in set(temporal_names) | set(cond_names)
        ]
        return {"spatial": spatial_names, "temporal": temporal_names, "conditioning": cond_names}

    def apply_freeze(self, groups: Sequence[str]) -> None:
        """Mark whole parameter groups untrainable (by group name)."""
        known = self.param_groups()
        for group in groups:
            if group not in known:
                raise ConfigError(f"unknown parameter group {group!r}")
            for name in known[group]:
                self.get_parameter(name).requires_grad_(False)

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
        enable_temporal: bool = True,
    ) -> torch.Tensor:
        if z.ndim != 5:
            raise ConfigError(f"expected [B,F,C,H,W] input, got shape {tuple(z.shape)}")
        b, frames, in_ch, height, width = z.shape
        emb = self.time_mlp(_timestep_embedding(t, self.spec.channels)) + self.cond_proj(cond)
        embf = emb.repeat_interleave(frames, dim=0)
        h = self.conv_in(z.reshape(b * frames, in_ch, height, width))
        h = self._maybe_temporal(h, frames, 0, enable_temporal)
        h = self.block1(h, embf)
        h = self._maybe_temporal(h, frames, 1, enable_temporal)
        h = self.block2(h, embf)
        h = self._maybe_temporal(h, frames, 2, enable_temporal)
        out = self.conv_out(torch.nn.functional.silu(h))
        return out.reshape(b, frames, in_ch, height, width)

    def _maybe_temporal(
        self, h: torch.Tensor, frames: int, position: int, enabled: bool
    ) -> torch.Tensor:
        if not enabled:
            return h
        for layer, pos in zip(self.temporal, self._positions):
            if pos == position:
                h = layer(h, frames)
        return h

    def predict_noise(
        self,
        z_t: np.ndarray,
        t: int,
        cond: Conditioning | None = None,
        enable_temporal: bool = True,
    ) -> np.ndarray:
        """Single-clip inference: numpy in, numpy out, no gradients."""
        if cond is None:
            cond = Conditioning.null(self.spec.cond_dim)
        if cond.null_flag:
            cond_t = self.null_embedding.detach()[None, :]
        else:
            if cond.embedding.shape[0] != self.spec.cond_dim:
                raise ConfigError(
                    f"conditioning dim {cond.embedding.shape[0]} != model dim {self.spec.cond_dim}"
                )
            cond_t = torch.from_numpy(cond.embedding)[None, :]
        with torch.no_grad():
            z = torch.from_numpy(np.ascontiguousarray(z_t, dtype=np.float32))[None]
            t_t = torch.tensor([int(t)], dtype=torch.long)
            out = self.forward(z, t_t, cond_t, enable_temporal=enable_temporal)
        return out[0].numpy()


def predict_noise(
    model: Any, z_t: np.ndarray, t: int, cond: Conditioning | None = None
) -> np.ndarray:
    """Contract wrapper: validate shapes and the timestep, then delegate."""
    z_t = np.asarray(z_t)
    expected = tuple(getattr(model, "latent_shape", z_t.shape))
    if tuple(z_t.shape) != expected:
        raise ConfigError(f"latent shape {z_t.shape} does not match model shape {expected}")
    steps = int(getattr(model, "num_timesteps"))
    if not 0 <= int(t) < steps:
        raise ConfigError(f"timestep {t} outside [0, {steps})")
    return model.predict_noise(z_t, int(t), cond)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 4
    lr: float = 2e-3
    p_uncond: float = 0.1
    freeze: tuple[str, ...] = ()
    checkpoint_path: str | None = None

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError("p_uncond must lie in [0, 1]")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")

    def describe(self) -> dict[str, Any]:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "p_uncond": self.p_uncond,
            "freeze": list(self.freeze),
        }


@dataclass
class TrainResult:
    loss_curve: list[float]
    checkpoint_path: str | None = None


def _batch_loss(
    model: TinyVideoDenoiser,
    clips: np.ndarray,
    labels: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    p_uncond: float,
) -> torch.Tensor:
    """Denoising objective on one batch: MSE between injected and predicted noise.

    Timesteps are uniform over the schedule, targets are standard normal,
    and each item's conditioning is dropped (replaced by the unconditional
    embedding) with probability ``p_uncond``.
    """
    if clips.ndim != 5:
        raise ConfigError(f"batch must be [B,F,C,H,W], got shape {clips.shape}")
    if clips.shape[0] == 0:
        raise ConfigError("empty batch")
    batch = clips.shape[0]
    t = rng.integers(0, schedule.num_steps, size=batch)
    noise = rng.standard_normal(size=clips.shape, dtype=np.float32)
    ab = schedule.alpha_bar[t].astype(np.float32)[:, None, None, None, None]
    sb = np.sqrt(1.0 - schedule.alpha_bar[t] ** 2).astype(np.float32)[:, None, None, None, None]
    z_t = ab * clips.astype(np.float32) + sb * noise
    drop = rng.random(size=batch) < p_uncond

    z = torch.from_numpy(z_t)
    t_t = torch.from_numpy(t.astype(np.int64))
    labels_t = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    table = model.label_table(labels_t)
    null = model.null_embedding[None, :].expand(batch, -1)
    cond = torch.where(torch.from_numpy(drop)[:, None], null, table)
    pred = model(z, t_t, cond)
    target = torch.from_numpy(noise)
    return torch.mean((pred - target) ** 2)


def training_loss(
    model: TinyVideoDenoiser,
    clips: np.ndarray,
    labels: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    p_uncond: float = 0.1,
) -> float:
    """Evaluate one batch's loss without touching gradients or parameters."""
    with torch.no_grad():
        return float(_batch_loss(model, clips, labels, schedule, rng, p_uncond))


def train(
    model: TinyVideoDenoiser,
    dataset: Any,
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: np.random.Generator,
) -> TrainResult:
    """Run the denoising-objective training loop.

    ``dataset`` must expose ``clips`` [n,F,C,H,W] float32 and ``labels``
    [n] int.  The loop is fully driven by ``rng``; a fresh generator with
    the same state reproduces the loss curve bitwise.
    """
    clips = np.asarray(dataset.clips)
    labels = np.asarray(dataset.labels)
    if clips.ndim != 5:
        raise DataError(f"dataset clips must be [n,F,C,H,W], got shape {clips.shape}")
    if clips.shape[0] == 0:
        raise DataError("dataset is empty")
    if tuple(clips.shape[1:]) != model.latent_shape:
        raise DataError(
            f"dataset clip shape {clips.shape[1:]} does not match model shape {model.latent_shape}"
        )
    if config.freeze:
        model.apply_freeze(config.freeze)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=config.lr)
    curve: list[float] = []
    for step in range(config.steps):
        idx = rng.integers(0, clips.shape[0], size=config.batch_size)
        loss = _batch_loss(model, clips[idx], labels[idx], schedule, rng, config.p_uncond)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericError(f"non-finite training loss at step {step}: {value}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        curve.append(value)
    path = config.checkpoint_path
    if path is not None:
        save_denoiser(path, model, schedule, train_config=config.describe())
    return TrainResult(loss_curve=curve, checkpoint_path=path)


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().numpy().copy() for name, tensor in model.state_dict().items()}


def save_denoiser(
    path: str,
    model: TinyVideoDenoiser,
    schedule: NoiseSchedule,
    train_config: dict[str, Any] | None = None,
) -> None:
    from .manifest import digest_json

    meta = {
        "spec": model.spec.describe(),
        "num_timesteps": model.num_timesteps,
        "init_seed": model.init_seed,
        "schedule": schedule.describe(),
        "train_config_hash": digest_json(train_config) if train_config is not None else None,
        "groups": model.param_groups(),
    }
    save_checkpoint(path, "denoiser", meta, state_arrays(model))


def load_denoiser(path: str) -> tuple[TinyVideoDenoiser, dict[str, Any]]:
    kind, meta, params = load_checkpoint(path)
    if kind != "denoiser":
        raise DataError(f"{path} holds a {kind!r} checkpoint, expected a denoiser")
    spec = DenoiserSpec.from_dict(meta["spec"])
    model = TinyVideoDenoiser(spec, meta["num_timesteps"], init_seed=meta.get("init_seed", 0))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in params.items()}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise DataError(f"{path} misses parameters: {sorted(missing)[:3]}")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise DataError(f"{path} state does not fit the declared architecture: {exc}") from exc
    return model, meta


def denoiser_group_digests(model: TinyVideoDenoiser) -> dict[str, str]:
    return digest_groups(state_arrays(model), model.param_groups())
