"""Clip-by-clip latent video generation with noise reuse across clip boundaries."""

from .autoencoder import (
    AutoencoderSpec,
    FinetuneLossWeights,
    TinyAutoencoder,
    finetune_decoder,
    pretrain_autoencoder,
)
from .denoiser import (
    Conditioning,
    DenoiserSpec,
    GaussianWorldDenoiser,
    TinyVideoDenoiser,
    TrainConfig,
    train,
)
from .errors import (
    ClipchainError,
    ConfigError,
    DataError,
    NumericError,
    TransportError,
)
from .longvideo import (
    LongVideoConfig,
    LongVideoResult,
    blend_fresh_noise,
    generate_long_video,
    guided_step_plan,
    reverse_initial_noise,
)
from .metrics import boundary_consistency, cycling_score, smoothness
from .sampler import (
    DenoisingTrajectory,
    SamplerConfig,
    ddim_step,
    guided_noise,
    inference_timesteps,
    sample_clip,
)
from .schedule import NoiseSchedule, build_schedule, q_sample, q_step

__version__ = "0.1.0"

__all__ = [
    "AutoencoderSpec",
    "ClipchainError",
    "Conditioning",
    "ConfigError",
    "DataError",
    "DenoiserSpec",
    "DenoisingTrajectory",
    "FinetuneLossWeights",
    "GaussianWorldDenoiser",
    "LongVideoConfig",
    "LongVideoResult",
    "NoiseSchedule",
    "NumericError",
    "SamplerConfig",
    "TinyAutoencoder",
    "TinyVideoDenoiser",
    "TrainConfig",
    "TransportError",
    "blend_fresh_noise",
    "boundary_consistency",
    "build_schedule",
    "cycling_score",
    "ddim_step",
    "finetune_decoder",
    "generate_long_video",
    "guided_noise",
    "guided_step_plan",
    "inference_timesteps",
    "pretrain_autoencoder",
    "q_sample",
    "q_step",
    "reverse_initial_noise",
    "sample_clip",
    "smoothness",
    "train",
    "__version__",
]
