"""Encoder/decoder architecture and the content/speaker decomposition.

The encoder maps feature frames to a continuous latent sequence. The
quantized latents form the content path; the time-averaged residual
between the continuous latents and their (detached) codebook entries is
the speaker embedding. The decoder reconstructs features from content
plus a speaker embedding broadcast over time, so feeding it content from
one utterance and the residual from another performs conversion.

Gradient routing is deliberate and asymmetric:

* content uses the straight-through form, so the reconstruction loss
  reaches the encoder but not the codebook;
* the speaker residual detaches the quantized side, so it trains the
  encoder only;
* the latent-commitment loss is the sole term that moves codebook entries.

Everything runs in float64.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .vq import init_codebook, quantize, straight_through


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters."""

    n_mels: int = 80
    latent_dim: int = 64
    codebook_size: int = 512
    encoder_width: int = 256
    encoder_depth: int = 2
    decoder_width: int = 256
    decoder_depth: int = 2
    kernel_size: int = 5
    seed: int = 0

    def __post_init__(self):
        dims = (
            self.n_mels, self.latent_dim, self.codebook_size,
            self.encoder_width, self.decoder_width,
        )
        if min(dims) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            raise ConfigError("encoder_depth and decoder_depth must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd so convolutions preserve length")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """The full-size configuration (about 5.7M parameters)."""
        base = dict(
            n_mels=80, latent_dim=64, codebook_size=512,
            encoder_width=512, encoder_depth=3,
            decoder_width=512, decoder_depth=3, kernel_size=5,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _conv_stack(c_in: int, width: int, depth: int, c_out: int, kernel: int) -> nn.Sequential:
    pad = kernel // 2
    layers: list[nn.Module] = [nn.Conv1d(c_in, width, kernel, padding=pad), nn.Tanh()]
    for _ in range(depth - 1):
        layers += [nn.Conv1d(width, width, kernel, padding=pad), nn.Tanh()]
    layers.append(nn.Conv1d(width, c_out, 1))
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """Stack of same-length 1-D convolutions with tanh, then a 1x1 projection."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.net = _conv_stack(
            config.n_mels, config.encoder_width, config.encoder_depth,
            config.latent_dim, config.kernel_size,
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        # (B, T, n_mels) -> (B, T, latent_dim)
        return self.net(features.transpose(1, 2)).transpose(1, 2)


class Decoder(nn.Module):
    """Mirror of the encoder, mapping latents back to feature frames."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.net = _conv_stack(
            config.latent_dim, config.decoder_width, config.decoder_depth,
            config.n_mels, config.kernel_size,
        )

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        # (B, T, latent_dim) -> (B, T, n_mels)
        return self.net(latents.transpose(1, 2)).transpose(1, 2)


@dataclass
class LatentBundle:
    """Decomposition of one utterance into content and speaker factors.

    ``quantized`` rows are codebook entries verbatim. ``content`` is the
    straight-through view of the same values and is what the decoder
    consumes. ``speaker`` is the time-mean of ``latents - quantized``
    with the quantized side treated as constant.
    """

    latents: torch.Tensor  # (T, latent_dim)
    indices: np.ndarray  # (T,) int64
    quantized: torch.Tensor  # (T, latent_dim)
    content: torch.Tensor  # (T, latent_dim)
    speaker: torch.Tensor  # (latent_dim,)


class VoiceConversionModel(nn.Module):
    """Encoder, decoder, and codebook under one roof."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        # conv weight init draws from the torch global RNG; fork so model
        # construction is reproducible without disturbing callers
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.encoder = Encoder(config)
            self.decoder = Decoder(config)
        self.codebook = nn.Parameter(
            torch.from_numpy(
                init_codebook(config.codebook_size, config.latent_dim, seed=config.seed)
            )
        )
        self.double()

    # -- batched paths used by training ------------------------------------

    def encode_batch(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 3 or features.shape[2] != self.config.n_mels:
            raise ShapeError(
                f"expected (B, T, {self.config.n_mels}) features, got {tuple(features.shape)}"
            )
        return self.encoder(features)

    def decompose_batch(self, features: torch.Tensor):
        """Latents, indices, quantized, content, speaker for a (B, T, F) batch."""
        latents = self.encode_batch(features)
        b, t, d = latents.shape
        result = quantize(latents.reshape(b * t, d), self.codebook)
        quantized = result.quantized.reshape(b, t, d)
        content = straight_through(latents, quantized)
        speaker = (latents - quantized.detach()).mean(dim=1)
        return latents, result.indices.reshape(b, t), quantized, content, speaker

    def decode_batch(self, content: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        if content.ndim != 3 or speaker.ndim != 2:
            raise ShapeError("decode_batch wants (B, T, D) content and (B, D) speaker")
        return self.decoder(content + speaker[:, None, :])

    # -- single-utterance convenience wrappers ------------------------------

    def encode(self, features) -> torch.Tensor:
        return self.encode_batch(_as_input(features, self.config.n_mels)).squeeze(0)

    def decompose(self, features) -> LatentBundle:
        batch = _as_input(features, self.config.n_mels)
        latents, indices, quantized, content, speaker = self.decompose_batch(batch)
        return LatentBundle(
            latents=latents.squeeze(0),
            indices=indices.reshape(-1),
            quantized=quantized.squeeze(0),
            content=content.squeeze(0),
            speaker=speaker.squeeze(0),
        )

    def decode(self, content: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        if content.ndim != 2 or speaker.ndim != 1:
            raise ShapeError("decode wants (T, D) content and (D,) speaker")
        return self.decode_batch(content[None], speaker[None]).squeeze(0)

    def self_reconstruct(self, features) -> torch.Tensor:
        bundle = self.decompose(features)
        return self.decode(bundle.content, bundle.speaker)


def _as_input(features, n_mels: int) -> torch.Tensor:
    if isinstance(features, torch.Tensor):
        t = features.to(torch.float64)
    else:
        t = torch.from_numpy(np.ascontiguousarray(features, dtype=np.float64))
    if t.ndim != 2 or t.shape[1] != n_mels:
        raise ShapeError(f"expected (T, {n_mels}) features, got {tuple(t.shape)}")
    return t[None]


def build_model(config: ModelConfig | None = None) -> VoiceConversionModel:
    return VoiceConversionModel(config or ModelConfig())


def count_parameters(model: nn.Module) -> int:
    return sum(int(p.numel()) for p in model.parameters())
