"""Vector quantization against a learned codebook.

The quantizer maps each latent frame to its nearest codebook entry under
squared Euclidean distance. Ties break to the lowest entry index, which
``np.argmin`` guarantees; distances are computed with the exact expanded
difference rather than the usual norm trick so that an exact-match frame
really produces a zero distance and ties stay ties in floating point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError

# rows quantized per distance-matrix block; bounds peak memory at
# roughly chunk * n_entries * 8 bytes
_CHUNK = 4096


def init_codebook(n_entries: int, dim: int, seed: int = 0) -> np.ndarray:
    """Random (n_entries, dim) codebook, entries ~ N(0, 1/dim)."""
    if n_entries < 1 or dim < 1:
        raise ConfigError(f"codebook needs positive size, got ({n_entries}, {dim})")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_entries, dim))


def nearest_entry_indices(latents: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the closest entry for each latent frame, (T,) int64.

    Inputs may be numpy arrays or torch tensors; the search itself runs in
    float64 numpy so the lowest-index tie rule holds regardless of backend.
    """
    if isinstance(latents, torch.Tensor):
        latents = latents.detach().cpu().numpy()
    if isinstance(entries, torch.Tensor):
        entries = entries.detach().cpu().numpy()
    latents = np.asarray(latents, dtype=np.float64)
    entries = np.asarray(entries, dtype=np.float64)
    if latents.ndim != 2 or entries.ndim != 2:
        raise ShapeError("latents and codebook entries must be 2-D")
    if latents.shape[1] != entries.shape[1]:
        raise ShapeError(
            f"latent dim {latents.shape[1]} != codebook dim {entries.shape[1]}"
        )
    if not np.all(np.isfinite(latents)):
        raise NumericError("latents contain non-finite values")
    if not np.all(np.isfinite(entries)):
        raise NumericError("codebook entries contain non-finite values")
    out = np.empty(latents.shape[0], dtype=np.int64)
    for start in range(0, latents.shape[0], _CHUNK):
        block = latents[start : start + _CHUNK]
        dist = ((block[:, None, :] - entries[None, :, :]) ** 2).sum(axis=2)
        out[start : start + _CHUNK] = np.argmin(dist, axis=1)
    return out


@dataclass
class QuantizationResult:
    """Nearest-entry assignment of a latent sequence.

    ``quantized`` rows are the selected codebook entries themselves; when
    the codebook is a torch parameter the gather keeps gradients flowing
    into the selected entries.
    """

    indices: np.ndarray
    quantized: np.ndarray | torch.Tensor


def quantize(latents, entries) -> QuantizationResult:
    """Quantize (T, D) latents against (K, D) entries."""
    indices = nearest_entry_indices(latents, entries)
    if isinstance(entries, torch.Tensor):
        quantized = entries[torch.from_numpy(indices)]
    else:
        quantized = np.asarray(entries, dtype=np.float64)[indices]
    return QuantizationResult(indices=indices, quantized=quantized)


def straight_through(latents: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Quantized values with gradients rerouted to the continuous latents.

    Forward value equals ``quantized`` bitwise (latents - latents.detach()
    is exactly zero); the backward pass copies the downstream gradient onto
    ``latents`` and none onto the codebook.
    """
    return quantized.detach() + (latents - latents.detach())


def latent_loss(latents, quantized):
    """Mean over frames of the squared L2 gap between latents and their entries.

    With torch inputs this is differentiable with respect to both the
    latents and the codebook entries, which is what pulls entries toward
    the latent distribution during training.
    """
    if isinstance(latents, torch.Tensor):
        return ((latents - quantized) ** 2).sum(dim=-1).mean()
    diff = np.asarray(latents, dtype=np.float64) - np.asarray(quantized, dtype=np.float64)
    return float((diff**2).sum(axis=-1).mean())
