"""Voice conversion inference and waveform synthesis.

Conversion is a single decoder pass: quantize the source utterance's
latents to get its content, take the target utterance's time-mean
residual as the speaker embedding, and decode content plus embedding.

Waveform synthesis inverts the mel frontend without any learned vocoder:
per-frame non-negative least squares recovers a linear magnitude
spectrogram from the mel filter bank, then Griffin-Lim (zero phase
initialization) iterates STFT projections to estimate phase.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.io import wavfile
from scipy.optimize import nnls

from ._validation import as_matrix
from .errors import DataError
from .frontend import (
    FeatureStats,
    FrontendConfig,
    Utterance,
    _hann_window,
    mel_filterbank,
    stft,
)
from .model import VoiceConversionModel

GRIFFIN_LIM_ITERS = 60


def convert(
    model: VoiceConversionModel, source_features, target_features
) -> np.ndarray:
    """Decode source content with the target utterance's speaker embedding.

    Both inputs are (T, n_mels) in the model's feature domain; the output
    has the source's frame count.
    """
    source_features = as_matrix(source_features, "source features", model.config.n_mels)
    target_features = as_matrix(target_features, "target features", model.config.n_mels)
    with torch.no_grad():
        content = model.decompose(source_features).content
        speaker = model.decompose(target_features).speaker
        return model.decode(content, speaker).numpy()


@dataclass
class ConversionResult:
    features: np.ndarray  # (T, n_mels) log-mel, un-normalized domain
    source_speaker: str
    target_speaker: str
    waveform: np.ndarray | None = None


def convert_utterance(
    model: VoiceConversionModel,
    source: Utterance,
    target: Utterance,
    stats: FeatureStats | None = None,
) -> ConversionResult:
    """Convert one utterance, handling feature normalization if stats exist."""
    src = stats.apply(source.features) if stats is not None else source.features
    tgt = stats.apply(target.features) if stats is not None else target.features
    out = convert(model, src, tgt)
    if stats is not None:
        out = stats.invert(out)
    return ConversionResult(
        features=out, source_speaker=source.speaker_id, target_speaker=target.speaker_id
    )


# ---------------------------------------------------------------------------
# Mel inversion and Griffin-Lim


def mel_to_linear(log_mel: np.ndarray, config: FrontendConfig) -> np.ndarray:
    """Recover (T, fft//2+1) linear magnitudes from log-mel frames.

    Solves one small non-negative least-squares problem per frame against
    the analysis filter bank; slow but dependency-free and exact enough
    for a listening check.
    """
    log_mel = as_matrix(log_mel, "log-mel frames", config.n_mels)
    fb = mel_filterbank(config)  # (n_mels, n_bins)
    mel = np.exp(log_mel)
    out = np.empty((mel.shape[0], fb.shape[1]))
    for t in range(mel.shape[0]):
        out[t], _ = nnls(fb, mel[t])
    return out


def _istft(spectrum: np.ndarray, config: FrontendConfig) -> np.ndarray:
    """Windowed overlap-add inverse of :func:`frontend.stft`."""
    n_frames = spectrum.shape[0]
    win = _hann_window(config.window_size)
    frames = np.fft.irfft(spectrum, n=config.fft_size, axis=1)[:, : config.window_size]
    total = (n_frames - 1) * config.hop_size + config.window_size
    buf = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        start = t * config.hop_size
        buf[start : start + config.window_size] += frames[t] * win
        norm[start : start + config.window_size] += win**2
    buf /= np.maximum(norm, 1e-12)
    pad = config.fft_size // 2
    return buf[pad : total - pad]


def griffin_lim(
    magnitudes: np.ndarray, config: FrontendConfig, n_iters: int = GRIFFIN_LIM_ITERS
) -> np.ndarray:
    """Phase reconstruction from (T, n_bins) linear magnitudes, zero phase start."""
    magnitudes = np.asarray(magnitudes, dtype=np.float64)
    spectrum = magnitudes.astype(np.complex128)
    samples = _istft(spectrum, config)
    for _ in range(n_iters):
        reanalyzed = stft(samples, config)
        # frame counts can differ by one at the edge; align on the shorter
        t = min(reanalyzed.shape[0], magnitudes.shape[0])
        phase = reanalyzed[:t] / np.maximum(np.abs(reanalyzed[:t]), 1e-12)
        samples = _istft(magnitudes[:t] * phase, config)
    return samples


def synthesize_waveform(
    log_mel: np.ndarray,
    config: FrontendConfig | None = None,
    n_iters: int = GRIFFIN_LIM_ITERS,
) -> np.ndarray:
    """Log-mel frames to a waveform: NNLS filter bank inversion + Griffin-Lim.

    Output length is ``(n_frames - 1) * hop_size`` samples at the
    frontend's sample rate. Frames stuck at the log floor carry no
    spectral information, so an all-floor input yields near silence and
    a warning rather than an error.
    """
    config = config or FrontendConfig()
    log_mel = as_matrix(log_mel, "log-mel frames", config.n_mels)
    if np.all(log_mel <= np.log(config.log_floor) + 1e-12):
        warnings.warn(
            "all mel frames are at the log floor; synthesizing silence",
            RuntimeWarning,
            stacklevel=2,
        )
    return griffin_lim(mel_to_linear(log_mel, config), config, n_iters=n_iters)


def save_wav(path, samples: np.ndarray, sample_rate: int = 16000) -> None:
    """Write mono 16-bit PCM."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1 or samples.size == 0:
        raise DataError("waveform must be a non-empty 1-D array")
    pcm = np.clip(samples, -1.0, 1.0) * 32767.0
    wavfile.write(str(path), sample_rate, pcm.astype(np.int16))
