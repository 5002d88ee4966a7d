"""Waveform ingestion, log-mel feature extraction, and corpus handling.

Conventions, fixed once and relied on by every downstream module:

* STFT uses center alignment: the signal is reflection-padded by
  ``fft_size // 2`` on both sides, so an input of ``n`` samples yields
  ``(n + 2*(fft_size//2) - window_size) // hop_size + 1`` frames
  (``n // hop_size + 1`` with the default square window).
* The mel filter bank uses HTK-style mel spacing
  (``2595 * log10(1 + f/700)``) with triangular filters normalized to
  unit area (each filter scaled by ``2 / (f_hi - f_lo)``).
* Linear magnitudes (not powers) pass through the filter bank, are
  clamped at ``log_floor`` and natural-log compressed.
* No trimming or voice-activity detection is applied.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from ._validation import as_matrix
from .errors import ConfigError, DataError, DecodeError

TARGET_SAMPLE_RATE = 16000


@dataclass(frozen=True)
class FrontendConfig:
    """STFT and mel filter bank parameters."""

    fft_size: int = 1024
    window_size: int = 1024
    hop_size: int = 256
    n_mels: int = 80
    fmin: float = 90.0
    fmax: float = 7600.0
    sample_rate: int = 16000
    window: str = "hann"
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}, only 'hann'")
        if not (self.hop_size <= self.window_size <= self.fft_size):
            raise ConfigError(
                "need hop_size <= window_size <= fft_size, got "
                f"{self.hop_size}/{self.window_size}/{self.fft_size}"
            )
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ConfigError(
                f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}/{self.fmax}"
            )
        if self.n_mels < 1 or self.hop_size < 1:
            raise ConfigError("n_mels and hop_size must be positive")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendConfig":
        return cls(**d)


@dataclass
class AudioClip:
    """A mono waveform in [-1, 1] at 16 kHz with its source identity."""

    samples: np.ndarray
    sample_rate: int = TARGET_SAMPLE_RATE
    speaker_id: str = ""
    utterance_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("audio clip must be a non-empty 1-D sample array")
        if np.max(np.abs(self.samples)) > 1.0 + 1e-12:
            raise DataError("audio samples must lie in [-1, 1]")


@dataclass
class MelSpectrogram:
    """T x n_mels log-mel magnitude frames plus the config that produced them."""

    frames: np.ndarray
    config: FrontendConfig
    speaker_id: str = ""
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = as_matrix(self.frames, "mel frames", n_cols=self.config.n_mels)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def load_audio(path: str | os.PathLike) -> AudioClip:
    """Read a mono PCM WAV file, scale to [-1, 1], and resample to 16 kHz.

    Integer formats are scaled by their positive full-scale value, so a
    full-scale sine reaches exactly +/-1.0. Speaker and utterance ids come
    from the ``<speaker_id>/<utterance_id>.wav`` path convention.
    """
    path = Path(path)
    if not path.is_file():
        raise DecodeError(f"no such audio file: {path}")
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    if data.ndim != 1:
        raise DecodeError(f"{path} is not mono ({data.ndim} channels)")
    if data.size == 0:
        raise DataError(f"{path} contains no samples")

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32767.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483647.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 127.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise DecodeError(f"{path}: unsupported sample format {data.dtype}")

    if rate != TARGET_SAMPLE_RATE:
        g = math.gcd(int(rate), TARGET_SAMPLE_RATE)
        samples = resample_poly(samples, TARGET_SAMPLE_RATE // g, int(rate) // g)
        if samples.size == 0:
            raise DataError(f"{path} is too short to resample")
    samples = np.clip(samples, -1.0, 1.0)

    return AudioClip(
        samples=samples,
        sample_rate=TARGET_SAMPLE_RATE,
        speaker_id=path.parent.name,
        utterance_id=path.stem,
    )


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: FrontendConfig) -> np.ndarray:
    """(n_mels, fft_size//2 + 1) triangular filters, unit-area normalized."""
    n_bins = config.fft_size // 2 + 1
    bin_freqs = np.arange(n_bins) * config.sample_rate / config.fft_size
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)

    fb = np.zeros((config.n_mels, n_bins))
    for m in range(config.n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        fb[m] *= 2.0 / (hi - lo)
    return fb


def band_centers(config: FrontendConfig) -> np.ndarray:
    """Center frequency in Hz of each mel band."""
    mel_pts = np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2)
    return mel_to_hz(mel_pts[1:-1])


def _hann_window(n: int) -> np.ndarray:
    # periodic Hann, matching the frame/overlap-add conventions used here
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(samples: np.ndarray, config: FrontendConfig) -> np.ndarray:
    """Complex STFT, (n_frames, fft_size//2 + 1), center-padded by reflection."""
    pad = config.fft_size // 2
    x = np.pad(np.asarray(samples, dtype=np.float64), pad, mode="reflect")
    win = _hann_window(config.window_size)
    n_frames = (x.size - config.window_size) // config.hop_size + 1
    frames = np.empty((n_frames, config.window_size))
    for t in range(n_frames):
        start = t * config.hop_size
        frames[t] = x[start : start + config.window_size]
    return np.fft.rfft(frames * win, n=config.fft_size, axis=1)


def n_frames_for(n_samples: int, config: FrontendConfig) -> int:
    """Frame count produced by :func:`stft` for an ``n_samples`` input."""
    pad = config.fft_size // 2
    return (n_samples + 2 * pad - config.window_size) // config.hop_size + 1


def compute_mel(clip: AudioClip, config: FrontendConfig | None = None) -> MelSpectrogram:
    """Log-mel magnitude spectrogram of a clip.

    Raises DataError if the clip is shorter than one analysis window.
    """
    config = config or FrontendConfig()
    if clip.samples.size < config.window_size:
        raise DataError(
            f"clip has {clip.samples.size} samples, shorter than one "
            f"window ({config.window_size})"
        )
    mag = np.abs(stft(clip.samples, config))
    mel = mag @ mel_filterbank(config).T
    frames = np.log(np.maximum(mel, config.log_floor))
    return MelSpectrogram(
        frames=frames,
        config=config,
        speaker_id=clip.speaker_id,
        utterance_id=clip.utterance_id,
    )


# ---------------------------------------------------------------------------
# Feature corpus and normalization statistics


@dataclass
class Utterance:
    speaker_id: str
    utterance_id: str
    features: np.ndarray  # (T, feature_dim)

    def __post_init__(self):
        self.features = as_matrix(self.features, "features")


@dataclass
class FeatureCorpus:
    """A collection of per-utterance feature matrices keyed by speaker."""

    items: list[Utterance]
    frontend: FrontendConfig | None = None

    def __post_init__(self):
        if not self.items:
            raise DataError("corpus contains no utterances")
        dims = {u.features.shape[1] for u in self.items}
        if len(dims) != 1:
            raise DataError(f"inconsistent feature dimensions in corpus: {sorted(dims)}")

    @property
    def feature_dim(self) -> int:
        return self.items[0].features.shape[1]

    @property
    def speakers(self) -> list[str]:
        seen: dict[str, None] = {}
        for u in self.items:
            seen.setdefault(u.speaker_id, None)
        return list(seen)

    def by_speaker(self) -> dict[str, list[Utterance]]:
        groups: dict[str, list[Utterance]] = {}
        for u in self.items:
            groups.setdefault(u.speaker_id, []).append(u)
        return groups

    def subset(self, keep: set[tuple[str, str]]) -> "FeatureCorpus":
        items = [u for u in self.items if (u.speaker_id, u.utterance_id) in keep]
        return FeatureCorpus(items=items, frontend=self.frontend)


@dataclass
class FeatureStats:
    """Per-bin z-score statistics, computed on a training corpus."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_corpus(cls, corpus: FeatureCorpus) -> "FeatureStats":
        stacked = np.concatenate([u.features for u in corpus.items], axis=0)
        std = stacked.std(axis=0)
        return cls(mean=stacked.mean(axis=0), std=np.maximum(std, 1e-8))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def invert(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) * self.std + self.mean


# ---------------------------------------------------------------------------
# Feature cache on disk

CACHE_CONFIG_NAME = "config.json"


def build_feature_cache(
    data_dir: str | os.PathLike,
    cache_dir: str | os.PathLike,
    config: FrontendConfig | None = None,
) -> list[tuple[str, str]]:
    """Extract mels for every ``<speaker>/<utterance>.wav`` under data_dir.

    One ``.npy`` per utterance is written under cache_dir mirroring the
    speaker layout, with the config recorded in a sidecar json. A cache
    built under a different config is discarded and rebuilt.
    """
    config = config or FrontendConfig()
    data_dir, cache_dir = Path(data_dir), Path(cache_dir)
    wavs = sorted(data_dir.glob("*/*.wav"))
    if not wavs:
        raise DataError(f"no <speaker>/<utterance>.wav files under {data_dir}")

    cache_dir.mkdir(parents=True, exist_ok=True)
    config_path = cache_dir / CACHE_CONFIG_NAME
    stale = True
    if config_path.is_file():
        stale = json.loads(config_path.read_text()) != config.to_dict()
    if stale:
        for old in cache_dir.glob("*/*.npy"):
            old.unlink()

    entries = []
    for wav in wavs:
        out = cache_dir / wav.parent.name / (wav.stem + ".npy")
        if stale or not out.is_file():
            mel = compute_mel(load_audio(wav), config)
            out.parent.mkdir(parents=True, exist_ok=True)
            tmp = out.with_name(out.name + ".tmp.npy")
            np.save(tmp, mel.frames)
            os.replace(tmp, out)
        entries.append((wav.parent.name, wav.stem))
    config_path.write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2))
    return entries


def load_feature_cache(cache_dir: str | os.PathLike) -> FeatureCorpus:
    """Load a cache produced by :func:`build_feature_cache`."""
    cache_dir = Path(cache_dir)
    config_path = cache_dir / CACHE_CONFIG_NAME
    frontend = None
    if config_path.is_file():
        frontend = FrontendConfig.from_dict(json.loads(config_path.read_text()))
    npys = sorted(cache_dir.glob("*/*.npy"))
    if not npys:
        raise DataError(f"no cached features under {cache_dir}")
    items = [
        Utterance(speaker_id=p.parent.name, utterance_id=p.stem, features=np.load(p))
        for p in npys
    ]
    return FeatureCorpus(items=items, frontend=frontend)


# ---------------------------------------------------------------------------
# Synthetic corpus with known content/speaker factors


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Generator parameters for a corpus with known ground-truth factors.

    Every utterance is a piecewise-constant content signal (segments drawn
    from a small shared alphabet of random vectors) plus a constant
    per-speaker offset vector. Utterance index ``j`` carries the same
    content for every speaker, so cross-speaker renderings of one content
    signal are available as ground truth.
    """

    n_speakers: int = 4
    utterances_per_speaker: int = 10
    feature_dim: int = 20
    frames_per_utterance: int = 160
    n_symbols: int = 8
    min_segment: int = 8
    max_segment: int = 24
    content_scale: float = 1.0
    offset_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ConfigError("synthetic corpus needs at least 2 speakers")
        if self.utterances_per_speaker < 2:
            raise ConfigError("synthetic corpus needs >= 2 utterances per speaker")
        if self.feature_dim < 1 or self.frames_per_utterance < 1:
            raise ConfigError("feature_dim and frames_per_utterance must be positive")
        if not (1 <= self.min_segment <= self.max_segment):
            raise ConfigError("need 1 <= min_segment <= max_segment")
        if self.n_symbols < 2:
            raise ConfigError("content alphabet needs >= 2 symbols")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCorpusSpec":
        return cls(**d)


@dataclass
class SyntheticCorpus(FeatureCorpus):
    """Feature corpus plus the ground-truth factors that generated it."""

    spec: SyntheticCorpusSpec = field(default=None)  # type: ignore[assignment]
    offsets: dict[str, np.ndarray] = field(default_factory=dict)
    contents: dict[str, np.ndarray] = field(default_factory=dict)  # utterance_id -> (T, F)

    def content_of(self, utterance_id: str) -> np.ndarray:
        return self.contents[utterance_id]

    def offset_of(self, speaker_id: str) -> np.ndarray:
        return self.offsets[speaker_id]

    def render(self, utterance_id: str, speaker_id: str) -> np.ndarray:
        """Ground-truth features of a content signal spoken by a given speaker."""
        return self.contents[utterance_id] + self.offsets[speaker_id]


def _content_signal(rng: np.random.Generator, spec: SyntheticCorpusSpec,
                    alphabet: np.ndarray) -> np.ndarray:
    rows = []
    remaining = spec.frames_per_utterance
    while remaining > 0:
        length = int(rng.integers(spec.min_segment, spec.max_segment + 1))
        length = min(length, remaining)
        symbol = alphabet[int(rng.integers(spec.n_symbols))]
        rows.append(np.tile(symbol, (length, 1)))
        remaining -= length
    return np.concatenate(rows, axis=0)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> SyntheticCorpus:
    """Deterministically generate a corpus from a spec (same seed, same bits)."""
    rng = np.random.default_rng(spec.seed)
    alphabet = rng.normal(0.0, spec.content_scale, (spec.n_symbols, spec.feature_dim))
    offsets = rng.normal(0.0, spec.offset_scale, (spec.n_speakers, spec.feature_dim))
    for a in range(spec.n_speakers):
        for b in range(a + 1, spec.n_speakers):
            if np.array_equal(offsets[a], offsets[b]):
                raise DataError(f"speakers {a} and {b} drew identical offsets")

    speaker_ids = [f"s{t:02d}" for t in range(spec.n_speakers)]
    contents = {
        f"u{j:03d}": _content_signal(rng, spec, alphabet)
        for j in range(spec.utterances_per_speaker)
    }
    items = [
        Utterance(
            speaker_id=sid,
            utterance_id=uid,
            features=content + offsets[t],
        )
        for t, sid in enumerate(speaker_ids)
        for uid, content in contents.items()
    ]
    return SyntheticCorpus(
        items=items,
        frontend=None,
        spec=spec,
        offsets={sid: offsets[t] for t, sid in enumerate(speaker_ids)},
        contents=contents,
    )


def save_synthetic_corpus(corpus: SyntheticCorpus, out_dir: str | os.PathLike) -> None:
    """Write a synthetic corpus as <speaker>/<utterance>.npy plus its spec."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "corpus.json").write_text(
        json.dumps(corpus.spec.to_dict(), sort_keys=True, indent=2)
    )
    for u in corpus.items:
        sub = out_dir / u.speaker_id
        sub.mkdir(exist_ok=True)
        np.save(sub / (u.utterance_id + ".npy"), u.features)


def load_corpus(path: str | os.PathLike) -> FeatureCorpus:
    """Load a corpus directory: synthetic (regenerated from its spec) or cached mels."""
    path = Path(path)
    spec_file = path / "corpus.json"
    if spec_file.is_file():
        spec = SyntheticCorpusSpec.from_dict(json.loads(spec_file.read_text()))
        return generate_synthetic_corpus(spec)
    return load_feature_cache(path)
