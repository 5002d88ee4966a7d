"""One-shot voice conversion by splitting content from speaker identity.

An utterance's mel features are encoded to a latent sequence; a learned
codebook quantizes each frame to its nearest entry (the content), and the
time-averaged residual between the continuous latents and their quantized
counterparts is the speaker embedding. Adding a different utterance's
speaker embedding to the content before decoding converts the voice.
Training swaps embeddings between two utterances of the same speaker and
pushes a third speaker's embedding away.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    CompatibilityError,
    ConfigError,
    DataError,
    DecodeError,
    NumericError,
    PipelineError,
    ShapeError,
)
from .frontend import (
    AudioClip,
    FeatureCorpus,
    FeatureStats,
    FrontendConfig,
    MelSpectrogram,
    SyntheticCorpus,
    SyntheticCorpusSpec,
    Utterance,
    build_feature_cache,
    compute_mel,
    generate_synthetic_corpus,
    load_audio,
    load_corpus,
    load_feature_cache,
    mel_filterbank,
    save_synthetic_corpus,
)
from .vq import (
    init_codebook,
    latent_loss,
    nearest_entry_indices,
    quantize,
    straight_through,
)
from .model import LatentBundle, ModelConfig, VoiceConversionModel, build_model
from .losses import LossReport, LossWeights, diff_loss, recon_loss, speaker_loss, total_loss, update_weights
from .training import (
    Checkpoint,
    TrainConfig,
    TrainResult,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)
from .conversion import ConversionResult, convert, convert_utterance, save_wav, synthesize_waveform
from .evaluation import (
    DisentanglementScore,
    SweepReport,
    codebook_sweep,
    evaluate_disentanglement,
    mcd,
    mel_cepstra,
    separation_score,
    speaker_similarity,
    split_corpus,
)
from .estimator import VoiceConverter

__all__ = [
    "__version__",
    "AudioClip",
    "Checkpoint",
    "CheckpointError",
    "CompatibilityError",
    "ConfigError",
    "ConversionResult",
    "DataError",
    "DecodeError",
    "DisentanglementScore",
    "FeatureCorpus",
    "FeatureStats",
    "FrontendConfig",
    "LatentBundle",
    "LossReport",
    "LossWeights",
    "MelSpectrogram",
    "ModelConfig",
    "NumericError",
    "PipelineError",
    "ShapeError",
    "SweepReport",
    "SyntheticCorpus",
    "SyntheticCorpusSpec",
    "TrainConfig",
    "TrainResult",
    "Utterance",
    "VoiceConversionModel",
    "VoiceConverter",
    "build_feature_cache",
    "build_model",
    "codebook_sweep",
    "compute_mel",
    "convert",
    "convert_utterance",
    "diff_loss",
    "evaluate_disentanglement",
    "generate_synthetic_corpus",
    "init_codebook",
    "latent_loss",
    "load_audio",
    "load_checkpoint",
    "load_corpus",
    "load_feature_cache",
    "mcd",
    "mel_cepstra",
    "mel_filterbank",
    "model_from_checkpoint",
    "nearest_entry_indices",
    "quantize",
    "recon_loss",
    "save_checkpoint",
    "save_synthetic_corpus",
    "save_wav",
    "separation_score",
    "speaker_loss",
    "speaker_similarity",
    "split_corpus",
    "straight_through",
    "synthesize_waveform",
    "total_loss",
    "train",
    "update_weights",
]
