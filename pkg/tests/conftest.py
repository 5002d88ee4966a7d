"""Shared fixtures: the integration corpus and the two trained models.

Training the tiny models is the expensive part of the suite, so both are
session-scoped and reused by the integration, conversion, evaluation, and
acceptance tests. Every seed is pinned; the whole suite is deterministic.
"""

import dataclasses
import time

import pytest

from avqvc.evaluation import split_corpus
from avqvc.frontend import SyntheticCorpusSpec, generate_synthetic_corpus
from avqvc.losses import LossWeights
from avqvc.model import ModelConfig, build_model
from avqvc.training import TrainConfig, model_from_checkpoint, train

# Integration protocol: a codebook roomy enough to swallow speaker identity
# into content codes (the plain-reconstruction failure mode), short
# utterances so time-mean content noise dominates untrained embeddings,
# and offsets strong enough that a trained model separates cleanly.
CORPUS_SPEC = SyntheticCorpusSpec(
    n_speakers=4,
    utterances_per_speaker=20,
    feature_dim=20,
    frames_per_utterance=64,
    n_symbols=8,
    offset_scale=0.3,
    seed=0,
)

TINY_MODEL = ModelConfig(
    n_mels=20,
    latent_dim=16,
    codebook_size=32,
    encoder_width=64,
    encoder_depth=2,
    decoder_width=64,
    decoder_depth=2,
    kernel_size=5,
    seed=0,
)

TINY_TRAIN = TrainConfig(
    steps=2000,
    batch_size=16,
    learning_rate=1e-3,
    segment_len=128,
    seed=0,
    log_every=10**9,
    mode="avqvc",
)


@dataclasses.dataclass
class TrainedSetup:
    """One trained model plus everything needed to score it."""

    result: object  # TrainResult
    model: object  # VoiceConversionModel
    seconds: float
    train_config: TrainConfig


@pytest.fixture(scope="session")
def synth_corpus():
    return generate_synthetic_corpus(CORPUS_SPEC)


@pytest.fixture(scope="session")
def corpus_split(synth_corpus):
    return split_corpus(synth_corpus, seed=0)


@pytest.fixture(scope="session")
def untrained_model():
    return build_model(TINY_MODEL)


def _train_mode(corpus_split, mode: str) -> TrainedSetup:
    train_corpus, _ = corpus_split
    config = dataclasses.replace(TINY_TRAIN, mode=mode)
    start = time.perf_counter()
    result = train(train_corpus, TINY_MODEL, config, LossWeights())
    seconds = time.perf_counter() - start
    return TrainedSetup(
        result=result,
        model=model_from_checkpoint(result.checkpoint),
        seconds=seconds,
        train_config=config,
    )


@pytest.fixture(scope="session")
def trained_avqvc(corpus_split):
    return _train_mode(corpus_split, "avqvc")


@pytest.fixture(scope="session")
def trained_vqvc(corpus_split):
    return _train_mode(corpus_split, "vqvc")


@pytest.fixture()
def micro_corpus():
    """Small, fast corpus for unit-level training and CLI tests."""
    return generate_synthetic_corpus(
        SyntheticCorpusSpec(
            n_speakers=3,
            utterances_per_speaker=4,
            feature_dim=6,
            frames_per_utterance=24,
            n_symbols=4,
            seed=1,
        )
    )


MICRO_MODEL = ModelConfig(
    n_mels=6,
    latent_dim=4,
    codebook_size=5,
    encoder_width=8,
    encoder_depth=1,
    decoder_width=8,
    decoder_depth=1,
    kernel_size=3,
    seed=0,
)
