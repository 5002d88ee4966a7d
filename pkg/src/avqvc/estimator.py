"""Scikit-learn style wrapper around the training and inference pipeline.

``VoiceConverter`` follows the estimator protocol: constructor arguments
are hyperparameters stored verbatim (so ``get_params`` / ``set_params``
and cloning work), ``fit`` consumes utterances plus speaker labels,
``transform`` produces speaker embeddings, and ``score`` reports the
embedding separation. Conversion itself is exposed as ``convert`` since
it takes a pair of utterances rather than a single X.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix
from .conversion import convert as _convert
from .errors import DataError
from .evaluation import separation_score, speaker_embedding
from .frontend import FeatureCorpus, FeatureStats, Utterance
from .losses import LossWeights
from .model import ModelConfig
from .training import TRIPLET_MODE, TrainConfig, model_from_checkpoint, train


class VoiceConverter(TransformerMixin, BaseEstimator):
    """One-shot voice conversion model with an estimator interface.

    ``X`` is a sequence of per-utterance feature matrices (T_i, n_features),
    ragged lengths allowed, and ``y`` the matching speaker labels.
    """

    def __init__(
        self,
        latent_dim: int = 16,
        codebook_size: int = 32,
        encoder_width: int = 32,
        encoder_depth: int = 2,
        decoder_width: int = 32,
        decoder_depth: int = 2,
        kernel_size: int = 5,
        steps: int = 1000,
        batch_size: int = 16,
        learning_rate: float = 1e-4,
        segment_len: int = 128,
        mode: str = TRIPLET_MODE,
        normalize: bool = False,
        seed: int = 0,
    ):
        self.latent_dim = latent_dim
        self.codebook_size = codebook_size
        self.encoder_width = encoder_width
        self.encoder_depth = encoder_depth
        self.decoder_width = decoder_width
        self.decoder_depth = decoder_depth
        self.kernel_size = kernel_size
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.segment_len = segment_len
        self.mode = mode
        self.normalize = normalize
        self.seed = seed

    def _corpus(self, X, y=None) -> FeatureCorpus:
        if y is None:
            raise DataError("speaker labels y are required")
        labels = [str(label) for label in np.asarray(y).reshape(-1)]
        if len(labels) != len(X):
            raise DataError(f"got {len(X)} utterances but {len(labels)} labels")
        items = [
            Utterance(
                speaker_id=labels[i],
                utterance_id=f"u{i:05d}",
                features=as_matrix(X[i], f"X[{i}]"),
            )
            for i in range(len(X))
        ]
        return FeatureCorpus(items=items)

    def fit(self, X, y):
        """Train on utterances X (list of (T_i, F) arrays) labeled by speaker y."""
        corpus = self._corpus(X, y)
        self.n_features_in_ = corpus.feature_dim
        self.stats_ = FeatureStats.from_corpus(corpus) if self.normalize else None
        if self.stats_ is not None:
            corpus = FeatureCorpus(
                items=[
                    Utterance(u.speaker_id, u.utterance_id, self.stats_.apply(u.features))
                    for u in corpus.items
                ]
            )
        model_config = ModelConfig(
            n_mels=corpus.feature_dim,
            latent_dim=self.latent_dim,
            codebook_size=self.codebook_size,
            encoder_width=self.encoder_width,
            encoder_depth=self.encoder_depth,
            decoder_width=self.decoder_width,
            decoder_depth=self.decoder_depth,
            kernel_size=self.kernel_size,
            seed=self.seed,
        )
        train_config = TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            segment_len=self.segment_len,
            seed=self.seed,
            mode=self.mode,
        )
        result = train(
            corpus, model_config, train_config, LossWeights(), feature_stats=self.stats_
        )
        self.checkpoint_ = result.checkpoint
        self.model_ = model_from_checkpoint(result.checkpoint)
        self.log_lines_ = result.log_lines
        self.classes_ = np.asarray(sorted({u.speaker_id for u in corpus.items}))
        return self

    def transform(self, X) -> np.ndarray:
        """Speaker embedding of each utterance, shape (n_utterances, latent_dim)."""
        check_is_fitted(self, "model_")
        rows = []
        for i, features in enumerate(X):
            feats = as_matrix(features, f"X[{i}]", n_cols=self.n_features_in_)
            rows.append(speaker_embedding(self.model_, feats, self.stats_))
        return np.stack(rows)

    def convert(self, source, target) -> np.ndarray:
        """Source utterance content rendered with the target utterance's voice."""
        check_is_fitted(self, "model_")
        src = as_matrix(source, "source", n_cols=self.n_features_in_)
        tgt = as_matrix(target, "target", n_cols=self.n_features_in_)
        if self.stats_ is not None:
            src, tgt = self.stats_.apply(src), self.stats_.apply(tgt)
        out = _convert(self.model_, src, tgt)
        return self.stats_.invert(out) if self.stats_ is not None else out

    def score(self, X, y) -> float:
        """Intra-minus-inter speaker embedding separation on (X, y)."""
        check_is_fitted(self, "model_")
        corpus = self._corpus(X, y)
        return separation_score(self.model_, corpus, self.stats_, seed=self.seed)

    def _more_tags(self):
        return {"X_types": ["3darray"], "non_deterministic": False, "requires_y": True}
