"""Objective metrics and the codebook-size sweep harness.

Three families of measurement:

* mel-cepstral distortion between two feature sequences, with dynamic
  time warping alignment;
* a cosine speaker-similarity proxy over speaker embeddings;
* a disentanglement score on the synthetic corpus, where ground-truth
  speaker offsets and shared content make the ideal conversion output
  known exactly.

The disentanglement computation is written against pluggable functions
(embed / convert / reconstruct / ground truth) so its arithmetic can be
verified with oracle inputs independent of any trained model.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.fft import dct

from ._validation import as_matrix, as_vector
from .conversion import convert
from .errors import ConfigError, DataError, PipelineError, ShapeError
from .frontend import FeatureCorpus, FeatureStats, SyntheticCorpus, Utterance
from .model import ModelConfig, VoiceConversionModel
from .training import TrainConfig, train, model_from_checkpoint
from .losses import LossWeights

# dB conversion constant for cepstral distortion
_MCD_SCALE = (10.0 / math.log(10.0)) * math.sqrt(2.0)


def mel_cepstra(log_mel: np.ndarray) -> np.ndarray:
    """Cepstra of log-mel frames: orthonormal type-II DCT along the mel axis."""
    frames = as_matrix(log_mel, "log-mel frames")
    return dct(frames, type=2, norm="ortho", axis=1)


def _dtw_path(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimal-cost monotone alignment; ties prefer the diagonal move."""
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
        for j in range(1, m):
            acc[i, j] = cost[i, j] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while i or j:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            if diag <= up and diag <= left:
                i, j = i - 1, j - 1
            elif up <= left:
                i -= 1
            else:
                j -= 1
        path.append((i, j))
    path.reverse()
    return path


def mcd(reference_cepstra, converted_cepstra, n_coeffs: int = 13) -> float:
    """Mel-cepstral distortion in dB between two cepstral sequences.

    Frames are aligned by dynamic time warping under Euclidean cost over
    coefficients 1..n_coeffs (the energy coefficient at column 0 is
    excluded), then the aligned per-pair norms are averaged and scaled by
    (10/ln 10)*sqrt(2).
    """
    a = as_matrix(reference_cepstra, "reference cepstra")
    b = as_matrix(converted_cepstra, "converted cepstra")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DataError("cepstral sequences must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cepstral widths differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[1] < n_coeffs + 1:
        raise ShapeError(
            f"need at least {n_coeffs + 1} cepstral columns "
            f"(coefficient 0 plus 1..{n_coeffs}), got {a.shape[1]}"
        )
    ac = a[:, 1 : n_coeffs + 1]
    bc = b[:, 1 : n_coeffs + 1]
    cost = np.sqrt(((ac[:, None, :] - bc[None, :, :]) ** 2).sum(axis=2))
    path = _dtw_path(cost)
    return _MCD_SCALE * float(np.mean([cost[i, j] for i, j in path]))


def speaker_similarity(embedding_a, embedding_b) -> float:
    """Cosine similarity in [-1, 1]; a single zero vector scores 0."""
    a = as_vector(embedding_a, "embedding a")
    b = as_vector(embedding_b, "embedding b", size=a.size)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 and nb == 0.0:
        raise DataError("similarity of two zero embeddings is undefined")
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def speaker_embedding(
    model: VoiceConversionModel, features, stats: FeatureStats | None = None
) -> np.ndarray:
    """Time-mean residual embedding of one utterance, as a plain array."""
    feats = stats.apply(features) if stats is not None else features
    with torch.no_grad():
        return model.decompose(feats).speaker.numpy()


def split_corpus(
    corpus: FeatureCorpus, holdout_fraction: float = 0.2, seed: int = 0
) -> tuple[FeatureCorpus, FeatureCorpus]:
    """Per-speaker utterance split into (train, held-out), seeded.

    Every speaker keeps at least two training utterances (the triplet
    sampler's requirement); speakers with only two contribute nothing to
    the held-out side.
    """
    if not (0.0 < holdout_fraction < 1.0):
        raise ConfigError("holdout_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    groups = corpus.by_speaker()
    train_items: list[Utterance] = []
    held_items: list[Utterance] = []
    for speaker in sorted(groups):
        pool = sorted(groups[speaker], key=lambda u: u.utterance_id)
        k = min(max(int(round(holdout_fraction * len(pool))), 1), len(pool) - 2)
        order = rng.permutation(len(pool))
        held = set(order[:k].tolist()) if k > 0 else set()
        for idx, u in enumerate(pool):
            (held_items if idx in held else train_items).append(u)
    if not held_items:
        raise DataError("no utterances available to hold out (all speakers too small)")
    return (
        FeatureCorpus(items=train_items, frontend=corpus.frontend),
        FeatureCorpus(items=held_items, frontend=corpus.frontend),
    )


@dataclass
class DisentanglementScore:
    """Embedding separation and swap-path fidelity on one evaluation set."""

    separation: float  # intra_mean - inter_mean
    intra_mean: float
    inter_mean: float
    swap_error: float
    self_error: float
    swap_ratio: float  # swap_error / self_error, 0/0 reads as 1.0
    n_pairs: int
    n_swap_pairs: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def disentanglement_metrics(
    items: list[Utterance],
    embed_fn,
    convert_fn=None,
    reconstruct_fn=None,
    truth_fn=None,
    n_pairs: int = 200,
    n_swap_pairs: int = 50,
    seed: int = 0,
) -> DisentanglementScore:
    """Core disentanglement arithmetic over pluggable model functions.

    ``embed_fn(utterance) -> vector`` supplies speaker embeddings;
    ``convert_fn(source, target) -> features``, ``reconstruct_fn(utterance)
    -> features`` and ``truth_fn(source, target_speaker_id) -> features``
    together define the swap-path comparison, skipped when any is None.
    """
    groups: dict[str, list[Utterance]] = {}
    for u in items:
        groups.setdefault(u.speaker_id, []).append(u)
    speakers = sorted(groups)
    if len(speakers) < 2:
        raise DataError(f"disentanglement needs >= 2 speakers, got {len(speakers)}")
    for s in speakers:
        groups[s] = sorted(groups[s], key=lambda u: u.utterance_id)
    pair_speakers = [s for s in speakers if len(groups[s]) >= 2]
    if not pair_speakers:
        raise DataError("no speaker has two utterances; cannot form same-speaker pairs")

    embeddings = {(u.speaker_id, u.utterance_id): np.asarray(embed_fn(u), dtype=np.float64)
                  for u in items}
    emb = lambda u: embeddings[(u.speaker_id, u.utterance_id)]
    rng = np.random.default_rng(seed)

    intra = np.empty(n_pairs)
    for p in range(n_pairs):
        s = pair_speakers[int(rng.integers(len(pair_speakers)))]
        pool = groups[s]
        i = int(rng.integers(len(pool)))
        j = int(rng.integers(len(pool) - 1))
        if j >= i:
            j += 1
        intra[p] = speaker_similarity(emb(pool[i]), emb(pool[j]))

    inter = np.empty(n_pairs)
    for p in range(n_pairs):
        sa = speakers[int(rng.integers(len(speakers)))]
        sb = speakers[int(rng.integers(len(speakers) - 1))]
        if sb == sa:
            sb = speakers[-1]
        ua = groups[sa][int(rng.integers(len(groups[sa])))]
        ub = groups[sb][int(rng.integers(len(groups[sb])))]
        inter[p] = speaker_similarity(emb(ua), emb(ub))

    swap_error = self_error = swap_ratio = float("nan")
    swap_done = 0
    if convert_fn is not None and reconstruct_fn is not None and truth_fn is not None:
        swap_errs = np.empty(n_swap_pairs)
        self_errs = np.empty(n_swap_pairs)
        for p in range(n_swap_pairs):
            sa = speakers[int(rng.integers(len(speakers)))]
            sb = speakers[int(rng.integers(len(speakers) - 1))]
            if sb == sa:
                sb = speakers[-1]
            src = groups[sa][int(rng.integers(len(groups[sa])))]
            tgt = groups[sb][int(rng.integers(len(groups[sb])))]
            converted = np.asarray(convert_fn(src, tgt), dtype=np.float64)
            expected = np.asarray(truth_fn(src, sb), dtype=np.float64)
            swap_errs[p] = np.mean(np.abs(converted - expected))
            rebuilt = np.asarray(reconstruct_fn(src), dtype=np.float64)
            self_errs[p] = np.mean(np.abs(rebuilt - src.features))
        swap_error = float(swap_errs.mean())
        self_error = float(self_errs.mean())
        if swap_error == 0.0 and self_error == 0.0:
            swap_ratio = 1.0
        elif self_error == 0.0:
            swap_ratio = float("inf")
        else:
            swap_ratio = swap_error / self_error
        swap_done = n_swap_pairs

    return DisentanglementScore(
        separation=float(intra.mean() - inter.mean()),
        intra_mean=float(intra.mean()),
        inter_mean=float(inter.mean()),
        swap_error=swap_error,
        self_error=self_error,
        swap_ratio=swap_ratio,
        n_pairs=n_pairs,
        n_swap_pairs=swap_done,
    )


def evaluate_disentanglement(
    model: VoiceConversionModel,
    corpus: FeatureCorpus,
    eval_corpus: FeatureCorpus | None = None,
    stats: FeatureStats | None = None,
    n_pairs: int = 200,
    n_swap_pairs: int = 50,
    seed: int = 0,
) -> DisentanglementScore:
    """Disentanglement score of a model, on held-out items if provided.

    Swap-path metrics require the corpus to expose ground-truth renderings
    (the synthetic corpus does); otherwise only the separation half runs.
    """
    target = eval_corpus if eval_corpus is not None else corpus

    def embed_fn(u: Utterance):
        return speaker_embedding(model, u.features, stats)

    def convert_fn(src: Utterance, tgt: Utterance):
        s = stats.apply(src.features) if stats is not None else src.features
        t = stats.apply(tgt.features) if stats is not None else tgt.features
        out = convert(model, s, t)
        return stats.invert(out) if stats is not None else out

    def reconstruct_fn(u: Utterance):
        f = stats.apply(u.features) if stats is not None else u.features
        with torch.no_grad():
            out = model.self_reconstruct(f).numpy()
        return stats.invert(out) if stats is not None else out

    truth_fn = None
    if isinstance(corpus, SyntheticCorpus):
        truth_fn = lambda u, speaker_id: corpus.render(u.utterance_id, speaker_id)

    return disentanglement_metrics(
        target.items, embed_fn,
        convert_fn=convert_fn if truth_fn else None,
        reconstruct_fn=reconstruct_fn if truth_fn else None,
        truth_fn=truth_fn,
        n_pairs=n_pairs, n_swap_pairs=n_swap_pairs, seed=seed,
    )


def separation_score(
    model: VoiceConversionModel,
    corpus: FeatureCorpus,
    stats: FeatureStats | None = None,
    n_pairs: int = 200,
    seed: int = 0,
) -> float:
    """Intra-minus-inter speaker cosine separation only."""
    return disentanglement_metrics(
        corpus.items,
        lambda u: speaker_embedding(model, u.features, stats),
        n_pairs=n_pairs,
        seed=seed,
    ).separation


# ---------------------------------------------------------------------------
# Codebook-size sweep

DEFAULT_SWEEP_SIZES = (128, 256, 512, 1024)


@dataclass
class SweepRow:
    codebook_size: int
    total: float
    recon: float
    latent: float
    speaker: float
    diff: float
    separation: float
    swap_ratio: float
    mcd_value: float
    error: str | None = None


@dataclass
class SweepReport:
    rows: list[SweepRow]
    fingerprint: str

    _COLS = (
        "codebook_size", "total", "recon", "latent", "speaker", "diff",
        "separation", "swap_ratio", "mcd_value", "error",
    )

    def to_tsv(self) -> str:
        lines = ["\t".join(self._COLS)]
        for row in self.rows:
            cells = []
            for col in self._COLS:
                v = getattr(row, col)
                cells.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        payload = {
            "fingerprint": self.fingerprint,
            "rows": [
                {k: clean(v) for k, v in dataclasses.asdict(row).items()}
                for row in self.rows
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _corpus_digest(corpus: FeatureCorpus) -> str:
    h = hashlib.sha256()
    for u in sorted(corpus.items, key=lambda u: (u.speaker_id, u.utterance_id)):
        h.update(u.speaker_id.encode())
        h.update(u.utterance_id.encode())
        h.update(np.ascontiguousarray(u.features, dtype="<f8").tobytes())
    return h.hexdigest()


def codebook_sweep(
    corpus: FeatureCorpus,
    sizes=DEFAULT_SWEEP_SIZES,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    weights: LossWeights | None = None,
    n_pairs: int = 200,
    n_swap_pairs: int = 20,
    seed: int = 0,
) -> SweepReport:
    """Train and score one model per codebook size, identical data and seeds.

    Rows come back sorted by size; a failing row records its error and the
    sweep continues. The fingerprint hashes every input that determines
    the result, so identical sweeps produce identical reports.
    """
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes:
        raise ConfigError("sweep needs at least one codebook size")
    if any(s < 1 for s in sizes):
        raise ConfigError("codebook sizes must be positive")
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    weights = weights or LossWeights()
    train_part, held_part = split_corpus(corpus, seed=seed)

    fingerprint = hashlib.sha256(
        json.dumps(
            {
                "sizes": sizes,
                "model": model_config.to_dict(),
                "train": train_config.to_dict(),
                "weights": weights.to_dict(),
                "seed": seed,
                "n_pairs": n_pairs,
                "n_swap_pairs": n_swap_pairs,
                "corpus": _corpus_digest(corpus),
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()

    rows: list[SweepRow] = []
    nan = float("nan")
    for size in sizes:
        cfg = dataclasses.replace(model_config, codebook_size=size)
        try:
            result = train(train_part, cfg, train_config, weights)
            model = model_from_checkpoint(result.checkpoint)
            score = evaluate_disentanglement(
                model, corpus, held_part,
                n_pairs=n_pairs, n_swap_pairs=n_swap_pairs, seed=seed,
            )
            mcd_value = _swap_mcd(model, corpus, held_part, n_swap_pairs, seed)
            last = result.reports[-1] if result.reports else None
            rows.append(
                SweepRow(
                    codebook_size=size,
                    total=last.total if last else nan,
                    recon=last.recon if last else nan,
                    latent=last.latent if last else nan,
                    speaker=last.speaker if last else nan,
                    diff=last.diff if last else nan,
                    separation=score.separation,
                    swap_ratio=score.swap_ratio,
                    mcd_value=mcd_value,
                )
            )
        except (PipelineError, ValueError) as exc:
            rows.append(
                SweepRow(
                    codebook_size=size, total=nan, recon=nan, latent=nan,
                    speaker=nan, diff=nan, separation=nan, swap_ratio=nan,
                    mcd_value=nan, error=str(exc),
                )
            )
    return SweepReport(rows=rows, fingerprint=fingerprint)


def _swap_mcd(
    model: VoiceConversionModel,
    corpus: FeatureCorpus,
    held: FeatureCorpus,
    n_swap_pairs: int,
    seed: int,
) -> float:
    """Mean MCD between converted held-out utterances and their ground truth."""
    if not isinstance(corpus, SyntheticCorpus) or corpus.feature_dim < 14:
        return float("nan")
    groups = held.by_speaker()
    speakers = sorted(groups)
    if len(speakers) < 2:
        return float("nan")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_swap_pairs):
        sa = speakers[int(rng.integers(len(speakers)))]
        sb = speakers[int(rng.integers(len(speakers) - 1))]
        if sb == sa:
            sb = speakers[-1]
        src = groups[sa][int(rng.integers(len(groups[sa])))]
        tgt = groups[sb][int(rng.integers(len(groups[sb])))]
        converted = convert(model, src.features, tgt.features)
        expected = corpus.render(src.utterance_id, sb)
        values.append(mcd(mel_cepstra(expected), mel_cepstra(converted)))
    return float(np.mean(values))
