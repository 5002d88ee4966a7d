"""Triplet sampling, the optimization loop, and checkpointing.

A training step consumes a batch of triplets: two different utterances of
one speaker and one utterance of another. All three are pushed through
the encoder in a single batched forward; the same-speaker pair is decoded
with swapped speaker embeddings (the content of one plus the residual of
the other), the third utterance self-reconstructs. Resuming from a
checkpoint reproduces the exact step sequence the uninterrupted run would
have taken: the sampler's RNG state, optimizer moments, and the schedule
latch all travel inside the checkpoint.

Checkpoints use a purpose-built binary container (json metadata plus raw
float64 arrays, crc-checked) because the save -> load -> save cycle must
be byte-identical; pickle-based formats do not guarantee that.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .errors import CheckpointError, CompatibilityError, ConfigError, DataError, NumericError
from .frontend import FeatureCorpus, FeatureStats
from .frontend import FrontendConfig
from .losses import LossReport, LossWeights
from .model import ModelConfig, VoiceConversionModel, build_model

TRIPLET_MODE = "avqvc"
BASELINE_MODE = "vqvc"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    ``steps`` is the global step target: resuming a run that already did
    600 of 1000 steps performs 400 more, not another 1000. ``mode``
    selects the full triplet objective ("avqvc") or the plain
    reconstruction baseline ("vqvc": no speaker terms, no schedule).
    """

    steps: int = 1000
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    segment_len: int = 128
    seed: int = 0
    grad_clip: float = 1.0
    log_every: int = 10
    checkpoint_every: int = 0
    mode: str = TRIPLET_MODE

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.segment_len < 1:
            raise ConfigError("steps must be >= 0, batch_size and segment_len >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.mode not in (TRIPLET_MODE, BASELINE_MODE):
            raise ConfigError(f"mode must be {TRIPLET_MODE!r} or {BASELINE_MODE!r}")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0 (0 disables clipping)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TripletBatch:
    """Stacked crops: first/second share a speaker, third does not."""

    first: torch.Tensor  # (B, T, F)
    second: torch.Tensor  # (B, T, F), same speaker as first, different utterance
    other: torch.Tensor  # (B, T, F), different speaker


def _crop(features: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    t = features.shape[0]
    start = int(rng.integers(0, t - length + 1))
    return features[start : start + length]


class TripletSampler:
    """Draws same-speaker pairs plus a contrasting speaker, with random crops."""

    def __init__(self, corpus: FeatureCorpus, batch_size: int, segment_len: int):
        groups = corpus.by_speaker()
        if len(groups) < 2:
            raise DataError(
                f"triplet training needs >= 2 speakers, corpus has {len(groups)}"
            )
        thin = sorted(s for s, us in groups.items() if len(us) < 2)
        if thin:
            raise DataError(
                "triplet training needs >= 2 utterances per speaker; "
                "speakers with fewer: " + ", ".join(thin)
            )
        self.speakers = sorted(groups)
        self.groups = {s: sorted(groups[s], key=lambda u: u.utterance_id) for s in groups}
        self.batch_size = batch_size
        # uniform crop length across the batch: the requested segment,
        # shortened if any utterance is shorter
        self.crop_len = min(segment_len, min(u.features.shape[0] for u in corpus.items))

    def sample(self, rng: np.random.Generator) -> TripletBatch:
        firsts, seconds, others = [], [], []
        for _ in range(self.batch_size):
            a = self.speakers[int(rng.integers(len(self.speakers)))]
            pool = self.groups[a]
            i = int(rng.integers(len(pool)))
            j = int(rng.integers(len(pool) - 1))
            if j >= i:
                j += 1
            b = self.speakers[int(rng.integers(len(self.speakers) - 1))]
            if b == a:
                b = self.speakers[-1]
            u3 = self.groups[b][int(rng.integers(len(self.groups[b])))]
            firsts.append(_crop(pool[i].features, self.crop_len, rng))
            seconds.append(_crop(pool[j].features, self.crop_len, rng))
            others.append(_crop(u3.features, self.crop_len, rng))
        to_t = lambda xs: torch.from_numpy(np.stack(xs).astype(np.float64))
        return TripletBatch(first=to_t(firsts), second=to_t(seconds), other=to_t(others))


class SingleSampler:
    """Uniform utterance crops, for the plain-reconstruction baseline."""

    def __init__(self, corpus: FeatureCorpus, batch_size: int, segment_len: int):
        self.items = sorted(corpus.items, key=lambda u: (u.speaker_id, u.utterance_id))
        self.batch_size = batch_size
        self.crop_len = min(segment_len, min(u.features.shape[0] for u in corpus.items))

    def sample(self, rng: np.random.Generator) -> torch.Tensor:
        crops = [
            _crop(self.items[int(rng.integers(len(self.items)))].features, self.crop_len, rng)
            for _ in range(self.batch_size)
        ]
        return torch.from_numpy(np.stack(crops).astype(np.float64))


def _scalar(t: torch.Tensor) -> float:
    return float(t.detach())


def triplet_losses(model: VoiceConversionModel, batch: TripletBatch, weights: LossWeights):
    """Total loss tensor and scalar report for one triplet batch."""
    b = batch.first.shape[0]
    features = torch.cat([batch.first, batch.second, batch.other], dim=0)
    latents, _, quantized, content, speaker = model.decompose_batch(features)
    s1, s2, s3 = speaker[:b], speaker[b : 2 * b], speaker[2 * b :]

    # swap speaker residuals within the same-speaker pair; the contrasting
    # utterance reconstructs with its own
    mixed = torch.cat([s2, s1, s3], dim=0)
    decoded = model.decode_batch(content, mixed)

    recon = L.recon_loss(
        decoded[:b], batch.first,
        decoded[b : 2 * b], batch.second,
        decoded[2 * b :], batch.other,
    )
    latent = L.latent_loss(latents, quantized)
    speaker_l = L.speaker_loss(s2, s1)
    diff_l = L.diff_loss(s1, s2, s3, floor=weights.diff_floor)
    total = L.total_loss(recon, latent, speaker_l, diff_l, weights)
    report = LossReport(
        recon=_scalar(recon), latent=_scalar(latent), speaker=_scalar(speaker_l),
        diff=_scalar(diff_l), total=_scalar(total),
    )
    return total, report


def baseline_losses(model: VoiceConversionModel, features: torch.Tensor, weights: LossWeights):
    """Self-path reconstruction + commitment only; speaker terms stay at zero."""
    latents, _, quantized, content, speaker = model.decompose_batch(features)
    decoded = model.decode_batch(content, speaker)
    recon = L.recon_loss(decoded, features)
    latent = L.latent_loss(latents, quantized)
    total = weights.recon_weight * recon + weights.latent_weight * latent
    report = LossReport(
        recon=_scalar(recon), latent=_scalar(latent), speaker=0.0, diff=0.0,
        total=_scalar(total),
    )
    return total, report


def train_step(
    model: VoiceConversionModel,
    optimizer: torch.optim.Optimizer,
    batch,
    weights: LossWeights,
    config: TrainConfig,
) -> tuple[LossReport, LossWeights]:
    """One optimization step; returns the report and the post-step weights.

    The step's losses are computed and applied under the weights passed
    in; the schedule update happens afterwards and only affects future
    steps. The report carries the post-update latch state.
    """
    if config.mode == BASELINE_MODE:
        total, report = baseline_losses(model, batch, weights)
    else:
        total, report = triplet_losses(model, batch, weights)
    if not np.isfinite(report.total):
        raise NumericError(f"non-finite loss {report.total} at training step")
    optimizer.zero_grad()
    total.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    if config.mode == TRIPLET_MODE:
        weights = L.update_weights(report, weights)
    report.schedule_triggered = weights.triggered
    return report, weights


# ---------------------------------------------------------------------------
# Checkpoint container

_MAGIC = b"AVQCKPT1"
_FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Complete training state: everything needed to resume bit-for-bit.

    Carries the frontend configuration and normalization statistics of
    the corpus it was trained on (when applicable) so inference can
    verify compatibility and invert the normalization.
    """

    model_config: ModelConfig
    train_config: TrainConfig
    weights: LossWeights
    step: int
    params: dict[str, np.ndarray]
    adam_exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    adam_exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: dict[str, float] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    feature_stats: FeatureStats | None = None
    frontend_config: FrontendConfig | None = None


def _flatten_arrays(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, arr in ckpt.params.items():
        arrays["param." + name] = arr
    for name, arr in ckpt.adam_exp_avg.items():
        arrays["adam.exp_avg." + name] = arr
    for name, arr in ckpt.adam_exp_avg_sq.items():
        arrays["adam.exp_avg_sq." + name] = arr
    for name, v in ckpt.adam_step.items():
        arrays["adam.step." + name] = np.asarray(float(v))
    if ckpt.feature_stats is not None:
        arrays["stats.mean"] = ckpt.feature_stats.mean
        arrays["stats.std"] = ckpt.feature_stats.std
    return arrays


def _pack(ckpt: Checkpoint) -> bytes:
    arrays = _flatten_arrays(ckpt)
    meta = {
        "format_version": _FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "loss_weights": ckpt.weights.to_dict(),
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "frontend_config": (
            None if ckpt.frontend_config is None else ckpt.frontend_config.to_dict()
        ),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_MAGIC, struct.pack("<I", _FORMAT_VERSION)]
    parts.append(struct.pack("<Q", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Write atomically; an interrupted save never leaves a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_pack(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    blob = path.read_bytes()
    if len(blob) < len(_MAGIC) + 16 or blob[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise CheckpointError(f"{path} failed its integrity check (corrupt or truncated)")
    off = len(_MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack_from("<Q", body, off)
    off += 8
    meta = json.loads(body[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (n_arrays,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, off) if ndim else ()
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(
            body, dtype="<f8", count=count, offset=off
        ).reshape(shape).copy()
        off += 8 * count

    params, exp_avg, exp_avg_sq, adam_step = {}, {}, {}, {}
    stats_arrays = {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            params[name[len("param.") :]] = arr
        elif name.startswith("adam.exp_avg_sq."):
            exp_avg_sq[name[len("adam.exp_avg_sq.") :]] = arr
        elif name.startswith("adam.exp_avg."):
            exp_avg[name[len("adam.exp_avg.") :]] = arr
        elif name.startswith("adam.step."):
            # scalars round-trip as shape (1,): ascontiguousarray promotes 0-d
            adam_step[name[len("adam.step.") :]] = float(arr.reshape(-1)[0])
        elif name.startswith("stats."):
            stats_arrays[name[len("stats.") :]] = arr
        else:
            raise CheckpointError(f"{path}: unknown array {name!r}")
    stats = None
    if stats_arrays:
        stats = FeatureStats(mean=stats_arrays["mean"], std=stats_arrays["std"])
    fc = meta.get("frontend_config")
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        train_config=TrainConfig.from_dict(meta["train_config"]),
        weights=LossWeights.from_dict(meta["loss_weights"]),
        step=int(meta["step"]),
        params=params,
        adam_exp_avg=exp_avg,
        adam_exp_avg_sq=exp_avg_sq,
        adam_step=adam_step,
        rng_state=meta["rng_state"],
        feature_stats=stats,
        frontend_config=None if fc is None else FrontendConfig.from_dict(fc),
    )


def export_codebook(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Dump the learned codebook as a plain (K, D) array file for inspection."""
    np.save(path, ckpt.params["codebook"])


def model_from_checkpoint(ckpt: Checkpoint) -> VoiceConversionModel:
    model = build_model(ckpt.model_config)
    expected = set(model.state_dict())
    if set(ckpt.params) != expected:
        raise CompatibilityError(
            "checkpoint parameters do not match the configured architecture"
        )
    model.load_state_dict({k: torch.from_numpy(v) for k, v in ckpt.params.items()})
    return model


def build_optimizer(
    model: VoiceConversionModel, config: TrainConfig, ckpt: Checkpoint | None = None
) -> torch.optim.Optimizer:
    opt = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )
    if ckpt is not None and ckpt.adam_exp_avg:
        names = [name for name, _ in model.named_parameters()]
        sd = opt.state_dict()
        sd["state"] = {
            i: {
                "step": torch.tensor(ckpt.adam_step[name], dtype=torch.float32),
                "exp_avg": torch.from_numpy(ckpt.adam_exp_avg[name].copy()),
                "exp_avg_sq": torch.from_numpy(ckpt.adam_exp_avg_sq[name].copy()),
            }
            for i, name in enumerate(names)
        }
        opt.load_state_dict(sd)
    return opt


def snapshot(
    model: VoiceConversionModel,
    optimizer: torch.optim.Optimizer,
    train_config: TrainConfig,
    weights: LossWeights,
    step: int,
    rng: np.random.Generator,
    feature_stats: FeatureStats | None = None,
    frontend_config: FrontendConfig | None = None,
) -> Checkpoint:
    """Capture live training state into a serializable checkpoint."""
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    exp_avg, exp_avg_sq, adam_step = {}, {}, {}
    names = [name for name, _ in model.named_parameters()]
    state = optimizer.state_dict()["state"]
    for i, name in enumerate(names):
        if i in state:
            exp_avg[name] = state[i]["exp_avg"].detach().cpu().numpy().copy()
            exp_avg_sq[name] = state[i]["exp_avg_sq"].detach().cpu().numpy().copy()
            adam_step[name] = float(state[i]["step"])
    return Checkpoint(
        model_config=model.config,
        train_config=train_config,
        weights=weights,
        step=step,
        params=params,
        adam_exp_avg=exp_avg,
        adam_exp_avg_sq=exp_avg_sq,
        adam_step=adam_step,
        rng_state=rng.bit_generator.state,
        feature_stats=feature_stats,
        frontend_config=frontend_config,
    )


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_lines: list[str]
    reports: list[LossReport]


_RESUME_FIXED = ("batch_size", "learning_rate", "beta1", "beta2", "segment_len", "seed", "mode")


def train(
    corpus: FeatureCorpus,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    weights: LossWeights | None = None,
    resume_from: Checkpoint | str | os.PathLike | None = None,
    checkpoint_path: str | os.PathLike | None = None,
    feature_stats: FeatureStats | None = None,
    frontend_config: FrontendConfig | None = None,
    log_fn=None,
) -> TrainResult:
    """Run training to the global step target, fresh or resumed.

    On resume the checkpoint's optimization hyperparameters are
    authoritative; a passed ``train_config`` may only raise the step
    target (and adjust logging cadence). Loss logs are recorded for every
    step so two runs can be compared line by line.
    """
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        if train_config is not None:
            for f in _RESUME_FIXED:
                if getattr(train_config, f) != getattr(ckpt.train_config, f):
                    raise CompatibilityError(
                        f"cannot change {f} when resuming "
                        f"({getattr(train_config, f)!r} vs checkpoint "
                        f"{getattr(ckpt.train_config, f)!r})"
                    )
            config = train_config
        else:
            config = ckpt.train_config
        if model_config is not None and model_config != ckpt.model_config:
            raise CompatibilityError("cannot change the architecture when resuming")
        model = model_from_checkpoint(ckpt)
        optimizer = build_optimizer(model, config, ckpt)
        current_weights = ckpt.weights
        rng = np.random.default_rng(0)
        rng.bit_generator.state = ckpt.rng_state
        start_step = ckpt.step
        stats = ckpt.feature_stats if feature_stats is None else feature_stats
        fc = ckpt.frontend_config if frontend_config is None else frontend_config
    else:
        config = train_config or TrainConfig()
        model = build_model(model_config or ModelConfig())
        optimizer = build_optimizer(model, config)
        current_weights = weights or LossWeights()
        rng = np.random.default_rng(config.seed)
        start_step = 0
        stats = feature_stats
        fc = frontend_config

    if corpus.feature_dim != model.config.n_mels:
        raise CompatibilityError(
            f"corpus features have dim {corpus.feature_dim}, "
            f"model expects {model.config.n_mels}"
        )

    if config.mode == BASELINE_MODE:
        sampler = SingleSampler(corpus, config.batch_size, config.segment_len)
    else:
        sampler = TripletSampler(corpus, config.batch_size, config.segment_len)

    log_lines: list[str] = []
    reports: list[LossReport] = []
    for step in range(start_step + 1, config.steps + 1):
        batch = sampler.sample(rng)
        report, current_weights = train_step(model, optimizer, batch, current_weights, config)
        reports.append(report)
        line = report.as_log_line(step)
        log_lines.append(line)
        if log_fn is not None and (step % config.log_every == 0 or step == config.steps):
            log_fn(line)
        if (
            checkpoint_path is not None
            and config.checkpoint_every > 0
            and step % config.checkpoint_every == 0
            and step < config.steps
        ):
            save_checkpoint(
                snapshot(model, optimizer, config, current_weights, step, rng, stats, fc),
                checkpoint_path,
            )

    final = snapshot(
        model, optimizer, config, current_weights,
        max(start_step, config.steps), rng, stats, fc,
    )
    if checkpoint_path is not None:
        save_checkpoint(final, checkpoint_path)
    return TrainResult(checkpoint=final, log_lines=log_lines, reports=reports)
