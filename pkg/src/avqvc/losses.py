"""Training objectives and the dynamic weight schedule.

Four terms make up the objective:

* reconstruction: mean absolute error between decoded and input frames;
* latent commitment: mean per-frame squared L2 gap between continuous
  latents and their codebook entries (see :mod:`.vq`);
* speaker match: mean absolute difference between the two speaker
  embeddings of a same-speaker pair, pulling them together;
* speaker contrast: negated mean absolute differences against a
  different-speaker embedding, pushing those apart. This term is
  negative by construction.

The contrast term can run away (it is unbounded below), so a one-way
schedule watches the ratio of its magnitude to the reconstruction loss
and, once it exceeds 5x, permanently rebalances the weights toward
reconstruction.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError
from .vq import latent_loss  # noqa: F401  (re-exported: part of the loss set)

# schedule constants: trigger threshold and the rebalanced weights
TRIGGER_RATIO = 5.0
TRIGGERED_SPEAKER_WEIGHT = 0.05
TRIGGERED_DIFF_WEIGHT = 0.01
TRIGGERED_RECON_WEIGHT = 2.0


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights for the four loss terms, plus the schedule latch.

    ``diff_floor`` optionally clamps the (negative) contrast term from
    below before weighting; off by default.
    """

    recon_weight: float = 1.0
    latent_weight: float = 0.02
    speaker_weight: float = 0.03
    diff_weight: float = 0.02
    triggered: bool = False
    diff_floor: float | None = None

    def __post_init__(self):
        for name in ("recon_weight", "latent_weight", "speaker_weight", "diff_weight"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ConfigError(f"{name} must be finite, got {v}")
        if self.diff_floor is not None and self.diff_floor > 0:
            raise ConfigError("diff_floor bounds a non-positive loss; it cannot be > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def _mean_abs(x):
    if isinstance(x, torch.Tensor):
        return x.abs().mean()
    return float(np.mean(np.abs(np.asarray(x, dtype=np.float64))))


def _pair_l1(predicted, target):
    if isinstance(predicted, torch.Tensor) or isinstance(target, torch.Tensor):
        return (torch.as_tensor(predicted) - torch.as_tensor(target)).abs().mean()
    a = np.asarray(predicted, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch in reconstruction loss: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def recon_loss(*pairs):
    """Sum of mean-absolute errors over (predicted, target) pairs.

    Call with one pair for a plain reconstruction loss, or with the three
    pairs of a triplet step (predicted and target alternating), in which
    case the three per-pair means are summed, not averaged.
    """
    if not pairs or len(pairs) % 2:
        raise ShapeError("recon_loss takes alternating predicted/target arguments")
    total = _pair_l1(pairs[0], pairs[1])
    for i in range(2, len(pairs), 2):
        total = total + _pair_l1(pairs[i], pairs[i + 1])
    return total


def speaker_loss(embedding_a, embedding_b):
    """Mean absolute elementwise gap between two speaker embeddings."""
    if isinstance(embedding_a, torch.Tensor):
        return (embedding_a - embedding_b).abs().mean()
    return _mean_abs(np.asarray(embedding_a) - np.asarray(embedding_b))


def diff_loss(embedding_1, embedding_2, embedding_other, floor: float | None = None):
    """Negated separation of two same-speaker embeddings from a third speaker's.

    Minimizing this pushes both members of the pair away from the other
    speaker; the value is <= 0 by construction and unbounded below, which
    is why an optional ``floor`` clamp exists (disabled by default).
    """
    if isinstance(embedding_1, torch.Tensor):
        value = -(
            (embedding_2 - embedding_other).abs().mean()
            + (embedding_1 - embedding_other).abs().mean()
        )
        return value if floor is None else torch.clamp(value, min=floor)
    value = -(
        _mean_abs(np.asarray(embedding_2) - np.asarray(embedding_other))
        + _mean_abs(np.asarray(embedding_1) - np.asarray(embedding_other))
    )
    return value if floor is None else max(value, floor)


def total_loss(recon, latent, speaker, diff, weights: LossWeights):
    """Weighted sum of the four terms; rejects non-finite parts."""
    for name, part in (("recon", recon), ("latent", latent),
                       ("speaker", speaker), ("diff", diff)):
        value = float(part.detach()) if isinstance(part, torch.Tensor) else float(part)
        if not np.isfinite(value):
            raise NumericError(f"{name} loss is non-finite: {value}")
    return (
        weights.recon_weight * recon
        + weights.latent_weight * latent
        + weights.speaker_weight * speaker
        + weights.diff_weight * diff
    )


def update_weights(report: "LossReport", weights: LossWeights) -> LossWeights:
    """Apply the one-way schedule after a step's losses are known.

    Trips when the contrast magnitude strictly exceeds ``TRIGGER_RATIO``
    times the reconstruction loss; once tripped the rebalanced weights
    stay for the rest of training. The latent weight never changes.
    """
    if weights.triggered:
        return weights
    if abs(float(report.diff)) > TRIGGER_RATIO * float(report.recon):
        return dataclasses.replace(
            weights,
            speaker_weight=TRIGGERED_SPEAKER_WEIGHT,
            diff_weight=TRIGGERED_DIFF_WEIGHT,
            recon_weight=TRIGGERED_RECON_WEIGHT,
            triggered=True,
        )
    return weights


@dataclass
class LossReport:
    """Scalar values of one step's losses (before weighting, except total)."""

    recon: float
    latent: float
    speaker: float
    diff: float
    total: float
    schedule_triggered: bool = False

    def as_log_line(self, step: int) -> str:
        return (
            f"step={step} total={self.total:.10f} recon={self.recon:.10f} "
            f"latent={self.latent:.10f} speaker={self.speaker:.10f} "
            f"diff={self.diff:.10f} triggered={int(self.schedule_triggered)}"
        )
