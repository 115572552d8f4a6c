"""Cross-entropy, margin triplet loss and the triplet weight schedule."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError, ValidationError


@dataclass
class LossConfig:
    margin_mu: float = 1.5
    lambda_min: float = 2.0
    lambda_max: float = 5.0

    def validate(self) -> None:
        if not self.margin_mu > 0:
            raise ValidationError(f"margin must be > 0, got {self.margin_mu}")
        if not self.lambda_max >= self.lambda_min >= 0:
            raise ValidationError(
                f"need lambda_max >= lambda_min >= 0, got {self.lambda_min}, {self.lambda_max}")


@dataclass
class TripletBatch:
    anchors: torch.Tensor     # (B, d) visual embeddings
    positives: torch.Tensor   # (B, d) true-class text embeddings
    negatives: torch.Tensor   # (B, d) mined negative text embeddings

    def __post_init__(self):
        shapes = {tuple(self.anchors.shape), tuple(self.positives.shape),
                  tuple(self.negatives.shape)}
        if len(shapes) != 1:
            raise ShapeError(f"triplet members have mismatched shapes {shapes}")


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch-mean of ``-log softmax(logits)[target]`` via log-sum-exp."""
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(target, dtype=torch.long)
    if logits.dim() == 1:
        logits, target = logits.unsqueeze(0), target.reshape(1)
    if not torch.isfinite(logits).all():
        raise ValidationError("non-finite logits")
    if (target >= logits.shape[1]).any() or (target < 0).any():
        raise ValidationError(f"target out of range for {logits.shape[1]} classes")
    return F.cross_entropy(logits, target)


def triplet_distances(batch: TripletBatch) -> tuple[torch.Tensor, torch.Tensor]:
    d_pos = torch.linalg.vector_norm(batch.anchors - batch.positives, dim=-1)
    d_neg = torch.linalg.vector_norm(batch.anchors - batch.negatives, dim=-1)
    return d_pos, d_neg


def triplet_loss(batch: TripletBatch, mu: float = 1.5) -> torch.Tensor:
    """Mean of ``max(|v - t+| - |v - t-| + mu, 0)`` over the batch."""
    d_pos, d_neg = triplet_distances(batch)
    return torch.relu(d_pos - d_neg + mu).mean()


def lambda_at(step: int, total_steps: int, cfg: LossConfig) -> float:
    """Linear ramp from ``lambda_min`` (step 0) to ``lambda_max`` (step ``total_steps``)."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return float(cfg.lambda_max)
    return cfg.lambda_min + (cfg.lambda_max - cfg.lambda_min) * step / total_steps


def stage2_loss(logits: torch.Tensor, target: torch.Tensor, triplet: TripletBatch,
                lam: float, cfg: LossConfig) -> torch.Tensor:
    """Cross-entropy plus ``lam`` times the triplet term."""
    if lam < 0:
        raise ValidationError(f"lambda must be >= 0, got {lam}")
    ce = cross_entropy(logits, target)
    if lam == 0:
        return ce
    return ce + lam * triplet_loss(triplet, cfg.margin_mu)
