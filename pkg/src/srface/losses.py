"""Detection and reconstruction losses and their weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .anchors import IGNORE, POSITIVE, MatchResult

PROB_EPS = 1e-6


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class FocalParams:
    """``alpha`` weights positives, ``1 - alpha`` weights negatives."""

    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise LossError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise LossError(f"gamma must be >= 0, got {self.gamma}")


@dataclass(frozen=True)
class LossReport:
    l_focal: float
    l_smooth: float
    l_sr: float
    phi: float
    l_ef: float

    def as_dict(self) -> dict:
        return {
            "l_focal": self.l_focal,
            "l_smooth": self.l_smooth,
            "l_sr": self.l_sr,
            "phi": self.phi,
            "l_ef": self.l_ef,
        }


def focal_term(p_t, alpha_t: float, gamma: float):
    """Single focal term ``-alpha_t * (1 - p_t)**gamma * log(p_t)``."""
    if isinstance(p_t, torch.Tensor):
        return -alpha_t * (1 - p_t) ** gamma * torch.log(p_t)
    return -alpha_t * (1 - p_t) ** gamma * math.log(p_t)


def _labels_of(assignment) -> torch.Tensor:
    if isinstance(assignment, MatchResult):
        return assignment.labels
    return torch.as_tensor(assignment)


def focal_loss(p: torch.Tensor, assignment, params: FocalParams = FocalParams()) -> torch.Tensor:
    """Sigmoid focal loss summed over non-ignored anchors / number of positives.

    ``assignment`` is a :class:`MatchResult` or a label tensor with the same
    shape as ``p`` (1 positive, 0 negative, -1 ignore).
    """
    labels = _labels_of(assignment)
    if labels.shape != p.shape:
        raise LossError(f"shape mismatch: p {tuple(p.shape)} vs labels {tuple(labels.shape)}")
    if torch.isnan(p).any():
        raise LossError("probability tensor contains NaN")
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    pos = labels == POSITIVE
    valid = labels != IGNORE
    p_t = torch.where(pos, p, 1 - p)
    alpha_t = torch.where(pos, torch.full_like(p, params.alpha), torch.full_like(p, 1 - params.alpha))
    terms = -alpha_t * (1 - p_t) ** params.gamma * torch.log(p_t)
    total = (terms * valid).sum()
    return total / max(int(pos.sum()), 1)


def smooth_l1_elementwise(x: torch.Tensor) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5)


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, num_positive: int | None = None) -> torch.Tensor:
    """Smooth L1 on positive-anchor offsets, rows summed, divided by positives.

    ``pred`` and ``target`` hold one 4-vector per positive anchor. The
    divisor defaults to the number of rows.
    """
    if pred.shape != target.shape:
        raise LossError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if num_positive is None:
        num_positive = pred.shape[0] if pred.dim() > 1 else 1
    return smooth_l1_elementwise(pred - target).sum() / max(int(num_positive), 1)


def sr_l1(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference over all positions and channels."""
    if recon.shape != target.shape:
        raise LossError(f"shape mismatch: {tuple(recon.shape)} vs {tuple(target.shape)}")
    return (recon - target).abs().mean()


def total_loss(l_focal, l_smooth, l_sr, phi: float) -> LossReport:
    if phi < 0:
        raise LossError(f"phi must be >= 0, got {phi}")
    parts = [float(v) for v in (l_focal, l_smooth, l_sr)]
    if not all(math.isfinite(v) for v in parts):
        raise LossError(f"non-finite loss component in {parts}")
    if any(v < 0 for v in parts):
        raise LossError(f"negative loss component in {parts}")
    f, s, r = parts
    return LossReport(f, s, r, float(phi), f + s + phi * r)


def combine(l_focal: torch.Tensor, l_smooth: torch.Tensor, l_sr: torch.Tensor, phi: float) -> torch.Tensor:
    """Differentiable counterpart of :func:`total_loss`."""
    if phi < 0:
        raise LossError(f"phi must be >= 0, got {phi}")
    return l_focal + l_smooth + phi * l_sr
