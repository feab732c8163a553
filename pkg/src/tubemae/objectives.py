"""Pre-training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from tubemae.errors import DegenerateMaskError, NumericsError, ShapeError

NORM_EPS = 1e-6


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    distill: float
    lambda_recon: float = 1.0
    lambda_distill: float = 0.05
    total: float = 0.0

    def as_dict(self) -> dict:
        return {"recon": self.recon, "distill": self.distill, "total": self.total}


def normalize_targets(cubes: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Standardize each cube vector on its own: (x - mean) / (std + eps).

    Uses the population std. Cubes with std <= eps map to zeros.
    """
    mean = cubes.mean(dim=-1, keepdim=True)
    centred = cubes - mean
    std = centred.pow(2).mean(dim=-1, keepdim=True).sqrt()
    out = centred / (std + eps)
    # written so a NaN std propagates instead of being zeroed
    return torch.where(std <= eps, torch.zeros_like(out), out)


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor, token_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked tokens (all channels); visible tokens are ignored.

    ``token_mask`` is boolean with the leading shape of ``pred`` minus the
    channel axis, True where masked.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    token_mask = torch.as_tensor(token_mask, dtype=torch.bool, device=pred.device)
    if token_mask.shape != pred.shape[:-1]:
        raise ShapeError(f"mask {tuple(token_mask.shape)} does not match tokens {tuple(pred.shape[:-1])}")
    n = int(token_mask.sum())
    if n == 0:
        raise DegenerateMaskError("no masked tokens: reconstruction loss undefined")
    sq = (pred - target).pow(2).mean(dim=-1)
    return (sq * token_mask).sum() / n


def smooth_l1(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = (pred - target).abs()
    elem = torch.where(x < beta, 0.5 * x * x / beta, x - 0.5 * beta)
    return elem.mean()


def total_loss(recon: float, distill: float, lambda_recon: float = 1.0, lambda_distill: float = 0.05) -> LossBreakdown:
    recon, distill = float(recon), float(distill)
    if not (math.isfinite(recon) and math.isfinite(distill)):
        raise NumericsError(f"non-finite loss component (recon={recon}, distill={distill})")
    return LossBreakdown(recon, distill, lambda_recon, lambda_distill, lambda_recon * recon + lambda_distill * distill)
