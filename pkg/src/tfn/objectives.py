"""Composite self-supervised loss: masked reconstruction, covariance
decorrelation and sparse-mask feature disentanglement."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class LossWeights:
    decorr: float = 0.1
    disent: float = 1.0
    alpha: float = 0.01

    def __post_init__(self):
        if min(self.decorr, self.disent, self.alpha) < 0:
            raise ValueError("loss weights must be non-negative")


def reconstruction_loss(targets, preds, target_mask) -> torch.Tensor:
    """Mean squared error over observed target entries only."""
    m = target_mask > 0
    n = int(m.sum())
    if n == 0:
        raise ValueError("no reconstruction targets")
    diff = torch.where(m, preds - targets, torch.zeros_like(preds))
    return (diff**2).sum() / n


def decorrelation_loss(Z) -> torch.Tensor:
    """Sum of squared off-diagonal entries of the population covariance of Z (N x K)."""
    Z = torch.as_tensor(Z, dtype=torch.float64)
    N = Z.shape[0]
    if N < 2:
        raise ValueError("decorrelation needs at least 2 rows")
    Zc = Z - Z.mean(dim=0, keepdim=True)
    cov = Zc.T @ Zc / N
    off = cov - torch.diag(torch.diagonal(cov))
    return (off**2).sum()


class FeatureDecoders(nn.Module):
    """One sparse-masked linear decoder per input feature: w_d . (sigmoid(m_d) * z) + b_d."""

    def __init__(self, n_targets: int, latent_dim: int, gen: torch.Generator | None = None):
        super().__init__()
        gen = gen or torch.Generator().manual_seed(0)
        bound = 1.0 / math.sqrt(latent_dim)
        self.mask_logits = nn.Parameter(torch.zeros(n_targets, latent_dim))
        self.weight = nn.Parameter((torch.rand(n_targets, latent_dim, generator=gen) * 2 - 1) * bound)
        self.bias = nn.Parameter(torch.zeros(n_targets))

    def soft_masks(self) -> torch.Tensor:
        return torch.sigmoid(self.mask_logits)

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        """(N, K) -> (N, D) predictions."""
        return (Z[:, None, :] * self.soft_masks()[None] * self.weight[None]).sum(-1) + self.bias


def disentanglement_loss(Z, features, feature_mask, decoders: FeatureDecoders, alpha: float) -> torch.Tensor:
    """Per-feature mean squared error over observed samples, averaged over
    features that have observations, plus alpha times the L1 mass of all soft masks."""
    preds = decoders(Z)
    m = feature_mask > 0
    counts = m.sum(dim=0)
    keep = counts > 0
    if not bool(keep.any()):
        raise ValueError("no observed features for disentanglement")
    sq = torch.where(m, (features - preds) ** 2, torch.zeros_like(preds)).sum(dim=0)
    per_feature = sq[keep] / counts[keep]
    return per_feature.mean() + alpha * decoders.soft_masks().abs().sum()


def total_loss(recon, decorr, disent, weights: LossWeights):
    for v in (recon, decorr, disent):
        if not math.isfinite(float(torch.as_tensor(v).detach())):
            raise FloatingPointError("non-finite loss component")
    return recon + weights.decorr * decorr + weights.disent * disent
