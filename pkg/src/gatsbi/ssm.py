"""Recurrent state-space plumbing: Gaussian heads, sampling, KL, histories, action lifting."""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn

from .core import GaussianLatent, RandomSource, RecurrentState
from .layers import mlp

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class GaussianHead(nn.Module):
    """Feed-forward map from features to a diagonal Gaussian (mean, clamped log-std)."""

    def __init__(self, in_dim: int, hidden: Sequence[int], latent_dim: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.net = mlp(in_dim, hidden, 2 * latent_dim)

    def forward(self, x: torch.Tensor) -> GaussianLatent:
        mean, raw = self.net(x).chunk(2, dim=-1)
        return GaussianLatent.from_raw(mean, raw)


class SSMCell(nn.Module):
    """LSTM cell whose input is the concatenation of a latent and a frame code."""

    def __init__(self, latent_dim: int, code_dim: int, hidden_dim: int):
        super().__init__()
        self.latent_dim = latent_dim
        self.code_dim = code_dim
        self.hidden_dim = hidden_dim
        self.cell = nn.LSTMCell(latent_dim + code_dim, hidden_dim)

    def forward(self, z_prev, frame_code, h_prev: RecurrentState) -> RecurrentState:
        return update_history(self, z_prev, frame_code, h_prev)


def update_history(cell: SSMCell, z_prev: torch.Tensor, frame_code: torch.Tensor,
                   h_prev: RecurrentState) -> RecurrentState:
    """One history step ``h_t = LSTM([z_{t-1}, code_{t-1}], h_{t-1})``."""
    if z_prev.shape[-1] != cell.latent_dim:
        raise ValueError(f"z_prev has dim {z_prev.shape[-1]}, cell expects {cell.latent_dim}")
    if frame_code.shape[-1] != cell.code_dim:
        raise ValueError(f"frame_code has dim {frame_code.shape[-1]}, cell expects {cell.code_dim}")
    if h_prev.hidden.shape[-1] != cell.hidden_dim:
        raise ValueError(f"h_prev has dim {h_prev.hidden.shape[-1]}, cell expects {cell.hidden_dim}")
    h, c = cell.cell(torch.cat([z_prev, frame_code], dim=-1), h_prev.as_tuple())
    return RecurrentState(h, c)


def kl_diag_gaussian(q: GaussianLatent, p: GaussianLatent) -> torch.Tensor:
    """KL(q || p) summed over the last dimension."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ValueError(f"KL dimension mismatch: {q.mean.shape[-1]} vs {p.mean.shape[-1]}")
    var_ratio = torch.exp(2 * (q.log_std - p.log_std))
    diff = (q.mean - p.mean) * torch.exp(-p.log_std)
    kl = (p.log_std - q.log_std) + 0.5 * (var_ratio + diff * diff) - 0.5
    return kl.sum(-1)


def reparam_sample(g: GaussianLatent, rng: RandomSource) -> torch.Tensor:
    eps = rng.normal(g.mean.shape, dtype=g.mean.dtype, device=g.mean.device)
    return g.mean + g.std * eps


def gaussian_nll(x: torch.Tensor, mu: torch.Tensor, sigma: float) -> torch.Tensor:
    """Negative log-likelihood of ``x`` under N(mu, sigma^2), summed over all elements."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if x.shape != mu.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(mu.shape)}")
    sq = (x - mu) ** 2
    return sq.sum() / (2 * sigma * sigma) + x.numel() * (math.log(sigma) + HALF_LOG_2PI)


class ActionEnhancer(nn.Module):
    """Lift the raw action to the shared enhanced-action space (two CELU hidden layers)."""

    def __init__(self, action_dim: int, out_dim: int = 32, hidden: Sequence[int] = (64, 64)):
        super().__init__()
        self.action_dim = action_dim
        self.out_dim = out_dim
        self.net = mlp(action_dim, hidden, out_dim)

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        if a.shape[-1] != self.action_dim:
            raise ValueError(f"action has length {a.shape[-1]}, expected {self.action_dim}")
        return self.net(a)


def enhance_action(enhancer: ActionEnhancer, a: torch.Tensor) -> torch.Tensor:
    return enhancer(a)


def bernoulli_kl(q_prob: torch.Tensor, p_prob: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    q = q_prob.clamp(eps, 1 - eps)
    p = p_prob.clamp(eps, 1 - eps)
    return q * (q.log() - p.log()) + (1 - q) * ((1 - q).log() - (1 - p).log())


def relaxed_bernoulli_sample(logits: torch.Tensor, temperature: float,
                             rng: RandomSource) -> torch.Tensor:
    """Concrete / relaxed-Bernoulli sample in (0, 1) from logistic noise."""
    u = rng.uniform(logits.shape, dtype=logits.dtype, device=logits.device)
    u = u.clamp(1e-6, 1 - 1e-6)
    noise = torch.log(u) - torch.log1p(-u)
    return torch.sigmoid((logits + noise) / temperature)
