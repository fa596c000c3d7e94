"""Keypoint module: difference-image keypoints, the keypoint map and agent selection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .core import GaussianLatent, RandomSource, RecurrentState
from .layers import mlp, pixel_centres, scaled
from .ssm import GaussianHead, kl_diag_gaussian, reparam_sample

MASK_THRESHOLD = 0.5
KEYPOINT_WIDTH = 0.1   # std of the rendered keypoint Gaussians, normalised coords
SEPARATION_WIDTH = 0.1


# ---------------------------------------------------------------------------
# Pure operations
# ---------------------------------------------------------------------------

def aggregate_keypoint_map(feature_maps: torch.Tensor, size) -> torch.Tensor:
    """Sum ``[..., N, G, G]`` feature maps, squash, upsample bicubically and clamp.

    Returns ``[..., H, W]`` in [0, 1].
    """
    if feature_maps.dim() < 3 or feature_maps.shape[-3] < 1:
        raise ValueError("need at least one feature map")
    if isinstance(size, int):
        size = (size, size)
    g = torch.sigmoid(feature_maps.sum(-3))
    lead = g.shape[:-2]
    up = F.interpolate(g.reshape(-1, 1, *g.shape[-2:]), size=tuple(size), mode="bicubic",
                       align_corners=False)
    return up.reshape(*lead, *size).clamp(0.0, 1.0)


def overlap_counts(gamma: torch.Tensor, masks: torch.Tensor,
                   threshold: float = MASK_THRESHOLD) -> torch.Tensor:
    """Pixels where both mask k and the keypoint map exceed ``threshold``.

    ``gamma`` is ``[..., H, W]`` and ``masks`` ``[..., K, 1, H, W]``; returns ``[..., K]``.
    """
    hit = (masks[..., 0, :, :] > threshold) & (gamma.unsqueeze(-3) > threshold)
    return hit.flatten(-2).sum(-1)


def select_agent_index(gamma: torch.Tensor, masks: torch.Tensor,
                       threshold: float = MASK_THRESHOLD) -> torch.Tensor:
    """Zero-based index of the mask overlapping the keypoint map most.

    Ties go to the smallest index (``argmax`` returns the first maximum).
    """
    if gamma.shape[-2:] != masks.shape[-2:]:
        raise ValueError(f"keypoint map {tuple(gamma.shape)} and masks {tuple(masks.shape)} differ")
    counts = overlap_counts(gamma, masks, threshold)
    best = counts.max(-1, keepdim=True).values
    k = counts.shape[-1]
    idx = torch.arange(k, device=counts.device).expand_as(counts)
    return torch.where(counts == best, idx, torch.full_like(idx, k)).min(-1).values


def agent_views(z_mask: torch.Tensor, h_mask_prior: torch.Tensor, masks: torch.Tensor,
                k_agent: Union[int, torch.Tensor]):
    """Slice the agent's latent, prior-side history and mask out of the mode stacks.

    ``z_mask [B, K, Dz]``, ``h_mask_prior [B, K, Dh]``, ``masks [B, K, 1, H, W]``.
    An integer index returns views; a per-example ``[B]`` tensor gathers copies.
    """
    K = masks.shape[1]
    if isinstance(k_agent, int):
        if not 0 <= k_agent < K:
            raise IndexError(f"agent index {k_agent} out of range for K={K}")
        return z_mask[:, k_agent], h_mask_prior[:, k_agent], masks[:, k_agent]
    k_agent = k_agent.long()
    if k_agent.numel() and (k_agent.min() < 0 or k_agent.max() >= K):
        raise IndexError(f"agent index out of range for K={K}: {k_agent.tolist()}")
    rows = torch.arange(masks.shape[0], device=masks.device)
    return z_mask[rows, k_agent], h_mask_prior[rows, k_agent], masks[rows, k_agent]


def keypoint_coordinates(feature_maps: torch.Tensor):
    """Spatial soft-argmax of each map plus a presence intensity.

    Returns ``[..., N, 3]`` rows ``(x, y, intensity)`` with coordinates in [-1, 1].
    """
    G = feature_maps.shape[-1]
    grid = pixel_centres(G, G, dtype=feature_maps.dtype, device=feature_maps.device)  # [G, G, 2]
    w = torch.softmax(feature_maps.flatten(-2), dim=-1)
    xy = w @ grid.reshape(-1, 2)
    intensity = torch.sigmoid(feature_maps.flatten(-2).mean(-1, keepdim=True))
    return torch.cat([xy, intensity], -1)


def render_gaussians(keypoints: torch.Tensor, size: int, width: float = KEYPOINT_WIDTH):
    """``[..., N, 3]`` keypoints -> ``[..., N, size, size]`` intensity-scaled Gaussian blobs."""
    grid = pixel_centres(size, size, dtype=keypoints.dtype, device=keypoints.device)
    d = grid - keypoints[..., None, None, :2]
    blob = torch.exp(-(d * d).sum(-1) / (2 * width * width))
    return blob * keypoints[..., 2, None, None]


def separation_loss(keypoints: torch.Tensor, width: float = SEPARATION_WIDTH) -> torch.Tensor:
    """Pairwise Gaussian repulsion between keypoint positions, per example ``[B]``."""
    xy = keypoints[..., :2]
    d2 = ((xy[..., :, None, :] - xy[..., None, :, :]) ** 2).sum(-1)
    n = xy.shape[-2]
    off = 1 - torch.eye(n, dtype=xy.dtype, device=xy.device)
    return (torch.exp(-d2 / (2 * width * width)) * off).sum((-1, -2)) / max(n * (n - 1), 1)


def sparsity_loss(keypoints: torch.Tensor) -> torch.Tensor:
    return keypoints[..., 2].abs().mean(-1)


def heatmap_distance(gamma: torch.Tensor, agent_mask: torch.Tensor) -> torch.Tensor:
    """Pixel-wise l2 distance between ``gamma [B, H, W]`` and the agent mask ``[B, 1, H, W]``."""
    return torch.linalg.vector_norm((gamma - agent_mask[:, 0]).flatten(1), dim=-1)


def keypoint_loss(gamma: torch.Tensor, agent_mask: Optional[torch.Tensor], q: GaussianLatent,
                  p: GaussianLatent, aux: dict, cfg: ModelConfig, reduce: bool = True):
    """Per-example keypoint objective ``[B]``.

    ``aux`` supplies ``image`` (difference-image reconstruction), ``sep``,
    ``sparse`` and optionally ``kp_recon`` (keypoint reconstruction from the
    latent); each is per-example ``[B]`` or unreduced with a leading batch dim.
    ``agent_mask`` may be ``None`` before the mixture module trains. With
    ``reduce=False`` the weighted terms come back as a list of unreduced tensors.
    """
    terms = [cfg.kp_kl_scale * kl_diag_gaussian(q, p), aux["image"]]
    if "kp_recon" in aux:
        terms.append(aux["kp_recon"])
    terms += [cfg.kp_sep_scale * aux["sep"], cfg.kp_sparse_scale * aux["sparse"]]
    if agent_mask is not None:
        terms.append(cfg.heatmap_reg_scale * heatmap_distance(gamma, agent_mask))
    if not reduce:
        return terms
    return sum(t.reshape(t.shape[0], -1).sum(1) for t in terms)


# ---------------------------------------------------------------------------
# Module
# ---------------------------------------------------------------------------

@dataclass
class KeypointStep:
    feature_maps: torch.Tensor   # [B, N, G, G]
    keypoints: torch.Tensor      # [B, N, 3]
    gamma: torch.Tensor          # [B, H, W]
    z: torch.Tensor              # [B, N, Dz]
    posterior: GaussianLatent
    prior: GaussianLatent
    aux: dict


class KeypointModule(nn.Module):
    """Detector on ``o_t - o_0``, a Gaussian-blob decoder and a recurrent keypoint latent."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        N, G, H = cfg.n_keypoints, cfg.kp_grid, cfg.height
        c = scaled(64, cfg.width_mult * 2)
        layers = [nn.Conv2d(3, c, 3, padding=1), nn.CELU()]
        side = H
        while side > G:
            layers += [nn.Conv2d(c, c, 3, stride=2, padding=1), nn.CELU()]
            side //= 2
        layers.append(nn.Conv2d(c, N, 1))
        self.detector = nn.Sequential(*layers)

        dec = [nn.Conv2d(N, c, 3, padding=1), nn.CELU()]
        side = G
        while side < H:
            dec += [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                    nn.Conv2d(c, c, 3, padding=1), nn.CELU()]
            side *= 2
        dec.append(nn.Conv2d(c, 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

        hid, dz, hk = cfg.mlp_hidden, cfg.kp_latent_dim, cfg.kp_hidden_dim
        self.use_action = cfg.joint_action_conditioning
        cond_in = hk + (cfg.enhanced_action_dim if self.use_action else 0)
        self.condition = nn.Sequential(nn.Linear(cond_in, hid), nn.CELU())
        self.posterior_head = GaussianHead(hid + 3, [hid], dz)
        self.prior_net = mlp(hid, [hid], N * 2 * dz)
        self.kp_decoder = mlp(hid + dz, [hid], 3)
        self.rnn = nn.LSTMCell(N * (3 + dz), hk)

    def initial_state(self, batch: int, dtype=torch.float32, device=None) -> RecurrentState:
        return RecurrentState.zeros(batch, self.cfg.kp_hidden_dim, dtype=dtype, device=device)

    def _cond(self, h: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        x = torch.cat([h, action], -1) if self.use_action else h
        return self.condition(x)

    def detect(self, frame: torch.Tensor, first_frame: torch.Tensor) -> torch.Tensor:
        if frame.shape != first_frame.shape:
            raise ValueError(f"frame {tuple(frame.shape)} and first frame {tuple(first_frame.shape)} differ")
        return self.detector(frame - first_frame)

    def detect_keypoints(self, frame, first_frame, state: RecurrentState, action,
                         rng: RandomSource) -> KeypointStep:
        cfg = self.cfg
        B, N, dz = frame.shape[0], cfg.n_keypoints, cfg.kp_latent_dim
        maps = self.detect(frame, first_frame)
        kp = keypoint_coordinates(maps)
        gamma = aggregate_keypoint_map(maps, cfg.height)

        cond = self._cond(state.hidden, action)
        q = self.posterior_head(torch.cat([cond[:, None].expand(B, N, cond.shape[-1]), kp], -1))
        mean, raw = self.prior_net(cond).view(B, N, 2 * dz).chunk(2, -1)
        p = GaussianLatent.from_raw(mean, raw)
        z = reparam_sample(q, rng)
        kp_hat = self.kp_decoder(torch.cat([cond[:, None].expand(B, N, cond.shape[-1]), z], -1))

        blobs = render_gaussians(kp, cfg.kp_grid)
        diff_hat = self.decoder(blobs)
        diff = frame - first_frame
        aux = {
            "image": (diff_hat - diff) ** 2,
            "kp_recon": (kp_hat - kp) ** 2,
            "sep": separation_loss(kp),
            "sparse": sparsity_loss(kp),
            "diff_hat": diff_hat,
        }
        return KeypointStep(maps, kp, gamma, z, q, p, aux)

    def advance(self, step: KeypointStep, state: RecurrentState) -> RecurrentState:
        x = torch.cat([step.keypoints, step.z], -1).flatten(1)
        h, c = self.rnn(x, state.as_tuple())
        return RecurrentState(h, c)
