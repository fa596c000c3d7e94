"""Agent-centric interaction graph over object slots.

Three feature streams feed each object's ambient interaction vector:
object-object messages over a kNN (or fully connected) graph, a spatial
constraint read from the background around the object, and an agent-object
term whose form depends on the interaction mode.
"""
from __future__ import annotations

from typing import Optional, Tuple

import torch
import torch.nn as nn

from .config import ModelConfig
from .layers import mlp, scaled
from .objects import ObjectSet, extract_glimpses


def knn_neighbors(positions: torch.Tensor, k: Optional[int], alive: Optional[torch.Tensor] = None,
                  distances: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Neighbour indices ``[..., I, k']`` and validity flags for each node.

    ``k=None`` selects every other node. ``k`` is clipped to ``I - 1``. Ties go
    to the smaller index. Dead nodes (``alive`` False) are never neighbours, so
    their slots come back flagged invalid. ``distances`` overrides the
    Euclidean metric.
    """
    I = positions.shape[-2]
    kk = I - 1 if k is None else min(k, I - 1)
    if distances is None:
        diff = positions[..., :, None, :] - positions[..., None, :, :]
        distances = (diff * diff).sum(-1)
    d = distances.clone()
    eye = torch.eye(I, dtype=torch.bool, device=d.device)
    invalid = eye.expand_as(d)
    if alive is not None:
        invalid = invalid | ~alive[..., None, :]
    d = d.masked_fill(invalid, float("inf"))
    order = torch.argsort(d, dim=-1, stable=True)[..., :kk]
    valid = torch.isfinite(d.gather(-1, order))
    return order, valid


def gather_neighbors(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``x [B, I, D]``, ``idx [B, I, k]`` -> ``[B, I, k, D]``."""
    B, I, k = idx.shape
    flat = idx.reshape(B, I * k, 1).expand(B, I * k, x.shape[-1])
    return x.gather(1, flat).reshape(B, I, k, x.shape[-1])


class InteractionModule(nn.Module):
    def __init__(self, cfg: ModelConfig, object_dim: int):
        super().__init__()
        self.cfg = cfg
        hid, d = cfg.mlp_hidden, cfg.interaction_dim
        agent_dim = cfg.z_mask_dim + cfg.h_mask_dim
        self.object_dim = object_dim
        self.agent_dim = agent_dim
        self.rel_embed = mlp(2, [hid], cfg.rel_embed_dim)
        self.f_obj = mlp(2 * object_dim + cfg.rel_embed_dim, [hid], d)
        self.rel_score = nn.Linear(cfg.rel_embed_dim, 1)

        c = scaled(32, cfg.width_mult * 2)
        layers, side, c_in = [], cfg.crop_size, 3
        while side > 2:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.CELU()]
            c_in, side = c, side // 2
        self.crop_encoder = nn.Sequential(*layers, nn.Flatten(), nn.Linear(c_in * side * side, hid))
        self.f_static = mlp(hid + 2, [hid], d)

        self.f_local = mlp(agent_dim + object_dim, [hid], d)
        self.f_weight = mlp(cfg.enhanced_action_dim + cfg.h_mask_dim + 4 + cfg.h_obj_dim, [hid], d)
        self.f_temporal_local = mlp(d, [hid], d)
        self.f_temporal_global = mlp(agent_dim, [hid], d)

        amb_in = d if cfg.ambient_fusion == "sum" else 3 * d
        self.ambient = mlp(amb_in, [hid, hid], cfg.ambient_dim)

    # -- terms -------------------------------------------------------------------
    def neighbors(self, objects: ObjectSet):
        cfg = self.cfg
        distances = None
        if cfg.knn_distance == "learned":
            rel = objects.center[:, None, :, :] - objects.center[:, :, None, :]
            distances = -self.rel_score(self.rel_embed(rel))[..., 0]
        return knn_neighbors(objects.center, cfg.k_nn, objects.alive, distances)

    def object_object(self, u: torch.Tensor, positions: torch.Tensor, idx: torch.Tensor,
                      valid: torch.Tensor) -> torch.Tensor:
        """``e^o_i = sum_{j in N(i)} f^o(u_i, u_j, embed(p_j - p_i))``."""
        B, I, k = idx.shape
        if k == 0:
            return u.new_zeros(B, I, self.cfg.interaction_dim)
        u_j = gather_neighbors(u, idx)
        rel = gather_neighbors(positions, idx) - positions[:, :, None]
        u_i = u[:, :, None].expand(B, I, k, u.shape[-1])
        msg = self.f_obj(torch.cat([u_i, u_j, self.rel_embed(rel)], -1))
        return (msg * valid[..., None].to(msg.dtype)).sum(2)

    def crop_background(self, mu_mix: torch.Tensor, scale: torch.Tensor, center: torch.Tensor):
        """Window of twice the object's box around it, resampled to ``crop_size``."""
        return extract_glimpses(mu_mix, 2 * scale, center, self.cfg.crop_size)

    def spatial_constraint(self, mu_mix: torch.Tensor, scale: torch.Tensor,
                           center: torch.Tensor) -> torch.Tensor:
        """Encode the background around each object together with its box size.

        The box centre is deliberately not an input, so the term depends on
        position only through what the crop sees.
        """
        B, I = scale.shape[:2]
        crops = self.crop_background(mu_mix, scale, center)
        feat = self.crop_encoder(crops.flatten(0, 1)).unflatten(0, (B, I))
        return self.f_static(torch.cat([feat, scale], -1))

    def agent_object_local(self, agent: torch.Tensor, u: torch.Tensor, action: torch.Tensor,
                           h_agent: torch.Tensor, where: torch.Tensor, h_obj: torch.Tensor,
                           weight_override: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, I = u.shape[:2]
        u_r = agent[:, None].expand(B, I, agent.shape[-1])
        u_loc = self.f_local(torch.cat([u_r, u], -1))
        if weight_override is None:
            pos_r = torch.cat([action, h_agent], -1)[:, None].expand(B, I, -1)
            w = torch.sigmoid(self.f_weight(torch.cat([pos_r, where, h_obj], -1)))
        else:
            w = weight_override
        return self.f_temporal_local(w * u_loc)

    def agent_object_global(self, agent: torch.Tensor, num_objects: int) -> torch.Tensor:
        e = self.f_temporal_global(agent)
        return e[:, None].expand(e.shape[0], num_objects, e.shape[-1])

    # -- total ---------------------------------------------------------------------
    def forward(self, objects: ObjectSet, agent: torch.Tensor, action: torch.Tensor,
                mu_mix: torch.Tensor, mode: Optional[str] = None) -> torch.Tensor:
        """Ambient interaction vector ``[B, I, ambient_dim]`` for every slot."""
        cfg = self.cfg
        mode = mode or cfg.inter_mode
        if agent.shape[-1] != self.agent_dim:
            raise ValueError(f"agent feature has dim {agent.shape[-1]}, expected {self.agent_dim}")
        u = objects.features()
        if u.shape[-1] != self.object_dim:
            raise ValueError(f"object feature has dim {u.shape[-1]}, expected {self.object_dim}")
        I = u.shape[1]
        idx, valid = self.neighbors(objects)
        e_o = self.object_object(u, objects.center, idx, valid)
        e_s = self.spatial_constraint(mu_mix, objects.scale, objects.center)
        if mode == "INTER1":
            e_t = torch.zeros_like(e_o)
        elif mode == "INTER2":
            h_agent = agent[:, cfg.z_mask_dim:]
            e_t = self.agent_object_local(agent, u, action, h_agent, objects.where, objects.h)
        elif mode == "INTER3":
            e_t = self.agent_object_global(agent, I)
        else:
            raise ValueError(f"unknown interaction mode {mode!r}")
        return self.fuse(e_o, e_s, e_t)

    def fuse(self, e_o, e_s, e_t):
        if self.cfg.ambient_fusion == "sum":
            return self.ambient(e_o + e_s + e_t)
        return self.ambient(torch.cat([e_o, e_s, e_t], -1))


def total_interaction(module: InteractionModule, objects: ObjectSet, agent, action, mu_mix, mode=None):
    return module(objects, agent, action, mu_mix, mode)
