"""Full model: mixture, keypoint and object modules driven over a sequence."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional

import torch
import torch.nn as nn

from .config import ModelConfig
from .core import RandomSource, RecurrentState
from .interaction import InteractionModule
from .keypoint import KeypointModule, KeypointStep, agent_views, keypoint_loss, select_agent_index
from .mixture import MixtureModule, MixtureState, MixtureStep, salient_residual
from .objects import ObjectModule, ObjectSet, ObjectStep, compose_full, empty_objects
from .ssm import HALF_LOG_2PI, ActionEnhancer

ALL_MODULES = frozenset({"keypoint", "mixture", "objects"})


@dataclass
class ModelState:
    mixture: MixtureState
    keypoint: RecurrentState
    objects: ObjectSet


@dataclass
class StepRecord:
    posterior: bool
    mixture: MixtureStep
    mu: torch.Tensor                       # full reconstruction / prediction [B, 3, H, W]
    k_agent: torch.Tensor                  # [B]
    keypoint: Optional[KeypointStep] = None
    objects: Optional[ObjectStep] = None
    losses: Dict[str, torch.Tensor] = field(default_factory=dict)   # per-example [B]
    # unreduced contributions (leading batch dim) whose sums make up ``losses``
    pieces: Dict[str, List[torch.Tensor]] = field(default_factory=dict)

    def export(self, b: int = 0) -> Dict[str, torch.Tensor]:
        out = self.mixture.decomposition(b)
        if self.objects is not None:
            out.update(self.objects.export(b))
        if self.keypoint is not None:
            out["kp_map"] = self.keypoint.gamma[b].detach()
        return out


@dataclass
class SequenceOutput:
    records: List[StepRecord]
    losses: Dict[str, torch.Tensor]        # scalar per term, summed over time and batch
    total: torch.Tensor
    recon_mse: float

    def pieces(self) -> List[torch.Tensor]:
        """Every unreduced loss contribution; their sums add up to ``total``."""
        return [p for r in self.records for v in r.pieces.values() for p in v]

    @property
    def predictions(self) -> torch.Tensor:
        """``[B, T, 3, H, W]`` reconstructions followed by predictions."""
        return torch.stack([r.mu for r in self.records], 1)


def majority_vote(indices: torch.Tensor, K: int) -> torch.Tensor:
    """Most frequent index per column of ``[T, B]``; ties go to the smaller index."""
    counts = torch.nn.functional.one_hot(indices.long(), K).sum(0)   # [B, K]
    return counts.argmax(-1)


class GatsbiModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.action_enhancer = ActionEnhancer(cfg.action_dim, cfg.enhanced_action_dim, cfg.action_hidden)
        self.mixture = MixtureModule(cfg)
        self.keypoint = KeypointModule(cfg)
        self.objects = ObjectModule(cfg)
        obj_dim = self.objects.latent_dim + cfg.h_obj_dim
        self.interaction = InteractionModule(cfg, obj_dim)

    def module_groups(self) -> Dict[str, List[nn.Module]]:
        """Parameter groups gated by the training schedule."""
        return {
            "keypoint": [self.keypoint],
            "mixture": [self.mixture],
            "objects": [self.objects, self.interaction],
        }

    def initial_state(self, batch: int, dtype=torch.float32, device=None) -> ModelState:
        return ModelState(
            mixture=self.mixture.initial_state(batch, dtype, device),
            keypoint=self.keypoint.initial_state(batch, dtype, device),
            objects=empty_objects(self.cfg, batch, dtype, device),
        )

    def enhanced_actions(self, actions: torch.Tensor) -> torch.Tensor:
        """``[B, T, A]`` raw actions -> ``[B, T, D]`` inputs for each step.

        Step t is conditioned on the enhanced action of step t-1; step 0 reuses
        the first action.
        """
        a_hat = self.action_enhancer(actions)
        return torch.cat([a_hat[:, :1], a_hat[:, :-1]], 1)

    def step(self, frame: Optional[torch.Tensor], first_frame: torch.Tensor, action: torch.Tensor,
             state: ModelState, rng: RandomSource, active: FrozenSet[str] = ALL_MODULES,
             alpha_override: Optional[float] = None,
             k_agent: Optional[torch.Tensor] = None, t: int = 0):
        """Advance one step. ``frame=None`` generates from the prior."""
        cfg = self.cfg
        posterior = frame is not None

        def gated(name):
            return contextlib.nullcontext() if name in active else torch.no_grad()

        with gated("mixture"):
            mix = self.mixture.step(frame, action, state.mixture, rng)

        need_agent = "objects" in active or "keypoint" in active
        kp = None
        if posterior and need_agent:
            with gated("keypoint"):
                kp = self.keypoint.detect_keypoints(frame, first_frame, state.keypoint, action, rng)
            if k_agent is None:
                k_agent = select_agent_index(kp.gamma.detach(), mix.masks.detach())
        if k_agent is None:
            k_agent = torch.zeros(action.shape[0], dtype=torch.long, device=action.device)
        z_r, h_r, pi_r = agent_views(mix.masks_latents.z, state.mixture.stacked("mask_prior"),
                                     mix.masks, k_agent)

        obj_step = None
        new_objects = state.objects
        mu = mix.mu_mix
        if "objects" in active:
            agent = torch.cat([z_r, h_r], -1)
            inter = self.interaction(state.objects, agent, action, mix.mu_mix)
            salient = salient_residual(frame, mix.mu_mix) if posterior else None
            if t > 0:
                propagated, kl_prop = self.objects.propagate(state.objects, inter, frame, salient, rng)
            else:
                propagated, kl_prop = state.objects, torch.zeros_like(mix.reg)
            kl_obj = kl_prop
            discovered = propagated
            if posterior:
                discovered, kl_disc = self.objects.discover(frame, salient, propagated, rng)
                new_objects = self.objects.merge(propagated, discovered)
                kl_obj = kl_obj + kl_disc
            else:
                new_objects = propagated
            composite = self.objects.render(new_objects)
            mu = compose_full(composite, mix.mu_mix, alpha_override)
            obj_step = ObjectStep(new_objects, composite, kl_obj, discovered)

        pieces: Dict[str, List[torch.Tensor]] = {}
        if posterior:
            if "mixture" in active:
                pieces["mixture"] = nll_pieces(frame, mix.mu_mix, cfg.sigma_mix) + [mix.kl, mix.reg]
            if "objects" in active:
                pieces["objects"] = nll_pieces(frame, mu, cfg.sigma_obs) + [obj_step.kl]
            if "keypoint" in active and kp is not None:
                agent_mask = pi_r if "mixture" in active else None
                pieces["keypoint"] = keypoint_loss(kp.gamma, agent_mask, kp.posterior, kp.prior,
                                                   kp.aux, cfg, reduce=False)
        losses = {k: sum(p.reshape(p.shape[0], -1).sum(1) for p in v) for k, v in pieces.items()}

        # histories
        with gated("mixture"):
            new_mix = self.mixture.advance(mix, state.mixture, update_posterior=posterior)
        new_kp = state.keypoint
        if kp is not None:
            with gated("keypoint"):
                new_kp = self.keypoint.advance(kp, state.keypoint)
        record = StepRecord(posterior, mix, mu, k_agent, kp, obj_step, losses, pieces)
        return record, ModelState(new_mix, new_kp, new_objects)

    def forward_sequence(self, frames: torch.Tensor, actions: torch.Tensor, rng: RandomSource,
                         active: FrozenSet[str] = ALL_MODULES, n_cond: Optional[int] = None,
                         alpha_override: Optional[float] = None) -> SequenceOutput:
        """Run over ``frames [B, T, 3, H, W]`` with ``actions [B, T', A]`` (``T' >= T``).

        The first ``n_cond`` steps (all observed steps by default) use the
        posterior; the rest generate from the prior. During generation the
        agent index is the majority vote over the conditioning steps.
        """
        B, T_obs = frames.shape[:2]
        T = actions.shape[1]
        n_cond = T_obs if n_cond is None else n_cond
        if n_cond > T_obs:
            raise ValueError(f"{n_cond} conditioning steps but only {T_obs} frames")
        if n_cond < 1:
            raise ValueError("need at least one conditioning frame")
        a_hat = self.enhanced_actions(actions)
        state = self.initial_state(B, frames.dtype, frames.device)
        first = frames[:, 0]
        records: List[StepRecord] = []
        votes = []
        fixed_k = None
        for t in range(T):
            posterior = t < n_cond
            frame = frames[:, t] if posterior else None
            if not posterior and fixed_k is None:
                fixed_k = majority_vote(torch.stack(votes), self.cfg.K) if votes else None
            rec, state = self.step(frame, first, a_hat[:, t], state, rng, active, alpha_override,
                                   k_agent=None if posterior else fixed_k, t=t)
            if posterior:
                votes.append(rec.k_agent)
            records.append(rec)

        terms: Dict[str, torch.Tensor] = {}
        for rec in records:
            for k, v in rec.losses.items():
                terms[k] = terms.get(k, 0.0) + v.sum()
        total = sum(terms.values()) if terms else frames.new_zeros(())
        with torch.no_grad():
            obs = frames[:, :n_cond]
            rec_mu = torch.stack([r.mu for r in records[:n_cond]], 1)
            recon_mse = float(((rec_mu - obs) ** 2).mean())
        return SequenceOutput(records, terms, total, recon_mse)


def nll_pieces(x: torch.Tensor, mu: torch.Tensor, sigma: float) -> List[torch.Tensor]:
    """Per-pixel quadratic part and per-example constant of the Gaussian NLL."""
    if x.shape != mu.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(mu.shape)}")
    quad = (x - mu) ** 2 / (2 * sigma * sigma)
    const = x.new_full((x.shape[0],), x[0].numel() * (math.log(sigma) + HALF_LOG_2PI))
    return [quad, const]
