"""Mixture module: stick-breaking masks, component appearances and the mixture ELBO.

Tensors carry a leading batch dimension. Mode-indexed tensors put the mode on
dimension 1, so masks are ``[B, K, 1, H, W]`` and components ``[B, K, 3, H, W]``.
The reducing helpers (:func:`stick_break`, :func:`compose_mixture`) index modes
from the right (dimension ``-4``) so they also accept unbatched ``[K, C, H, W]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .core import GaussianLatent, RandomSource, RecurrentState
from .layers import SubPixelConv, group_norm, mlp, scaled, spatial_broadcast, upsample_factors
from .ssm import (GaussianHead, SSMCell, gaussian_nll, kl_diag_gaussian, reparam_sample,
                  update_history)

MASK_SUM_TOL = 1e-3
MODE_DIM = -4


class MaskInvariantError(ValueError):
    """Masks do not sum to one per pixel."""


# ---------------------------------------------------------------------------
# Pure operations
# ---------------------------------------------------------------------------

def stick_break(mask_logits: Union[torch.Tensor, Sequence[torch.Tensor]]) -> torch.Tensor:
    """Turn K-1 logit maps into K masks that sum to one per pixel.

    ``mask_logits`` is a sequence of ``[..., 1, H, W]`` maps or a tensor with the
    mode on dimension -4. Mode k takes ``sigmoid(l_k)`` of whatever scope the
    earlier modes left; the last mode takes the remainder.
    """
    if not isinstance(mask_logits, torch.Tensor):
        mask_logits = torch.stack(list(mask_logits), dim=MODE_DIM)
    if mask_logits.shape[MODE_DIM] < 1:
        raise ValueError("stick_break needs at least one logit map (K >= 2)")
    log_keep = F.logsigmoid(mask_logits)        # log sigma(l)
    log_pass = F.logsigmoid(-mask_logits)       # log (1 - sigma(l))
    scope = torch.cumsum(log_pass, dim=MODE_DIM)
    first = torch.zeros_like(scope.narrow(MODE_DIM, 0, 1))
    scope_before = torch.cat([first, scope.narrow(MODE_DIM, 0, scope.shape[MODE_DIM] - 1)], MODE_DIM)
    head = log_keep + scope_before
    tail = scope.narrow(MODE_DIM, scope.shape[MODE_DIM] - 1, 1)
    return torch.cat([head, tail], dim=MODE_DIM).exp()


def compose_mixture(masks: torch.Tensor, components: torch.Tensor,
                    tol: float = MASK_SUM_TOL) -> torch.Tensor:
    """Per-pixel convex combination ``sum_k masks_k * components_k``."""
    if masks.shape[MODE_DIM] != components.shape[MODE_DIM]:
        raise ValueError(
            f"{masks.shape[MODE_DIM]} masks but {components.shape[MODE_DIM]} components")
    total = masks.sum(dim=MODE_DIM)
    dev = (total - 1).abs().max().item()
    if dev > tol:
        raise MaskInvariantError(f"mask sum deviates from 1 by {dev:.3g} (tolerance {tol})")
    return (masks * components).sum(dim=MODE_DIM)


def residual_update(res_net: nn.Module, z_prev: torch.Tensor, z_bar: torch.Tensor,
                    delta: float, reg_scale: float):
    """``z = z_prev + delta * res_net([z_bar, z_prev])``.

    Returns ``(z, reg)`` with ``reg = reg_scale * ||delta * res_net(...)||`` over
    the last dimension.
    """
    if z_prev.shape != z_bar.shape:
        raise ValueError(f"residual_update shape mismatch {tuple(z_prev.shape)} vs {tuple(z_bar.shape)}")
    step = delta * res_net(torch.cat([z_bar, z_prev], dim=-1))
    return z_prev + step, reg_scale * torch.linalg.vector_norm(step, dim=-1)


def salient_residual(frame: torch.Tensor, mu_mix: torch.Tensor) -> torch.Tensor:
    if frame.shape != mu_mix.shape:
        raise ValueError(f"shape mismatch {tuple(frame.shape)} vs {tuple(mu_mix.shape)}")
    return frame - mu_mix


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class FrameEncoder(nn.Module):
    """Strided conv stack (7x7 then three 3x3, all stride 2) followed by a linear code."""

    def __init__(self, cfg: ModelConfig, in_ch: int = 3):
        super().__init__()
        w = cfg.width_mult
        chans = [scaled(c, w) for c in (64, 128, 256, 512)]
        groups = (4, 8, 16, 32)
        layers: List[nn.Module] = []
        c_in = in_ch
        for i, (c, g) in enumerate(zip(chans, groups)):
            k = 7 if i == 0 else 3
            layers += [nn.Conv2d(c_in, c, k, stride=2, padding=k // 2), group_norm(g, c, w), nn.CELU()]
            c_in = c
        self.conv = nn.Sequential(*layers)
        side = cfg.height // 16
        self.fc = nn.Linear(c_in * side * side, cfg.frame_code_dim)

    def forward(self, x):
        return self.fc(self.conv(x).flatten(1))


class MaskDecoder(nn.Module):
    """Latent -> logit map through a sub-pixel upsampling stack."""

    STAGES = ((256, 16), (128, 16), (64, 8), (16, 4))

    def __init__(self, cfg: ModelConfig, in_dim: int):
        super().__init__()
        w = cfg.width_mult
        factors = upsample_factors(cfg.height)
        c0 = scaled(256, w)
        layers: List[nn.Module] = [nn.Conv2d(in_dim, c0, 1), group_norm(16, c0, w), nn.CELU()]
        c_in = c0
        for i, f in enumerate(factors):
            ch, g = self.STAGES[min(i, len(self.STAGES) - 1)]
            c = scaled(ch, w)
            # the first stage sees a 1x1 map, where a 3x3 kernel only uses its centre tap
            kernel = 1 if i == 0 else 3
            layers += [SubPixelConv(c_in, c, f, kernel), group_norm(g, c, w), nn.CELU(),
                       nn.Conv2d(c, c, 3, padding=1), group_norm(g, c, w), nn.CELU()]
            c_in = c
        layers.append(nn.Conv2d(c_in, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z[:, :, None, None])


class ComponentEncoder(nn.Module):
    """Frame plus one mask channel -> component code."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.width_mult
        chans = [scaled(c, w * 4) for c in (32, 32, 64)]
        layers: List[nn.Module] = []
        c_in = 4
        for c in chans:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.BatchNorm2d(c), nn.ELU()]
            c_in = c
        self.conv = nn.Sequential(*layers)
        side = cfg.height // 8
        self.fc = nn.Linear(c_in * side * side, cfg.comp_code_dim)

    def forward(self, x):
        return self.fc(self.conv(x).flatten(1))


class ComponentDecoder(nn.Module):
    """Spatial-broadcast decoder: tiled latent plus coordinates -> RGB."""

    def __init__(self, cfg: ModelConfig, in_dim: int):
        super().__init__()
        self.size = cfg.height
        c = scaled(32, cfg.width_mult * 4)
        self.net = nn.Sequential(
            nn.Conv2d(in_dim + 2, c, 3, padding=1), nn.BatchNorm2d(c), nn.ELU(),
            nn.Conv2d(c, c, 3, padding=1), nn.BatchNorm2d(c), nn.ELU(),
            nn.Conv2d(c, c, 3, padding=1), nn.BatchNorm2d(c), nn.ELU(),
            nn.Conv2d(c, 3, 3, padding=1),
        )

    def forward(self, z):
        return self.net(spatial_broadcast(z, self.size, self.size))


# ---------------------------------------------------------------------------
# State and step records
# ---------------------------------------------------------------------------

@dataclass
class MixtureState:
    """Per-mode temporal histories plus the previous step's latents."""

    mask_post: List[RecurrentState]
    mask_prior: List[RecurrentState]
    comp_post: List[RecurrentState]
    comp_prior: List[RecurrentState]
    z_mask: Optional[torch.Tensor] = None   # [B, K, z_mask_dim]
    z_comp: Optional[torch.Tensor] = None   # [B, K, z_comp_dim]

    def stacked(self, which: str) -> torch.Tensor:
        return torch.stack([s.hidden for s in getattr(self, which)], dim=1)


@dataclass
class MaskLatentStack:
    z: torch.Tensor                       # [B, K, Dm] residual-updated
    prior: GaussianLatent                 # [B, K, Dm]
    posterior: Optional[GaussianLatent]   # None when generated
    reg: torch.Tensor                     # [B]


@dataclass
class ComponentLatentStack:
    z: torch.Tensor
    prior: GaussianLatent
    posterior: Optional[GaussianLatent]
    reg: torch.Tensor


@dataclass
class MixtureStep:
    masks_latents: MaskLatentStack
    comp_latents: ComponentLatentStack
    mask_logits: torch.Tensor   # [B, K-1, 1, H, W]
    masks: torch.Tensor         # [B, K, 1, H, W]
    components: torch.Tensor    # [B, K, 3, H, W]
    mu_mix: torch.Tensor        # [B, 3, H, W]

    @property
    def kl(self) -> torch.Tensor:
        """Per-example KL over masks and components (zero for generated steps)."""
        total = torch.zeros_like(self.masks_latents.reg)
        for stack in (self.masks_latents, self.comp_latents):
            if stack.posterior is not None:
                total = total + kl_diag_gaussian(stack.posterior, stack.prior).sum(-1)
        return total

    @property
    def reg(self) -> torch.Tensor:
        return self.masks_latents.reg + self.comp_latents.reg

    def decomposition(self, b: int = 0) -> dict:
        """Export record for one batch element."""
        return {"masks": self.masks[b].detach(), "components": self.components[b].detach(),
                "mu_mix": self.mu_mix[b].detach()}


def _stack_gaussians(gs: Sequence[GaussianLatent]) -> GaussianLatent:
    return GaussianLatent(torch.stack([g.mean for g in gs], 1), torch.stack([g.log_std for g in gs], 1))


# ---------------------------------------------------------------------------
# Module
# ---------------------------------------------------------------------------

class MixtureModule(nn.Module):
    """Autoregressive mask chain and per-mode components with temporal histories.

    The enhanced action enters the first mask mode only; later modes see it
    through their dependence on earlier mask latents. Components receive the
    action for every mode.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        K, a = cfg.K, cfg.enhanced_action_dim
        zm, hm, zc, hc = cfg.z_mask_dim, cfg.h_mask_dim, cfg.z_comp_dim, cfg.h_comp_dim
        code, hid = cfg.frame_code_dim, cfg.mlp_hidden
        self.K = K
        self.frame_encoder = FrameEncoder(cfg)

        self.mask_obs = mlp(code + hm + a, [hid, hid], cfg.mask_code_dim)
        self.mask_chain_post = nn.LSTMCell(cfg.mask_code_dim + zm, hm)
        self.mask_head_post = GaussianHead(hm, [hid, hid], zm)
        self.mask_chain_prior = nn.LSTMCell(hm + zm, hm)
        self.mask_head_prior = GaussianHead(zm + 2 * hm + a, [hid, hid], zm)
        self.mask_res = mlp(2 * zm, [hid, hid, hid], zm)
        self.mask_dec_in = mlp(zm + a, [hid, hid], zm)
        self.mask_decoder = MaskDecoder(cfg, zm)

        self.comp_encoder = ComponentEncoder(cfg)
        self.comp_obs = mlp(cfg.comp_code_dim + hc, [hid], cfg.comp_code_dim)
        self.comp_head_post = GaussianHead(cfg.comp_code_dim + a, [hid, hid], zc)
        self.comp_head_prior = GaussianHead(zm + zc + hc + a, [hid, hid, hid], zc)
        self.comp_res = mlp(2 * zc, [hid, hid, hid], zc)
        self.comp_dec_in = mlp(zc + a, [hid, hid], zc)
        self.comp_decoder = ComponentDecoder(cfg, zc)

        self.mask_hist_post = nn.ModuleList(SSMCell(zm, code, hm) for _ in range(K))
        self.comp_hist_post = nn.ModuleList(SSMCell(zc, code, hc) for _ in range(K))
        if cfg.separate_prior_posterior_rnn:
            self.mask_hist_prior = nn.ModuleList(SSMCell(zm, code, hm) for _ in range(K))
            self.comp_hist_prior = nn.ModuleList(SSMCell(zc, code, hc) for _ in range(K))
        else:
            self.mask_hist_prior = self.mask_hist_post
            self.comp_hist_prior = self.comp_hist_post
        # set to a list to record (name, mode, input) tuples for structural tests
        self.trace: Optional[list] = None

    # -- state -------------------------------------------------------------
    def initial_state(self, batch: int, dtype=torch.float32, device=None) -> MixtureState:
        cfg = self.cfg

        def zeros(dim):
            return [RecurrentState.zeros(batch, dim, dtype=dtype, device=device) for _ in range(self.K)]

        return MixtureState(zeros(cfg.h_mask_dim), zeros(cfg.h_mask_dim),
                            zeros(cfg.h_comp_dim), zeros(cfg.h_comp_dim))

    def _record(self, name, k, x):
        if self.trace is not None:
            self.trace.append((name, k, x.detach().clone()))

    def _mode_action(self, action: torch.Tensor, k: int) -> torch.Tensor:
        return action if k == 0 else torch.zeros_like(action)

    # -- masks ---------------------------------------------------------------
    def _mask_chain(self, frame_code, action, state: MixtureState, rng: RandomSource):
        cfg = self.cfg
        B = action.shape[0]
        ref = action
        zm, hm = cfg.z_mask_dim, cfg.h_mask_dim
        z_before = ref.new_zeros(B, zm)
        chain_q = (ref.new_zeros(B, hm), ref.new_zeros(B, hm))
        chain_p = (ref.new_zeros(B, hm), ref.new_zeros(B, hm))
        zs, qs, ps, regs = [], [], [], []
        for k in range(self.K):
            act = self._mode_action(action, k)
            h_prior = state.mask_prior[k].hidden
            chain_p = self.mask_chain_prior(torch.cat([h_prior, z_before], -1), chain_p)
            z_prev_t = state.z_mask[:, k] if state.z_mask is not None else ref.new_zeros(B, zm)
            prior_in = torch.cat([z_prev_t, h_prior, chain_p[0], act], -1)
            self._record("mask_prior_in", k, prior_in)
            p = self.mask_head_prior(prior_in)
            if frame_code is not None:
                obs_in = torch.cat([frame_code, state.mask_post[k].hidden, act], -1)
                self._record("mask_post_in", k, obs_in)
                chain_q = self.mask_chain_post(torch.cat([self.mask_obs(obs_in), z_before], -1), chain_q)
                q = self.mask_head_post(chain_q[0])
                z_bar = reparam_sample(q, rng)
                qs.append(q)
            else:
                z_bar = reparam_sample(p, rng)
            if state.z_mask is not None:
                z, reg = residual_update(self.mask_res, state.z_mask[:, k], z_bar,
                                         cfg.residual_scale, cfg.residual_reg)
            else:
                z, reg = z_bar, z_bar.new_zeros(B)
            zs.append(z)
            ps.append(p)
            regs.append(reg)
            z_before = z
        return MaskLatentStack(
            z=torch.stack(zs, 1), prior=_stack_gaussians(ps),
            posterior=_stack_gaussians(qs) if qs else None, reg=torch.stack(regs, 1).sum(1))

    def infer_mask_latents(self, frame, action, state, rng) -> MaskLatentStack:
        return self._mask_chain(self.frame_encoder(frame), action, state, rng)

    def generate_mask_latents(self, action, state, rng) -> MaskLatentStack:
        return self._mask_chain(None, action, state, rng)

    def decode_masks(self, z_mask: torch.Tensor, action: torch.Tensor):
        """Decode the first K-1 mask latents to logits and stick-break them."""
        B, K, _ = z_mask.shape
        z = z_mask[:, :K - 1]
        act = torch.zeros(B, K - 1, action.shape[-1], dtype=action.dtype, device=action.device)
        act[:, 0] = action
        x = self.mask_dec_in(torch.cat([z, act], -1)).flatten(0, 1)
        logits = self.mask_decoder(x).unflatten(0, (B, K - 1))
        return logits, stick_break(logits)

    # -- components ------------------------------------------------------------
    def _comp_prior(self, z_mask, action, state):
        cfg = self.cfg
        B = action.shape[0]
        z_prev = state.z_comp if state.z_comp is not None else action.new_zeros(B, self.K, cfg.z_comp_dim)
        act = action[:, None].expand(B, self.K, action.shape[-1])
        return self.comp_head_prior(torch.cat([z_mask, z_prev, state.stacked("comp_prior"), act], -1))

    def _comp_finish(self, z_bar, prior, posterior, state):
        cfg = self.cfg
        if state.z_comp is not None:
            z, reg = residual_update(self.comp_res, state.z_comp, z_bar, cfg.residual_scale, cfg.residual_reg)
            reg = reg.sum(1)
        else:
            z, reg = z_bar, z_bar.new_zeros(z_bar.shape[0])
        return ComponentLatentStack(z=z, prior=prior, posterior=posterior, reg=reg)

    def infer_component_latents(self, frame, masks, z_mask, action, state, rng) -> ComponentLatentStack:
        B, K = masks.shape[:2]
        x = torch.cat([frame[:, None].expand(B, K, *frame.shape[1:]), masks], 2)
        code = self.comp_encoder(x.flatten(0, 1)).unflatten(0, (B, K))
        code = self.comp_obs(torch.cat([code, state.stacked("comp_post")], -1))
        act = action[:, None].expand(B, K, action.shape[-1])
        q = self.comp_head_post(torch.cat([code, act], -1))
        p = self._comp_prior(z_mask, action, state)
        return self._comp_finish(reparam_sample(q, rng), p, q, state)

    def generate_component_latents(self, z_mask, action, state, rng) -> ComponentLatentStack:
        p = self._comp_prior(z_mask, action, state)
        return self._comp_finish(reparam_sample(p, rng), p, None, state)

    def decode_components(self, z_comp: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        B, K, _ = z_comp.shape
        act = action[:, None].expand(B, K, action.shape[-1])
        x = self.comp_dec_in(torch.cat([z_comp, act], -1)).flatten(0, 1)
        return self.comp_decoder(x).unflatten(0, (B, K))

    # -- full step -----------------------------------------------------------
    def step(self, frame: Optional[torch.Tensor], action: torch.Tensor, state: MixtureState,
             rng: RandomSource) -> MixtureStep:
        """One time step: posterior when ``frame`` is given, prior otherwise."""
        if frame is not None:
            ml = self.infer_mask_latents(frame, action, state, rng)
        else:
            ml = self.generate_mask_latents(action, state, rng)
        logits, masks = self.decode_masks(ml.z, action)
        if frame is not None:
            cl = self.infer_component_latents(frame, masks, ml.z, action, state, rng)
        else:
            cl = self.generate_component_latents(ml.z, action, state, rng)
        comps = self.decode_components(cl.z, action)
        mu = compose_mixture(masks, comps)
        return MixtureStep(ml, cl, logits, masks, comps, mu)

    def advance(self, step: MixtureStep, state: MixtureState, update_posterior: bool) -> MixtureState:
        """Feed this step's latents and reconstruction into the histories.

        While observations are available both banks see the posterior latents;
        afterwards only the prior bank advances.
        """
        code = self.frame_encoder(step.mu_mix)
        zm, zc = step.masks_latents.z, step.comp_latents.z
        mask_prior = [update_history(c, zm[:, k], code, s)
                      for k, (c, s) in enumerate(zip(self.mask_hist_prior, state.mask_prior))]
        comp_prior = [update_history(c, zc[:, k], code, s)
                      for k, (c, s) in enumerate(zip(self.comp_hist_prior, state.comp_prior))]
        if update_posterior:
            mask_post = [update_history(c, zm[:, k], code, s)
                         for k, (c, s) in enumerate(zip(self.mask_hist_post, state.mask_post))]
            comp_post = [update_history(c, zc[:, k], code, s)
                         for k, (c, s) in enumerate(zip(self.comp_hist_post, state.comp_post))]
        else:
            mask_post, comp_post = state.mask_post, state.comp_post
        return MixtureState(mask_post, mask_prior, comp_post, comp_prior, zm, zc)


def mixture_elbo(frames: torch.Tensor, steps: Sequence[MixtureStep], sigma_mix: float) -> torch.Tensor:
    """Negative ELBO of the mixture module summed over time and batch.

    ``frames`` is ``[T, B, 3, H, W]`` (or ``[T, 3, H, W]`` for a single sequence
    when every step is unbatched); ``steps[t]`` is the matching step record.
    """
    if len(steps) != frames.shape[0]:
        raise ValueError(f"{frames.shape[0]} frames but {len(steps)} steps")
    total = frames.new_zeros(())
    for x, s in zip(frames, steps):
        total = total + gaussian_nll(x, s.mu_mix, sigma_mix) + s.kl.sum() + s.reg.sum()
    return total
