"""Object module: grid discovery on the salient residual, propagation, glimpse rendering.

Objects live in ``I_max`` fixed slots per example. A slot is alive while its
soft presence exceeds ``presence_threshold``; dead slots keep presence 0 and are
reused by discovery.

Boxes are ``where = (s_x, s_y, t_x, t_y)`` in normalised frame coordinates: the
glimpse square ``[-1, 1]^2`` maps to ``[t - s, t + s]``, so ``s = 1, t = 0`` is
the full frame.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .core import GaussianLatent, RandomSource
from .layers import mlp, pixel_centres, scaled, spatial_broadcast
from .ssm import bernoulli_kl, gaussian_nll, kl_diag_gaussian, relaxed_bernoulli_sample, reparam_sample

MIN_SCALE = 1e-3


# ---------------------------------------------------------------------------
# Glimpse geometry
# ---------------------------------------------------------------------------

def paste_glimpses(patches: torch.Tensor, scale: torch.Tensor, center: torch.Tensor,
                   size: Tuple[int, int]) -> torch.Tensor:
    """Warp ``[B, I, C, g, g]`` patches into ``[B, I, C, H, W]`` frames (zeros outside)."""
    B, I, C = patches.shape[:3]
    H, W = size
    s = scale.reshape(B * I, 2).clamp_min(MIN_SCALE)
    t = center.reshape(B * I, 2)
    zero = torch.zeros_like(s[:, 0])
    theta = torch.stack([
        torch.stack([1 / s[:, 0], zero, -t[:, 0] / s[:, 0]], -1),
        torch.stack([zero, 1 / s[:, 1], -t[:, 1] / s[:, 1]], -1),
    ], 1)
    grid = F.affine_grid(theta, (B * I, C, H, W), align_corners=False)
    out = F.grid_sample(patches.reshape(B * I, C, *patches.shape[-2:]), grid,
                        mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.reshape(B, I, C, H, W)


def extract_glimpses(image: torch.Tensor, scale: torch.Tensor, center: torch.Tensor,
                     size: int) -> torch.Tensor:
    """Crop ``[B, I]`` boxes out of ``image [B, C, H, W]`` and resample to ``size x size``.

    Regions outside the frame read as zero.
    """
    B, C = image.shape[:2]
    I = scale.shape[1]
    s = scale.reshape(B * I, 2)
    t = center.reshape(B * I, 2)
    zero = torch.zeros_like(s[:, 0])
    theta = torch.stack([
        torch.stack([s[:, 0], zero, t[:, 0]], -1),
        torch.stack([zero, s[:, 1], t[:, 1]], -1),
    ], 1)
    grid = F.affine_grid(theta, (B * I, C, size, size), align_corners=False)
    src = image[:, None].expand(B, I, *image.shape[1:]).reshape(B * I, *image.shape[1:])
    out = F.grid_sample(src, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.reshape(B, I, C, size, size)


def cell_centres(G: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``[G*G, 2]`` (x, y) centres of the discovery grid cells, row-major."""
    return pixel_centres(G, G, dtype=dtype, device=device).reshape(G * G, 2)


def inside_boxes(points: torch.Tensor, scale: torch.Tensor, center: torch.Tensor,
                 alive: torch.Tensor) -> torch.Tensor:
    """``[B, P]`` flags: point lies inside any alive box. ``points`` is ``[P, 2]``."""
    d = (points[None, :, None, :] - center[:, None]).abs()           # [B, P, I, 2]
    inside = (d < scale[:, None]).all(-1) & alive[:, None]
    return inside.any(-1)


# ---------------------------------------------------------------------------
# Rendering and compositing
# ---------------------------------------------------------------------------

@dataclass
class AlphaComposite:
    fg: torch.Tensor      # [B, 3, H, W] foreground colour y (not premultiplied)
    alpha: torch.Tensor   # [B, 1, H, W]

    @property
    def mu_obj(self) -> torch.Tensor:
        return self.alpha * self.fg


def composite_layers(rgb: torch.Tensor, weight: torch.Tensor, depth: torch.Tensor,
                     mode: str = "softmax") -> AlphaComposite:
    """Blend per-object frame layers.

    ``rgb [B, I, 3, H, W]``, ``weight [B, I, 1, H, W]`` (alpha times presence),
    ``depth [B, I]`` where larger values are nearer the camera.
    """
    B, _, _, H, W = rgb.shape
    if rgb.shape[1] == 0:
        z = rgb.new_zeros(B, 3, H, W)
        return AlphaComposite(z, rgb.new_zeros(B, 1, H, W))
    alpha = 1 - torch.prod(1 - weight, dim=1)
    if mode == "softmax":
        d = depth - depth.max(1, keepdim=True).values.detach()
        vis = weight * d.exp()[:, :, None, None, None]
        total = vis.sum(1)
        safe = torch.where(total > 0, total, torch.ones_like(total))
        fg = (vis * rgb).sum(1) / safe
    elif mode == "hard":
        order = torch.argsort(depth, dim=1, descending=True, stable=True)
        idx = order[:, :, None, None, None]
        w_sorted = weight.gather(1, idx.expand_as(weight))
        rgb_sorted = rgb.gather(1, idx.expand_as(rgb))
        uncovered = torch.cumprod(torch.cat([torch.ones_like(w_sorted[:, :1]), 1 - w_sorted[:, :-1]], 1), 1)
        premult = (w_sorted * uncovered * rgb_sorted).sum(1)
        safe = torch.where(alpha > 0, alpha, torch.ones_like(alpha))
        fg = premult / safe
    else:
        raise ValueError(f"unknown compositing mode {mode!r}")
    return AlphaComposite(fg, alpha)


def compose_full(composite: AlphaComposite, mu_mix: torch.Tensor,
                 alpha_override: Optional[float] = None) -> torch.Tensor:
    """``mu = alpha * fg + (1 - alpha) * mu_mix``; a fixed scalar alpha replaces the map."""
    if composite.fg.shape != mu_mix.shape:
        raise ValueError(f"foreground {tuple(composite.fg.shape)} vs mixture {tuple(mu_mix.shape)}")
    alpha = composite.alpha if alpha_override is None else alpha_override
    return alpha * composite.fg + (1 - alpha) * mu_mix


# ---------------------------------------------------------------------------
# Object set
# ---------------------------------------------------------------------------

@dataclass
class ObjectSet:
    pres: torch.Tensor     # [B, I] soft presence in [0, 1]
    scale: torch.Tensor    # [B, I, 2]
    center: torch.Tensor   # [B, I, 2]
    depth: torch.Tensor    # [B, I]
    what: torch.Tensor     # [B, I, Dw]
    h: torch.Tensor        # [B, I, Dh]
    c: torch.Tensor        # [B, I, Dh]
    threshold: float = 0.5

    @property
    def where(self) -> torch.Tensor:
        return torch.cat([self.scale, self.center], -1)

    @property
    def alive(self) -> torch.Tensor:
        return self.pres > self.threshold

    @property
    def num_slots(self) -> int:
        return self.pres.shape[1]

    def latent_vector(self) -> torch.Tensor:
        return torch.cat([self.where, self.what, self.depth[..., None], self.pres[..., None]], -1)

    def features(self) -> torch.Tensor:
        """Per-object feature ``u = [latents, h]`` for the interaction graph."""
        return torch.cat([self.latent_vector(), self.h], -1)

    def gather(self, idx: torch.Tensor) -> "ObjectSet":
        def g(x):
            ix = idx.reshape(*idx.shape, *([1] * (x.dim() - 2))).expand(*idx.shape, *x.shape[2:])
            return x.gather(1, ix)
        return replace(self, pres=g(self.pres), scale=g(self.scale), center=g(self.center),
                       depth=g(self.depth), what=g(self.what), h=g(self.h), c=g(self.c))

    @staticmethod
    def cat(a: "ObjectSet", b: "ObjectSet") -> "ObjectSet":
        return replace(a, **{k: torch.cat([getattr(a, k), getattr(b, k)], 1)
                             for k in ("pres", "scale", "center", "depth", "what", "h", "c")})

    def export(self, b: int = 0) -> dict:
        return {"obj_where": self.where[b].detach(), "obj_pres": self.pres[b].detach()}


def empty_objects(cfg: ModelConfig, batch: int, dtype=torch.float32, device=None) -> ObjectSet:
    I = cfg.I_max

    def z(*shape):
        return torch.zeros(batch, I, *shape, dtype=dtype, device=device)

    return ObjectSet(pres=z(), scale=z(2) + cfg.scale_max, center=z(2), depth=z(),
                     what=z(cfg.z_what_dim), h=z(cfg.h_obj_dim), c=z(cfg.h_obj_dim),
                     threshold=cfg.presence_threshold)


@dataclass
class ObjectStep:
    objects: ObjectSet
    composite: AlphaComposite
    kl: torch.Tensor           # [B]
    discovered: ObjectSet      # full G*G proposal grid, before merging

    def export(self, b: int = 0) -> dict:
        out = {"alpha": self.composite.alpha[b].detach(), "fg": self.composite.fg[b].detach()}
        out.update(self.objects.export(b))
        return out


def _split_gaussian(x: torch.Tensor, sizes):
    """Split a head output into Gaussians with the given dims plus any trailing remainder."""
    out, i = [], 0
    for d in sizes:
        out.append(GaussianLatent.from_raw(x[..., i:i + d], x[..., i + d:i + 2 * d]))
        i += 2 * d
    return out, x[..., i:]


def _standard_normal_like(g: GaussianLatent) -> GaussianLatent:
    return GaussianLatent(torch.zeros_like(g.mean), torch.zeros_like(g.log_std))


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class GlimpseEncoder(nn.Module):
    def __init__(self, in_ch: int, size: int, width: int, out_dim: int):
        super().__init__()
        layers, side, c_in = [], size, in_ch
        while side > 2:
            layers += [nn.Conv2d(c_in, width, 3, stride=2, padding=1), nn.CELU()]
            c_in, side = width, side // 2
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(c_in * side * side, out_dim)

    def forward(self, x):
        return self.fc(self.conv(x).flatten(1))


class GlimpseDecoder(nn.Module):
    """Spatial-broadcast decoder from ``z_what`` to an RGB + alpha patch."""

    def __init__(self, what_dim: int, size: int, width: int):
        super().__init__()
        self.size = size
        self.net = nn.Sequential(
            nn.Conv2d(what_dim + 2, width, 3, padding=1), nn.CELU(),
            nn.Conv2d(width, width, 3, padding=1), nn.CELU(),
            nn.Conv2d(width, 4, 3, padding=1),
        )

    def forward(self, z):
        return self.net(spatial_broadcast(z, self.size, self.size))


class ObjectModule(nn.Module):
    """Discovery, propagation and rendering of passive objects."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        G, H = cfg.G, cfg.height
        hid, dw, dh = cfg.mlp_hidden, cfg.z_what_dim, cfg.h_obj_dim
        c = scaled(64, cfg.width_mult * 2)
        layers, side, c_in = [], H, 6
        while side > G:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.CELU()]
            c_in, side = c, side // 2
        layers += [nn.Conv2d(c_in, c, 1), nn.CELU()]
        self.backbone = nn.Sequential(*layers)
        self.cell_head = nn.Conv2d(c, 1 + 2 * 4 + 2 * 1, 1)    # pres logit, where, depth
        gw = scaled(32, cfg.width_mult * 2)
        self.glimpse_encoder = GlimpseEncoder(6, cfg.glimpse_size, gw, hid)
        self.what_head = mlp(hid + c, [hid], 2 * dw)
        self.glimpse_decoder = GlimpseDecoder(dw, cfg.glimpse_size, gw)

        self.latent_dim = 4 + dw + 1 + 1
        self.rnn = nn.LSTMCell(cfg.ambient_dim + self.latent_dim, dh)
        head_out = 2 * (4 + dw + 1) + 1
        self.prop_prior = mlp(dh, [hid], head_out)
        self.prop_post = mlp(dh + hid, [hid], head_out)

    # -- discovery -------------------------------------------------------------
    def discover(self, frame, salient, existing: Optional[ObjectSet], rng: RandomSource):
        """Propose one object per grid cell. Returns ``(proposals, kl [B])``."""
        cfg = self.cfg
        B, G = frame.shape[0], cfg.G
        x = torch.cat([frame, salient], 1)
        feat = self.backbone(x)                                   # [B, c, G, G]
        cells = feat.flatten(2).transpose(1, 2)                   # [B, G*G, c]
        raw = self.cell_head(feat).flatten(2).transpose(1, 2)
        pres_logit = raw[..., 0]
        (where_q, depth_q), _ = _split_gaussian(raw[..., 1:], (4, 1))

        centres = cell_centres(G, dtype=frame.dtype, device=frame.device)
        where_raw = reparam_sample(where_q, rng)
        scale = cfg.scale_max * torch.sigmoid(where_raw[..., :2])
        center = centres + torch.tanh(where_raw[..., 2:]) * (2.0 / G)
        depth = reparam_sample(depth_q, rng)[..., 0]

        glimpses = extract_glimpses(x, scale, center, cfg.glimpse_size)
        code = self.glimpse_encoder(glimpses.flatten(0, 1)).unflatten(0, (B, G * G))
        what_q = _split_gaussian(self.what_head(torch.cat([code, cells], -1)), (cfg.z_what_dim,))[0][0]
        what = reparam_sample(what_q, rng)

        q_prob = torch.sigmoid(pres_logit)
        pres = relaxed_bernoulli_sample(pres_logit, cfg.pres_temperature, rng)
        prior_prob = torch.full_like(q_prob, cfg.z_pres_prior)
        if existing is not None:
            covered = inside_boxes(centres, existing.scale, existing.center, existing.alive)
            prior_prob = torch.where(covered, torch.full_like(q_prob, cfg.z_pres_reject_prior), prior_prob)
        kl = bernoulli_kl(q_prob, prior_prob).sum(-1)
        gauss = sum(kl_diag_gaussian(q, _standard_normal_like(q)) for q in (where_q, depth_q, what_q))
        kl = kl + (pres * gauss).sum(-1)

        zeros_h = frame.new_zeros(B, G * G, cfg.h_obj_dim)
        proposals = ObjectSet(pres=pres, scale=scale, center=center, depth=depth, what=what,
                              h=zeros_h, c=zeros_h.clone(), threshold=cfg.presence_threshold)
        return proposals, kl

    # -- propagation -----------------------------------------------------------
    def propagate(self, objects: ObjectSet, interactions: torch.Tensor, frame: Optional[torch.Tensor],
                  salient: Optional[torch.Tensor], rng: RandomSource):
        """Advance every slot one step. Posterior when ``frame`` is given, prior otherwise.

        Returns ``(objects, kl [B])``. Dead slots stay at presence 0.
        """
        cfg = self.cfg
        B, I = objects.pres.shape
        dw = cfg.z_what_dim
        alive = objects.alive
        x = torch.cat([interactions, objects.latent_vector()], -1).flatten(0, 1)
        h, c = self.rnn(x, (objects.h.flatten(0, 1), objects.c.flatten(0, 1)))
        h, c = h.unflatten(0, (B, I)), c.unflatten(0, (B, I))

        prior_raw = self.prop_prior(h)
        (where_p, what_p, depth_p), pres_p = _split_gaussian(prior_raw, (4, dw, 1))
        if frame is not None:
            x_img = torch.cat([frame, salient], 1)
            g = extract_glimpses(x_img, objects.scale * 2, objects.center, cfg.glimpse_size)
            code = self.glimpse_encoder(g.flatten(0, 1)).unflatten(0, (B, I))
            post_raw = self.prop_post(torch.cat([h, code], -1))
            (where_q, what_q, depth_q), pres_q = _split_gaussian(post_raw, (4, dw, 1))
        else:
            where_q, what_q, depth_q, pres_q = where_p, what_p, depth_p, pres_p

        d_where = reparam_sample(where_q, rng)
        prev_s = (objects.scale / cfg.scale_max).clamp(1e-4, 1 - 1e-4)
        scale = cfg.scale_max * torch.sigmoid(torch.log(prev_s) - torch.log1p(-prev_s) + d_where[..., :2])
        center = objects.center + torch.tanh(d_where[..., 2:]) * (2.0 / cfg.G)
        what = reparam_sample(what_q, rng)
        depth = reparam_sample(depth_q, rng)[..., 0]
        keep = relaxed_bernoulli_sample(pres_q[..., 0], cfg.pres_temperature, rng)
        pres = objects.pres * keep * alive.to(keep.dtype)

        weight = objects.pres * alive.to(objects.pres.dtype)
        kl = weight * bernoulli_kl(torch.sigmoid(pres_q[..., 0]), torch.sigmoid(pres_p[..., 0]))
        if frame is not None:
            gauss = sum(kl_diag_gaussian(q, p) for q, p in
                        ((where_q, where_p), (what_q, what_p), (depth_q, depth_p)))
            kl = kl + weight * gauss
        new = ObjectSet(pres=pres, scale=scale, center=center, depth=depth, what=what, h=h, c=c,
                        threshold=cfg.presence_threshold)
        return new, kl.sum(-1)

    # -- merge and render ------------------------------------------------------
    def merge(self, propagated: ObjectSet, proposals: ObjectSet) -> ObjectSet:
        """Keep the ``I_max`` candidates with the highest presence."""
        both = ObjectSet.cat(propagated, proposals)
        order = torch.argsort(both.pres.detach(), dim=1, descending=True, stable=True)
        return both.gather(order[:, :self.cfg.I_max])

    def render(self, objects: ObjectSet) -> AlphaComposite:
        cfg = self.cfg
        B, I = objects.pres.shape
        patch = self.glimpse_decoder(objects.what.flatten(0, 1)).unflatten(0, (B, I))
        patch = torch.sigmoid(patch)
        layers = paste_glimpses(patch, objects.scale, objects.center, cfg.image_size)
        weight = layers[:, :, 3:] * objects.pres[:, :, None, None, None]
        return composite_layers(layers[:, :, :3], weight, objects.depth, cfg.depth_compositing)


def render_objects(module: ObjectModule, objects: ObjectSet) -> AlphaComposite:
    return module.render(objects)


def object_elbo(frames: torch.Tensor, mus: torch.Tensor, kls, sigma_obs: float) -> torch.Tensor:
    """Full-frame NLL under ``sigma_obs`` plus object KLs, summed over time and batch.

    ``frames`` and ``mus`` are ``[T, ...]``; ``kls`` is a length-T sequence of ``[B]``.
    """
    if frames.shape != mus.shape:
        raise ValueError(f"frames {tuple(frames.shape)} vs reconstructions {tuple(mus.shape)}")
    if len(kls) != frames.shape[0]:
        raise ValueError(f"{frames.shape[0]} frames but {len(kls)} KL terms")
    total = frames.new_zeros(())
    for x, mu, kl in zip(frames, mus, kls):
        total = total + gaussian_nll(x, mu, sigma_obs) + kl.sum()
    return total
