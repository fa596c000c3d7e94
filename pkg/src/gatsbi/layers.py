"""Small network building blocks shared by the modules."""
from __future__ import annotations

import math
from typing import Iterable, List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


def mlp(in_dim: int, hidden: Sequence[int], out_dim: int, act=nn.CELU) -> nn.Sequential:
    layers: List[nn.Module] = []
    d = in_dim
    for h in hidden:
        layers += [nn.Linear(d, h), act()]
        d = h
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


def scaled(channels: int, width_mult: float) -> int:
    return max(2, int(round(channels * width_mult)))


def group_norm(groups: int, channels: int, width_mult: float = 1.0) -> nn.GroupNorm:
    g = max(1, int(round(groups * width_mult)))
    g = math.gcd(g, channels)
    return nn.GroupNorm(g, channels)


class SubPixelConv(nn.Module):
    """Convolution to ``out * r^2`` channels followed by a pixel shuffle (x ``r``)."""

    def __init__(self, in_ch: int, out_ch: int, factor: int, kernel: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch * factor * factor, kernel, padding=kernel // 2)
        self.shuffle = nn.PixelShuffle(factor)

    def forward(self, x):
        return self.shuffle(self.conv(x))


def upsample_factors(size: int, pattern: Iterable[int] = (4, 2, 4, 4)) -> List[int]:
    """Follow ``pattern`` until the product reaches ``size`` (a power of two)."""
    factors, prod = [], 1
    for f in pattern:
        if prod >= size:
            break
        f = min(f, size // prod)
        factors.append(f)
        prod *= f
    while prod < size:
        f = min(2, size // prod)
        factors.append(f)
        prod *= f
    return factors


def coord_grid(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """``[2, h, w]`` coordinate channels spanning [-1, 1] linearly (x first, then y)."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx, yy], dim=0)


def spatial_broadcast(z: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Tile ``z [N, D]`` over ``h x w`` and append coordinate channels -> ``[N, D+2, h, w]``."""
    n, d = z.shape
    tiled = z[:, :, None, None].expand(n, d, h, w)
    coords = coord_grid(h, w, dtype=z.dtype, device=z.device).expand(n, 2, h, w)
    return torch.cat([tiled, coords], dim=1)


def pixel_centres(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Normalised ``align_corners=False`` pixel-centre coordinates ``[h, w, 2]`` (x, y)."""
    ys = (torch.arange(h, dtype=dtype, device=device) + 0.5) / h * 2 - 1
    xs = (torch.arange(w, dtype=dtype, device=device) + 0.5) / w * 2 - 1
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx, yy], dim=-1)


def zero_parameters(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
