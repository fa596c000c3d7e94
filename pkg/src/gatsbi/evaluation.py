"""Conditioned rollouts, frame metrics, object-centre error and metric CSVs."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .core import Episode, PathLike, seeded_rng
from .model import GatsbiModel

PSNR_CAP = 100.0
N_COND = 5
CSV_COLUMNS = ("step_index", "metric", "mean", "ci95_low", "ci95_high", "n")
RAW_COLUMNS = ("episode", "step_index", "metric", "value")


class MissingActionsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------

@dataclass
class RolloutResult:
    frames: torch.Tensor                      # [T, 3, H, W]
    posterior: List[bool]                     # per step
    exports: List[Dict[str, torch.Tensor]] = field(default_factory=list)
    object_centers: List[torch.Tensor] = field(default_factory=list)   # per step [n_alive, 2] pixels

    @property
    def n_cond(self) -> int:
        return sum(self.posterior)

    @property
    def predictions(self) -> torch.Tensor:
        return self.frames[self.n_cond:]


def conditioned_rollout(model: GatsbiModel, episode: Episode, n_cond: int = N_COND,
                        horizon: Optional[int] = None, seed: int = 0,
                        actions: Optional[torch.Tensor] = None) -> RolloutResult:
    """Infer from the first ``n_cond`` frames, then generate up to ``horizon`` steps.

    ``actions [T', A]`` overrides the episode's actions and may extend past the
    episode. Every step consumes one action.
    """
    horizon = episode.length if horizon is None else horizon
    acts = episode.actions if actions is None else actions
    if horizon > acts.shape[0]:
        raise MissingActionsError(
            f"horizon {horizon} needs {horizon} actions, episode {episode.id!r} provides {acts.shape[0]}")
    if not 1 <= n_cond <= min(horizon, episode.length):
        raise ValueError(f"n_cond={n_cond} must lie in [1, min(horizon, episode length)]")
    dtype = next(model.parameters()).dtype
    frames = episode.frames[None, :n_cond].to(dtype)
    acts = acts[None, :horizon].to(dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model.forward_sequence(frames, acts, seeded_rng(seed), n_cond=n_cond)
    finally:
        model.train(was_training)
    W = model.cfg.width
    centers = []
    for r in out.records:
        if r.objects is None:
            centers.append(torch.zeros(0, 2))
            continue
        objs = r.objects.objects
        alive = objs.alive[0]
        centers.append(((objs.center[0][alive] + 1) / 2 * W).float())
    return RolloutResult(out.predictions[0].float(), [r.posterior for r in out.records],
                         [r.export(0) for r in out.records], centers)


# ---------------------------------------------------------------------------
# Frame metrics (inputs [..., C, H, W]; outputs one value per leading index)
# ---------------------------------------------------------------------------

def _check(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(pred, target)
    return ((pred - target) ** 2).flatten(-3).mean(-1)


def psnr(pred: torch.Tensor, target: torch.Tensor, max_val: float = 1.0) -> torch.Tensor:
    err = mse(pred, target)
    val = 10 * torch.log10(max_val ** 2 / err)
    return torch.where(err > 0, val, torch.full_like(val, PSNR_CAP)).clamp(max=PSNR_CAP)


def cosine_similarity(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(pred, target)
    return F.cosine_similarity(pred.flatten(-3), target.flatten(-3), dim=-1, eps=1e-12)


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(pred: torch.Tensor, target: torch.Tensor, max_val: float = 1.0, window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> torch.Tensor:
    """Mean structural similarity over channels and valid window positions."""
    _check(pred, target)
    lead = pred.shape[:-3]
    C, H, W = pred.shape[-3:]
    if min(H, W) < window:
        raise ValueError(f"frames {H}x{W} smaller than the {window}x{window} window")
    x = pred.reshape(-1, C, H, W).double()
    y = target.reshape(-1, C, H, W).double()
    w = gaussian_window(window, sigma).to(x.device)[None, None].expand(C, 1, window, window)

    def blur(z):
        return F.conv2d(z, w, groups=C)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    c1, c2 = (k1 * max_val) ** 2, (k2 * max_val) ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return s.flatten(1).mean(1).reshape(lead).to(pred.dtype)


# ---------------------------------------------------------------------------
# Plugin registry
# ---------------------------------------------------------------------------

class _Unavailable:
    """Returned in place of a scorer whose implementation is not installed."""

    def __init__(self, name: str, reason: str):
        self.name = name
        self.reason = reason

    def __bool__(self):
        return False

    def __repr__(self):
        return f"<unavailable metric {self.name}: {self.reason}>"


def unavailable(name: str, reason: str = "not installed") -> _Unavailable:
    return _Unavailable(name, reason)


def is_unavailable(x) -> bool:
    return isinstance(x, _Unavailable)


Scorer = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

BUILTIN_METRICS: Dict[str, Scorer] = {
    "mse": mse, "psnr": psnr, "ssim": ssim, "cosim": cosine_similarity,
}
_PLUGINS: Dict[str, Optional[Scorer]] = {"lpips": None, "fvd": None}


def register_metric(name: str, scorer: Scorer) -> None:
    _PLUGINS[name] = scorer


def available_metrics() -> List[str]:
    return sorted(set(BUILTIN_METRICS) | set(_PLUGINS))


def metric_plugin(name: str):
    """The scorer registered under ``name``, or an unavailable sentinel.

    Unknown names raise ``KeyError`` listing the known ones.
    """
    if name in BUILTIN_METRICS:
        return BUILTIN_METRICS[name]
    if name not in _PLUGINS:
        raise KeyError(f"unknown metric {name!r}; available: {', '.join(available_metrics())}")
    scorer = _PLUGINS[name]
    return unavailable(name) if scorer is None else scorer


# ---------------------------------------------------------------------------
# Object-centre error
# ---------------------------------------------------------------------------

def match_centers(pred: np.ndarray, truth: np.ndarray, diagonal: float) -> List[float]:
    """Per-object errors after Hungarian matching; every unmatched object costs ``diagonal``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    errors: List[float] = []
    if len(pred) and len(truth):
        cost = np.linalg.norm(pred[:, None] - truth[None], axis=-1)
        rows, cols = linear_sum_assignment(cost)
        errors = cost[rows, cols].tolist()
    errors += [diagonal] * abs(len(pred) - len(truth))
    return errors


def interaction_pixel_error(pred_centers: Sequence, true_centers: Sequence, window: Iterable[int],
                            frame_size) -> float:
    """Mean centre distance in pixels over the steps in ``window``."""
    H, W = (frame_size, frame_size) if isinstance(frame_size, int) else frame_size
    diagonal = math.hypot(H, W)
    errors: List[float] = []
    for t in window:
        errors += match_centers(np.asarray(pred_centers[t]), np.asarray(true_centers[t]), diagonal)
    if not errors:
        raise ValueError("empty evaluation window")
    return float(np.mean(errors))


def event_window(events: Iterable[int], T: int, radius: int = 3, start: int = 0) -> List[int]:
    """Steps within ``radius`` of any event, clipped to ``[start, T)``."""
    steps = set()
    for e in events:
        e = int(e)
        steps.update(range(max(start, e - radius), min(T, e + radius + 1)))
    return sorted(steps)


# ---------------------------------------------------------------------------
# Aggregation and CSV
# ---------------------------------------------------------------------------

def confidence_interval(values: Sequence[float], level: float = 0.95):
    """Mean and two-sided Student-t interval; a single value gives a zero-width interval."""
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    if len(v) < 2:
        return m, m, m
    half = float(stats.t.ppf(0.5 + level / 2, len(v) - 1) * v.std(ddof=1) / math.sqrt(len(v)))
    return m, m - half, m + half


def aggregate(raw: Dict[str, np.ndarray]) -> List[Dict[str, float]]:
    """``raw[metric]`` is ``[episodes, steps]``; one row per (step, metric)."""
    rows = []
    for metric, values in raw.items():
        values = np.asarray(values, dtype=np.float64)
        for s in range(values.shape[1]):
            m, lo, hi = confidence_interval(values[:, s])
            rows.append({"step_index": s, "metric": metric, "mean": m, "ci95_low": lo,
                         "ci95_high": hi, "n": values.shape[0]})
    return rows


def write_metrics_csv(path: PathLike, rows: Sequence[Dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k in ("mean", "ci95_low", "ci95_high") else r[k])
                        for k in CSV_COLUMNS})


def write_raw_csv(path: PathLike, raw: Dict[str, np.ndarray], episode_ids: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RAW_COLUMNS)
        w.writeheader()
        for metric, values in raw.items():
            for e, row in enumerate(np.asarray(values)):
                for s, v in enumerate(row):
                    w.writerow({"episode": episode_ids[e], "step_index": s, "metric": metric,
                                "value": repr(float(v))})


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def evaluate_episodes(model: GatsbiModel, episodes: Sequence[Episode], metrics: Sequence[str],
                      n_cond: int = N_COND, horizon: Optional[int] = None, seed: int = 0):
    """Roll out every episode and score each step; returns ``({metric: [E, T]}, rollouts)``.

    Unavailable plugin metrics are reported as such rather than scored.
    """
    scorers = {}
    for name in metrics:
        s = metric_plugin(name)
        if is_unavailable(s):
            raise RuntimeError(f"metric {name!r} is unavailable: {s.reason}")
        scorers[name] = s
    raw: Dict[str, List[np.ndarray]] = {m: [] for m in metrics}
    rollouts = []
    for ep in episodes:
        h = min(ep.length, horizon) if horizon is not None else ep.length
        res = conditioned_rollout(model, ep, n_cond=min(n_cond, h), horizon=h, seed=seed)
        target = ep.frames[:h].to(res.frames.dtype)
        for name, fn in scorers.items():
            vals = torch.as_tensor(fn(res.frames, target)).double().numpy()
            raw[name].append(np.broadcast_to(vals, (h,)).copy())
        rollouts.append(res)
    return {k: np.stack(v) for k, v in raw.items()}, rollouts


def episode_pixel_error(result: RolloutResult, episode: Episode, radius: int = 3) -> float:
    """Centre error of the rollout around the episode's interaction events.

    Falls back to every step when the episode records no events.
    """
    T = result.frames.shape[0]
    events = []
    for key in ("collisions", "contacts"):
        if key in episode.extras and episode.extras[key].numel():
            ev = episode.extras[key]
            events = (ev[:, 0] if ev.dim() == 2 else ev).long().tolist()
            break
    window = event_window(events, T, radius) if events else list(range(T))
    truth = episode.extras["centers"][:T].numpy()
    return interaction_pixel_error([c.numpy() for c in result.object_centers], truth, window,
                                   tuple(episode.frames.shape[-2:]))
