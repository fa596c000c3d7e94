"""Staged training: loss gating, curriculum lengths, alpha fixing, lr decay and checkpoints."""
from __future__ import annotations

import bisect
import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import torch

from .config import ModelConfig, parse_config_text
from .core import (Episode, PathLike, bytes_tensor, derive_seed, load_tensor_container,
                   save_tensor_container, seeded_rng, tensor_bytes)
from .datasets import sample_batch
from .model import GatsbiModel, SequenceOutput

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
LOSS_TERMS = ("keypoint", "mixture", "objects")
LOSS_COLUMNS = ("step", "length", "lr", "active", "alpha_fixed", "total", *LOSS_TERMS, "recon_mse")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, terms: Dict[str, float]):
        self.step = step
        self.terms = terms
        detail = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Schedule queries
# ---------------------------------------------------------------------------

def active_losses(cfg: ModelConfig, step: int) -> frozenset:
    return cfg.schedule.active_losses(step)


def sample_length(cfg: ModelConfig, step: int) -> int:
    return cfg.curriculum.sample_length(step)


def effective_alpha(cfg: ModelConfig, step: int, learned_alpha=None):
    """The fixed alpha inside the fixing window, otherwise ``learned_alpha`` unchanged."""
    return cfg.alpha_fix if cfg.schedule.alpha_fixed(step) else learned_alpha


def learning_rate(cfg: ModelConfig, step: int) -> float:
    return cfg.lr * cfg.lr_decay ** bisect.bisect_right(cfg.lr_milestones, step)


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: GatsbiModel
    optimizer: torch.optim.Optimizer
    step: int
    seed: int

    @property
    def cfg(self) -> ModelConfig:
        return self.model.cfg


def make_optimizer(model: GatsbiModel, cfg: ModelConfig) -> torch.optim.Optimizer:
    if cfg.optimizer.lower() != "adam":
        raise ValueError(f"unsupported optimizer {cfg.optimizer!r}")
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def init_train_state(cfg: ModelConfig, seed: int, dtype=torch.float32) -> TrainState:
    torch.manual_seed(derive_seed(seed, "init") % (2 ** 63))
    model = GatsbiModel(cfg).to(dtype)
    return TrainState(model, make_optimizer(model, cfg), 0, seed)


def train_step(state: TrainState, frames: torch.Tensor, actions: torch.Tensor) -> Dict[str, float]:
    """One optimizer step on ``frames [B, T, 3, H, W]``, ``actions [B, T, A]``.

    The batch is truncated to the curriculum length; sampling noise comes from
    a stream derived from ``(seed, step)`` so restored runs replay exactly.
    """
    cfg, step = state.cfg, state.step
    active = active_losses(cfg, step)
    T = min(sample_length(cfg, step), frames.shape[1])
    frames, actions = frames[:, :T], actions[:, :T]
    lr = learning_rate(cfg, step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    alpha = effective_alpha(cfg, step) if "objects" in active else None

    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    out: SequenceOutput = state.model.forward_sequence(
        frames, actions, seeded_rng(derive_seed(state.seed, "step", step)), active=active,
        alpha_override=alpha)
    terms = {k: float(out.losses[k].detach()) if k in out.losses else 0.0 for k in LOSS_TERMS}
    total = float(out.total.detach())
    if not math.isfinite(total):
        raise NonFiniteLossError(step, {**terms, "total": total})
    if out.total.requires_grad:
        out.total.backward()
        state.optimizer.step()
    state.step = step + 1
    return {
        "step": step, "length": T, "lr": lr, "active": "+".join(sorted(active)),
        "alpha_fixed": int(alpha is not None), "total": total, **terms, "recon_mse": out.recon_mse,
    }


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path: PathLike) -> None:
    """Parameters, buffers, Adam moments and metadata in one GTSR container."""
    tensors: Dict[str, object] = {}
    for name, p in state.model.named_parameters():
        tensors[f"param/{name}"] = p.detach()
    for name, b in state.model.named_buffers():
        tensors[f"buffer/{name}"] = b.detach()
    opt = state.optimizer.state_dict()
    for idx, slots in opt["state"].items():
        for key, value in slots.items():
            tensors[f"optim/{idx}/{key}"] = torch.as_tensor(value)
    meta = {
        "format": CHECKPOINT_FORMAT, "step": state.step, "seed": state.seed,
        "config": state.cfg.to_text(), "dtype": str(next(state.model.parameters()).dtype),
        "param_groups": [{k: v for k, v in g.items() if k != "params"} for g in opt["param_groups"]],
    }
    tensors["__meta__"] = bytes_tensor(json.dumps(meta, sort_keys=True))
    save_tensor_container(path, tensors)


def load_checkpoint(path: PathLike) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    tensors = load_tensor_container(path)
    if "__meta__" not in tensors:
        raise CheckpointError(f"{path}: no metadata entry")
    meta = json.loads(tensor_bytes(tensors["__meta__"]).decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: checkpoint format {meta.get('format')} != {CHECKPOINT_FORMAT}")
    cfg = parse_config_text(meta["config"])
    dtype = getattr(torch, meta["dtype"].split(".")[-1])
    model = GatsbiModel(cfg).to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(tensors[f"param/{name}"])
        for name, b in model.named_buffers():
            b.copy_(tensors[f"buffer/{name}"])
    optimizer = make_optimizer(model, cfg)
    opt_state: Dict[int, Dict[str, torch.Tensor]] = {}
    for key, value in tensors.items():
        if key.startswith("optim/"):
            _, idx, slot = key.split("/", 2)
            opt_state.setdefault(int(idx), {})[slot] = value.to(dtype)
    groups = meta["param_groups"]
    groups[0]["params"] = list(range(len(list(model.parameters()))))
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    return TrainState(model, optimizer, int(meta["step"]), int(meta["seed"]))


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def batch_for_step(episodes: Sequence[Episode], cfg: ModelConfig, seed: int, step: int):
    rng = np.random.default_rng(derive_seed(seed, "batch", step))
    return sample_batch(episodes, cfg.batch_size, sample_length(cfg, step), rng)


def train(state: TrainState, episodes: Sequence[Episode], steps: int, out_dir: PathLike,
          checkpoint_every: int = 500, log_every: int = 50) -> List[Dict[str, float]]:
    """Run until ``state.step == steps``, appending to ``losses.csv`` in ``out_dir``.

    On a non-finite loss the per-term values go to ``nonfinite_step<N>.json``
    before the error propagates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "losses.csv"
    fresh = not csv_path.exists() or state.step == 0
    rows: List[Dict[str, float]] = []
    with open(csv_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        if fresh:
            writer.writeheader()
        while state.step < steps:
            frames, actions = batch_for_step(episodes, state.cfg, state.seed, state.step)
            try:
                row = train_step(state, frames, actions)
            except NonFiniteLossError as exc:
                dump = out / f"nonfinite_step{exc.step}.json"
                dump.write_text(json.dumps({"step": exc.step, "terms": exc.terms}, indent=2))
                exc.dump_path = dump
                raise
            writer.writerow(row)
            rows.append(row)
            if row["step"] % log_every == 0:
                fh.flush()
                log.info("step %d T=%d active=%s total=%.1f mse=%.5f", row["step"], row["length"],
                         row["active"], row["total"], row["recon_mse"])
            if state.step % checkpoint_every == 0 or state.step == steps:
                save_checkpoint(state, out / "checkpoint.gtsr")
    return rows


def read_loss_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        raise ValueError(f"need at least {window} values, have {len(v)}")
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
