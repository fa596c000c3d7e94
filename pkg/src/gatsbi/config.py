"""Model configuration, dataset presets, training schedules and the config file format.

Config files are plain ``key = value`` lines. ``#`` starts a comment. Values are
Python literals (numbers, booleans, strings, lists/tuples). A ``preset`` key,
when present, selects the base preset that the remaining keys override::

    # desk-scale ROLL variant
    preset = desk
    K = 4
    sample_lengths = [5, 7, 10]
"""
from __future__ import annotations

import ast
import bisect
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

INTER_MODES = ("INTER1", "INTER2", "INTER3")


@dataclass(frozen=True)
class StageSchedule:
    """Step boundaries of the sequential module training."""

    mixture_joins: int
    objects_join: int
    keypoint_stops: int
    alpha_fix: Tuple[int, int]

    def __post_init__(self):
        if min(self.mixture_joins, self.objects_join, self.keypoint_stops, *self.alpha_fix) < 0:
            raise ValueError("schedule steps must be non-negative")
        if not self.mixture_joins <= self.objects_join:
            raise ValueError("objects cannot join before the mixture module")
        if not self.mixture_joins <= self.keypoint_stops:
            raise ValueError("keypoint training must not stop before the mixture joins")
        if self.alpha_fix[0] > self.alpha_fix[1]:
            raise ValueError("alpha_fix range is reversed")

    def active_losses(self, step: int) -> frozenset:
        active = set()
        if step < self.keypoint_stops:
            active.add("keypoint")
        if step >= self.mixture_joins:
            active.add("mixture")
        if step >= self.objects_join:
            active.add("objects")
        return frozenset(active)

    def alpha_fixed(self, step: int) -> bool:
        lo, hi = self.alpha_fix
        return lo <= step < hi


@dataclass(frozen=True)
class Curriculum:
    lengths: Tuple[int, ...]
    milestones: Tuple[int, ...]

    def __post_init__(self):
        if len(self.milestones) != len(self.lengths) - 1:
            raise ValueError(
                f"curriculum needs len(milestones) == len(lengths) - 1, "
                f"got {len(self.milestones)} and {len(self.lengths)}"
            )
        if any(b < a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ValueError("curriculum lengths must be nondecreasing")
        if any(b < a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("curriculum milestones must be nondecreasing")

    def sample_length(self, step: int) -> int:
        return self.lengths[bisect.bisect_right(self.milestones, step)]


@dataclass(frozen=True)
class ModelConfig:
    # identity
    dataset: str = "roll"

    # shared across datasets
    image_size: Tuple[int, int] = (64, 64)
    sample_lengths: Tuple[int, ...] = (5, 7, 10, 12, 15, 17, 20, 22, 25, 27, 30)
    sample_milestones: Tuple[int, ...] = (
        20_000, 30_000, 40_000, 50_000, 60_000, 70_000, 80_000, 90_000, 100_000, 110_000)
    lr_decay: float = 0.8
    lr_milestones: Tuple[int, ...] = (100_000, 150_000)
    n_keypoints: int = 32
    kp_hidden_dim: int = 512
    kp_latent_dim: int = 16
    best_belief_samples: int = 50
    kp_sep_scale: float = 0.02
    kp_sparse_scale: float = 0.002
    kp_kl_scale: float = 0.001
    heatmap_reg_scale: float = 0.01
    enhanced_action_dim: int = 32
    z_mask_dim: int = 32
    h_mask_dim: int = 128
    z_comp_dim: int = 64
    h_comp_dim: int = 128
    sigma_obs: float = 0.1

    # per-dataset (defaults are ROLL)
    optimizer: str = "adam"
    lr: float = 3e-4
    batch_size: int = 4
    K: int = 3
    keypoint_only_steps: Tuple[int, int] = (0, 80_000)
    mixture_only_steps: Tuple[int, int] = (80_000, 110_000)
    mixture_keypoint_joint_steps: Tuple[int, int] = (80_000, 300_000)
    alpha_fix_steps: Tuple[int, int] = (110_000, 120_000)
    alpha_fix: float = 0.45
    sigma_mix: float = 0.1
    G: int = 4
    I_max: int = 7
    action_dim: int = 7
    residual_reg: float = 1.0
    residual_scale: float = 2.0

    # architecture and sampling choices
    action_hidden: Tuple[int, ...] = (64, 64)
    frame_code_dim: int = 128
    mlp_hidden: int = 128
    mask_code_dim: int = 64
    comp_code_dim: int = 128
    kp_grid: int = 16
    k_nn: Optional[int] = 3  # None selects the fully-connected graph
    inter_mode: str = "INTER3"
    knn_distance: str = "geometric"  # or "learned"
    ambient_fusion: str = "sum"  # or "concat"
    z_what_dim: int = 32
    h_obj_dim: int = 128
    glimpse_size: int = 16
    crop_size: int = 16
    interaction_dim: int = 128
    ambient_dim: int = 32
    rel_embed_dim: int = 16
    z_pres_prior: float = 0.1
    z_pres_reject_prior: float = 1e-4
    pres_temperature: float = 1.0
    presence_threshold: float = 0.5
    scale_max: float = 0.5
    depth_compositing: str = "softmax"  # or "hard"
    width_mult: float = 1.0
    separate_prior_posterior_rnn: bool = True
    joint_action_conditioning: bool = True
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        problems = []
        if self.K < 2:
            problems.append("K must be >= 2")
        if self.n_keypoints < 1:
            problems.append("n_keypoints must be >= 1")
        if self.G < 1:
            problems.append("G must be >= 1")
        if self.I_max < 1:
            problems.append("I_max must be >= 1")
        if self.k_nn is not None and self.k_nn < 1:
            problems.append("k_nn must be >= 1 (or None for fully connected)")
        if self.inter_mode not in INTER_MODES:
            problems.append(f"inter_mode must be one of {INTER_MODES}, got {self.inter_mode!r}")
        if self.knn_distance not in ("geometric", "learned"):
            problems.append("knn_distance must be 'geometric' or 'learned'")
        if self.ambient_fusion not in ("sum", "concat"):
            problems.append("ambient_fusion must be 'sum' or 'concat'")
        if self.depth_compositing not in ("softmax", "hard"):
            problems.append("depth_compositing must be 'softmax' or 'hard'")
        dims = {
            "action_dim": self.action_dim, "enhanced_action_dim": self.enhanced_action_dim,
            "z_mask_dim": self.z_mask_dim, "h_mask_dim": self.h_mask_dim,
            "z_comp_dim": self.z_comp_dim, "h_comp_dim": self.h_comp_dim,
            "kp_hidden_dim": self.kp_hidden_dim, "kp_latent_dim": self.kp_latent_dim,
            "frame_code_dim": self.frame_code_dim, "z_what_dim": self.z_what_dim,
            "h_obj_dim": self.h_obj_dim, "glimpse_size": self.glimpse_size,
            "crop_size": self.crop_size, "interaction_dim": self.interaction_dim,
            "ambient_dim": self.ambient_dim, "rel_embed_dim": self.rel_embed_dim,
            "kp_grid": self.kp_grid, "batch_size": self.batch_size,
            "mlp_hidden": self.mlp_hidden, "mask_code_dim": self.mask_code_dim,
            "comp_code_dim": self.comp_code_dim,
        }
        problems += [f"{k} must be > 0" for k, v in dims.items() if v <= 0]
        h, w = self.image_size
        if h <= 0 or h & (h - 1) or h != w:
            problems.append("image_size must be square with a power-of-two side")
        if h % self.kp_grid or w % self.kp_grid:
            problems.append("kp_grid must divide the image size")
        if min(self.sigma_obs, self.sigma_mix) <= 0:
            problems.append("likelihood standard deviations must be positive")
        if not 0.0 <= self.alpha_fix <= 1.0:
            problems.append("alpha_fix must lie in [0, 1]")
        if self.width_mult <= 0:
            problems.append("width_mult must be > 0")
        if self.optimizer.lower() != "adam":
            problems.append("only the Adam optimizer is supported")
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))
        # raises on its own if inconsistent
        self.schedule
        self.curriculum

    @property
    def schedule(self) -> StageSchedule:
        return StageSchedule(
            mixture_joins=self.mixture_only_steps[0],
            objects_join=self.mixture_only_steps[1],
            keypoint_stops=self.mixture_keypoint_joint_steps[1],
            alpha_fix=tuple(self.alpha_fix_steps),
        )

    @property
    def curriculum(self) -> Curriculum:
        return Curriculum(tuple(self.sample_lengths), tuple(self.sample_milestones))

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)!r}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

_ROLL = ModelConfig()

_PUSH1 = _ROLL.replace(
    dataset="push1", lr=4e-4,
    mixture_only_steps=(80_000, 120_000),
    mixture_keypoint_joint_steps=(80_000, 1_000_000),
    alpha_fix_steps=(120_000, 140_000), alpha_fix=0.4,
    residual_reg=0.01,
)

_PUSH2 = _ROLL.replace(
    dataset="push2", lr=4e-4,
    mixture_only_steps=(80_000, 100_000),
    mixture_keypoint_joint_steps=(80_000, 900_000),
    alpha_fix_steps=(100_000, 110_000), alpha_fix=0.4,
    sigma_mix=0.5, residual_reg=0.01, residual_scale=1.0,
)

_BAIR = _ROLL.replace(
    dataset="bair", lr=4e-4, K=4,
    mixture_only_steps=(80_000, 110_000),
    mixture_keypoint_joint_steps=(80_000, 160_000),
    alpha_fix_steps=(100_000, 110_000), alpha_fix=0.4,
    sigma_mix=0.5, G=8, I_max=12, action_dim=3,
)

DESK_STEP_SCALE = 0.01


def scale_schedule(cfg: ModelConfig, factor: float) -> ModelConfig:
    """Multiply every step count (stages, curriculum, lr milestones) by ``factor``."""

    def s(v):
        return int(round(v * factor))

    return cfg.replace(
        keypoint_only_steps=tuple(s(v) for v in cfg.keypoint_only_steps),
        mixture_only_steps=tuple(s(v) for v in cfg.mixture_only_steps),
        mixture_keypoint_joint_steps=tuple(s(v) for v in cfg.mixture_keypoint_joint_steps),
        alpha_fix_steps=tuple(s(v) for v in cfg.alpha_fix_steps),
        sample_milestones=tuple(s(v) for v in cfg.sample_milestones),
        lr_milestones=tuple(s(v) for v in cfg.lr_milestones),
    )


# Desk scale: ROLL hyperparameters, step counts / 100, narrower conv stacks and
# glimpses so a few thousand steps fit on one CPU.
_DESK = scale_schedule(_ROLL, DESK_STEP_SCALE).replace(
    dataset="desk", width_mult=0.25, glimpse_size=8, crop_size=8, action_dim=2,
)

PRESETS: Dict[str, ModelConfig] = {
    "roll": _ROLL,
    "push1": _PUSH1,
    "push2": _PUSH2,
    "bair": _BAIR,
    "desk": _DESK,
    "paper": _ROLL.replace(dataset="paper"),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None


def tiny_config(**overrides) -> ModelConfig:
    """Small instance for gradient checks and fast tests (16x16, K=2, 4 keypoints, G=2)."""
    base = _ROLL.replace(
        dataset="tiny", image_size=(16, 16), K=2, n_keypoints=4, kp_grid=4, G=2, I_max=8,
        action_dim=2, enhanced_action_dim=8, action_hidden=(8, 8),
        z_mask_dim=4, h_mask_dim=8, z_comp_dim=4, h_comp_dim=8, frame_code_dim=8,
        mlp_hidden=16, mask_code_dim=8, comp_code_dim=8,
        kp_hidden_dim=8, kp_latent_dim=2, z_what_dim=4, h_obj_dim=8, glimpse_size=4,
        crop_size=4, interaction_dim=8, ambient_dim=4, rel_embed_dim=4, width_mult=1 / 16,
        k_nn=2, mixture_only_steps=(0, 0), mixture_keypoint_joint_steps=(0, 10),
        keypoint_only_steps=(0, 0), alpha_fix_steps=(0, 0),
    )
    return base.replace(**overrides) if overrides else base


# ---------------------------------------------------------------------------
# Config file I/O
# ---------------------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


def _coerce(name: str, value: Any) -> Any:
    default = _FIELDS[name].default
    if isinstance(default, tuple) and isinstance(value, (list, tuple)):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def parse_config_text(text: str, base: Optional[ModelConfig] = None) -> ModelConfig:
    values: Dict[str, Any] = {}
    base_name = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            value = raw  # bare strings
        if key == "preset":
            base_name = str(value)
            continue
        if key not in _FIELDS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    cfg = preset(base_name) if base_name else (base or _ROLL)
    return cfg.replace(**values)


def load_config(path, base: Optional[ModelConfig] = None) -> ModelConfig:
    return parse_config_text(Path(path).read_text(), base=base)


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(cfg.to_text())
