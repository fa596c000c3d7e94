"""``gatsbi`` command line: gen-data, train, rollout, eval, ablate.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from . import __version__
from .config import ModelConfig, load_config, preset, scale_schedule
from .core import save_tensor_container
from .datasets import GenerationError, generate_agent_push, generate_balls, load_episode, load_split
from .evaluation import (MissingActionsError, aggregate, available_metrics, conditioned_rollout,
                         episode_pixel_error, evaluate_episodes, is_unavailable, metric_plugin,
                         write_metrics_csv, write_raw_csv)
from .plotting import save_ablation_bars, save_loss_curves, save_metric_curves, save_rollout_strip
from .training import NonFiniteLossError, init_train_state, load_checkpoint, read_loss_csv, train

log = logging.getLogger("gatsbi")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SEED_ENV = "GATSBI_SEED"
ABLATION_COLUMNS = ("inter_mode", "graph", "psnr", "mse", "pixel_error", "steps")
# ablation cells compress the full schedule so every stage runs within the budget
ABLATION_SCHEDULE_SPAN = 200_000


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

def code_hash() -> str:
    """SHA-256 over the package sources, in a stable file order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, seed: int, cfg: Optional[ModelConfig] = None,
                   data: Optional[str] = None, argv: Optional[Sequence[str]] = None,
                   params: Optional[Dict] = None) -> Path:
    """Write ``run.json`` (or ``run.<n>.json`` if one exists) before any compute."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run.json"
    n = 1
    while path.exists():
        path = out_dir / f"run.{n}.json"
        n += 1
    manifest = {
        "command": command, "argv": list(argv or []), "seed": seed, "code_hash": code_hash(),
        "version": __version__, "data": data, "out": str(out_dir),
        "config": cfg.to_dict() if cfg is not None else None, "params": params or {},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list))
    return path


def resolve_seed(seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None


# ---------------------------------------------------------------------------
# Config assembly
# ---------------------------------------------------------------------------

def build_config(args) -> ModelConfig:
    base = preset(args.preset) if getattr(args, "preset", None) else None
    if getattr(args, "config", None):
        cfg = load_config(args.config, base=base)
    else:
        cfg = base if base is not None else preset("desk")
    changes = {}
    if getattr(args, "inter_mode", None):
        changes["inter_mode"] = args.inter_mode.upper()
    if getattr(args, "fc", False):
        changes["k_nn"] = None
    elif getattr(args, "knn", None) is not None:
        changes["k_nn"] = args.knn
    return cfg.replace(**changes) if changes else cfg


def match_data(cfg: ModelConfig, episodes) -> ModelConfig:
    """Adopt the data's action dimension and frame size when they differ from the config."""
    ep = episodes[0]
    changes = {}
    if ep.action_dim != cfg.action_dim:
        log.info("action_dim %d -> %d to match the data", cfg.action_dim, ep.action_dim)
        changes["action_dim"] = ep.action_dim
    size = tuple(ep.frames.shape[-2:])
    if size != tuple(cfg.image_size):
        log.info("image_size %s -> %s to match the data", cfg.image_size, size)
        changes["image_size"] = size
    return cfg.replace(**changes) if changes else cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    if args.no_overwrite and out.exists() and any(out.iterdir()):
        log.error("output directory %s exists and --no-overwrite is set", out)
        return EXIT_FAILURE
    params = {k: getattr(args, k) for k in ("world", "balls", "objects", "episodes", "length", "size")}
    write_manifest(out, "gen-data", seed, argv=sys.argv, params=params)
    if args.world == "balls":
        generate_balls(args.balls, args.episodes, args.length, seed, out, size=args.size)
    else:
        generate_agent_push(args.objects, args.episodes, args.length, seed, out, size=args.size)
    log.info("wrote %d %s episodes to %s", args.episodes, args.world, out)
    return EXIT_OK


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    cfg = build_config(args)
    episodes = list(load_split(args.data))
    if args.max_episodes:
        episodes = episodes[:args.max_episodes]
    if not episodes:
        raise UsageError(f"no episodes in {args.data}")
    cfg = match_data(cfg, episodes)
    ckpt = out / "checkpoint.gtsr"
    if args.resume and ckpt.exists():
        state = load_checkpoint(ckpt)
        log.info("resuming from step %d", state.step)
    else:
        state = init_train_state(cfg, seed)
    write_manifest(out, "train", state.seed, state.cfg, args.data, sys.argv)
    steps = args.steps if args.steps is not None else state.cfg.schedule.keypoint_stops
    try:
        train(state, episodes, steps, out, checkpoint_every=args.checkpoint_every)
    except NonFiniteLossError as exc:
        log.error("%s; diagnostic dump at %s", exc, getattr(exc, "dump_path", "?"))
        return EXIT_FAILURE
    rows = read_loss_csv(out / "losses.csv")
    if rows:
        save_loss_curves(rows, out / "losses.png")
    return EXIT_OK


def _dump_decomposition(out: Path, exports: List[Dict[str, torch.Tensor]]) -> None:
    for t, ex in enumerate(exports):
        save_tensor_container(out / f"decomp_{t:03d}.gtsr", {k: v.float() for k, v in ex.items()})


def cmd_rollout(args) -> int:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    state = load_checkpoint(args.ckpt)
    write_manifest(out, "rollout", seed, state.cfg, args.episode, sys.argv)
    ep = load_episode(args.episode)
    try:
        res = conditioned_rollout(state.model, ep, n_cond=args.n_cond, horizon=args.horizon, seed=seed)
    except MissingActionsError as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    save_tensor_container(out / "frames.gtsr", {
        "frames": torch.round(res.frames.clamp(0, 1) * 255).to(torch.uint8),
        "posterior": torch.tensor(res.posterior, dtype=torch.uint8)})
    if args.dump_decomp:
        _dump_decomposition(out, res.exports)
    save_rollout_strip(ep.frames, res.frames, out / "rollout.png",
                       res.exports if args.dump_decomp else None, n_cond=res.n_cond)
    log.info("wrote %d frames to %s", res.frames.shape[0], out)
    return EXIT_OK


def _parse_metrics(text: str) -> List[str]:
    names = [m.strip().lower() for m in text.split(",") if m.strip()]
    for m in names:
        try:
            scorer = metric_plugin(m)
        except KeyError:
            raise UsageError(f"unknown metric {m!r}; available: {', '.join(available_metrics())}") from None
        if is_unavailable(scorer):
            raise UsageError(f"metric {m!r} is unavailable ({scorer.reason})")
    return names


def cmd_eval(args) -> int:
    seed = resolve_seed(args.seed)
    metrics = _parse_metrics(args.metrics)
    out = Path(args.out)
    state = load_checkpoint(args.ckpt)
    write_manifest(out, "eval", seed, state.cfg, args.data, sys.argv)
    episodes = list(load_split(args.data))
    if args.max_episodes:
        episodes = episodes[:args.max_episodes]
    raw, _ = evaluate_episodes(state.model, episodes, metrics, n_cond=args.n_cond,
                               horizon=args.horizon, seed=seed)
    rows = aggregate(raw)
    write_metrics_csv(out / "metrics.csv", rows)
    write_raw_csv(out / "metrics_raw.csv", raw, [e.id for e in episodes])
    save_metric_curves(rows, out / "metrics.png", n_cond=args.n_cond)
    return EXIT_OK


def parse_grid(items: Sequence[str]) -> Dict[str, List[str]]:
    grid = {"inter_mode": ["inter1", "inter2", "inter3"], "knn": ["3", "fc"]}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} must look like key=v1,v2")
        key, values = item.split("=", 1)
        if key not in grid:
            raise UsageError(f"unknown grid key {key!r}; use inter_mode or knn")
        grid[key] = [v.strip().lower() for v in values.split(",") if v.strip()]
    for m in grid["inter_mode"]:
        if m.upper() not in ("INTER1", "INTER2", "INTER3"):
            raise UsageError(f"unknown interaction mode {m!r}")
    for k in grid["knn"]:
        if k != "fc" and not k.isdigit():
            raise UsageError(f"knn values must be integers or 'fc', got {k!r}")
    return grid


def ablation_config(base: ModelConfig, budget: int, inter_mode: str, knn: str) -> ModelConfig:
    cfg = scale_schedule(preset("roll"), budget / ABLATION_SCHEDULE_SPAN)
    keep = {f: getattr(base, f) for f in ("width_mult", "glimpse_size", "crop_size", "action_dim",
                                           "image_size")}
    return cfg.replace(dataset="ablate", inter_mode=inter_mode.upper(),
                       k_nn=None if knn == "fc" else int(knn), **keep)


def cmd_ablate(args) -> int:
    seed = resolve_seed(args.seed)
    grid = parse_grid(args.grid)
    out = Path(args.out)
    base = build_config(args)
    train_eps = list(load_split(args.data))
    if args.max_episodes:
        train_eps = train_eps[:args.max_episodes]
    base = match_data(base, train_eps)
    eval_eps = list(load_split(args.eval_data)) if args.eval_data else train_eps
    eval_eps = eval_eps[:args.eval_episodes]
    write_manifest(out, "ablate", seed, base, args.data, sys.argv)
    rows = []
    for mode in grid["inter_mode"]:
        for knn in grid["knn"]:
            cell = f"{mode}_{'fc' if knn == 'fc' else 'knn' + knn}"
            cfg = ablation_config(base, args.budget_steps, mode, knn)
            state = init_train_state(cfg, seed)
            cell_dir = out / cell
            write_manifest(cell_dir, "ablate-cell", seed, cfg, args.data, sys.argv)
            train(state, train_eps, args.budget_steps, cell_dir, checkpoint_every=args.budget_steps)
            raw, rollouts = evaluate_episodes(state.model, eval_eps, ["psnr", "mse"],
                                              n_cond=args.n_cond, horizon=args.horizon, seed=seed)
            pred = slice(args.n_cond, None)
            pix = [episode_pixel_error(r, e) for r, e in zip(rollouts, eval_eps)]
            rows.append({
                "inter_mode": mode.upper(), "graph": "FC" if knn == "fc" else f"KNN({knn})",
                "psnr": float(raw["psnr"][:, pred].mean()), "mse": float(raw["mse"][:, pred].mean()),
                "pixel_error": float(sum(pix) / len(pix)), "steps": args.budget_steps,
            })
            log.info("%s: %s", cell, rows[-1])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    save_ablation_bars(rows, out / "ablation.png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=["desk", "paper", "roll", "push1", "push2", "bair"],
                   help="base hyperparameters (default desk)")
    p.add_argument("--inter-mode", choices=["inter1", "inter2", "inter3"], type=str.lower)
    graph = p.add_mutually_exclusive_group()
    graph.add_argument("--knn", type=int, metavar="K", help="k-nearest-neighbour interaction graph")
    graph.add_argument("--fc", action="store_true", help="fully connected interaction graph")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatsbi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic episode split")
    p.add_argument("--world", choices=["balls", "push"], required=True)
    p.add_argument("--balls", type=int, default=3)
    p.add_argument("--objects", type=int, default=3, help="discs in the push world")
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="staged training")
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="default: the step where keypoint training stops")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.gtsr")
    p.add_argument("--checkpoint-every", type=int, default=250)
    p.add_argument("--max-episodes", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="conditioned rollout of one episode")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--n-cond", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-decomp", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="per-step metrics over a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default="psnr,mse,ssim,cosim")
    p.add_argument("--horizon", type=int)
    p.add_argument("--n-cond", type=int, default=5)
    p.add_argument("--max-episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="interaction mode x graph sweep")
    _add_model_flags(p)
    p.add_argument("--grid", nargs="*", help="inter_mode=inter1,inter2,inter3 knn=3,fc")
    p.add_argument("--budget-steps", type=int, default=2000)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--eval-episodes", type=int, default=10)
    p.add_argument("--max-episodes", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--n-cond", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:          # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gatsbi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GenerationError, FileNotFoundError, FileExistsError, ValueError, OSError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
