"""Synthetic episode worlds (bouncing balls, agent pushing discs) and split I/O.

Both simulators run in float64 pixel units on a square arena ``[0, size]^2``.
Episodes are written as GTSR containers with frames stored as uint8; a split
directory holds one container per episode plus ``manifest.txt``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core import Episode, PathLike, derive_seed, load_tensor_container, save_tensor_container

log = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
MAX_PLACEMENT_TRIES = 1000


class GenerationError(RuntimeError):
    """A world could not be initialised (e.g. no overlap-free placement)."""


# ---------------------------------------------------------------------------
# Rendering helpers
# ---------------------------------------------------------------------------

def floor_image(size: int, lo: float = 0.25, hi: float = 0.45) -> np.ndarray:
    """Vertical gray gradient ``[size, size]``, darker at the top."""
    ramp = np.linspace(lo, hi, size)
    return np.repeat(ramp[:, None], size, axis=1)


def _pixel_grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c, indexing="xy")   # xs[row, col] = col + 0.5


def disc_coverage(xs, ys, center, radius) -> Tuple[np.ndarray, np.ndarray]:
    """Anti-aliased coverage of a disc and the normalised radial distance."""
    d = np.hypot(xs - center[0], ys - center[1])
    cover = np.clip(radius - d + 0.5, 0.0, 1.0)
    return cover, np.clip(d / radius, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Bouncing balls
# ---------------------------------------------------------------------------

@dataclass
class BallState:
    position: np.ndarray   # [n, 2] (x, y) pixel units
    velocity: np.ndarray   # [n, 2] pixels per frame
    radius: np.ndarray     # [n]

    @property
    def mass(self) -> np.ndarray:
        return self.radius ** 2

    @property
    def shade(self) -> np.ndarray:
        """Brightness per ball; larger balls read as nearer and brighter."""
        r = self.radius
        span = max(r.max() - r.min(), 1e-12)
        return 0.55 + 0.4 * (r - r.min()) / span if r.size > 1 else np.full_like(r, 0.75)

    def kinetic_energy(self) -> float:
        return float(0.5 * (self.mass * (self.velocity ** 2).sum(1)).sum())

    def momentum(self) -> np.ndarray:
        return (self.mass[:, None] * self.velocity).sum(0)

    def copy(self) -> "BallState":
        return BallState(self.position.copy(), self.velocity.copy(), self.radius.copy())


@dataclass
class Collision:
    step: int
    i: int
    j: int
    mass: Tuple[float, float]
    before: np.ndarray    # [2, 2] velocities of i and j
    after: np.ndarray


@dataclass
class BallsTrajectory:
    positions: np.ndarray          # [T, n, 2]
    velocities: np.ndarray         # [T, n, 2]
    radius: np.ndarray             # [n]
    energy: np.ndarray             # [T]
    collisions: List[Collision] = field(default_factory=list)


def elastic_collision(p1, v1, m1, p2, v2, m2):
    """Velocities after an elastic impulse along the line of centres.

    Returns ``None`` when the pair is not approaching.
    """
    n = p2 - p1
    d = math.hypot(n[0], n[1])
    if d == 0.0:
        n = np.array([1.0, 0.0])
    else:
        n = n / d
    approach = float(np.dot(v1 - v2, n))
    if approach <= 0.0:
        return None
    j = 2.0 * m1 * m2 / (m1 + m2) * approach
    return v1 - (j / m1) * n, v2 + (j / m2) * n


def reflect_walls(pos: np.ndarray, vel: np.ndarray, radius: np.ndarray, size: float) -> None:
    """Mirror positions and normal velocities of balls that crossed a wall (in place)."""
    for axis in (0, 1):
        lo = pos[:, axis] < radius
        pos[lo, axis] = 2 * radius[lo] - pos[lo, axis]
        vel[lo, axis] = np.abs(vel[lo, axis])
        hi = pos[:, axis] > size - radius
        pos[hi, axis] = 2 * (size - radius[hi]) - pos[hi, axis]
        vel[hi, axis] = -np.abs(vel[hi, axis])


def place_discs(radius: np.ndarray, size: float, rng: np.random.Generator,
                margin: float = 0.0, blocked=None) -> np.ndarray:
    """Overlap-free disc centres by whole-configuration rejection sampling."""
    n = radius.shape[0]
    for _ in range(MAX_PLACEMENT_TRIES):
        pos = np.stack([rng.uniform(radius, size - radius), rng.uniform(radius, size - radius)], 1)
        gap = np.hypot(*(pos[:, None] - pos[None]).transpose(2, 0, 1)) - (radius[:, None] + radius[None])
        np.fill_diagonal(gap, np.inf)
        if (gap > margin).all() and (blocked is None or not blocked(pos)):
            return pos
    raise GenerationError(f"no overlap-free placement of {n} discs after {MAX_PLACEMENT_TRIES} tries")


def init_balls(n_balls: int, size: int, rng: np.random.Generator,
               radius_range=(0.06, 0.11), speed_range=(0.02, 0.05)) -> BallState:
    if n_balls < 1:
        raise ValueError("need at least one ball")
    radius = rng.uniform(*radius_range, n_balls) * size
    pos = place_discs(radius, size, rng, margin=1.0)
    speed = rng.uniform(*speed_range, n_balls) * size
    angle = rng.uniform(0, 2 * np.pi, n_balls)
    vel = np.stack([speed * np.cos(angle), speed * np.sin(angle)], 1)
    return BallState(pos, vel, radius)


def substeps_for(state: BallState) -> int:
    """Substeps per frame keeping any ball's move under a quarter of the smallest radius.

    The bound uses the largest speed any ball could reach with all the kinetic
    energy, so it holds through every collision.
    """
    v_cap = math.sqrt(2 * state.kinetic_energy() / state.mass.min())
    return max(1, math.ceil(v_cap / (0.25 * state.radius.min())))


def simulate_balls(state: BallState, T: int, size: int) -> BallsTrajectory:
    """Advance ``T - 1`` frames; frame 0 is the initial state."""
    s = state.copy()
    m = s.mass
    n = s.radius.shape[0]
    sub = substeps_for(s)
    dt = 1.0 / sub
    positions, velocities, energy = [s.position.copy()], [s.velocity.copy()], [s.kinetic_energy()]
    events: List[Collision] = []
    for t in range(1, T):
        for _ in range(sub):
            s.position += s.velocity * dt
            reflect_walls(s.position, s.velocity, s.radius, size)
            for i in range(n):
                for j in range(i + 1, n):
                    delta = s.position[j] - s.position[i]
                    dist = math.hypot(delta[0], delta[1])
                    overlap = s.radius[i] + s.radius[j] - dist
                    if overlap <= 0:
                        continue
                    out = elastic_collision(s.position[i], s.velocity[i], m[i],
                                            s.position[j], s.velocity[j], m[j])
                    if out is not None:
                        before = np.stack([s.velocity[i], s.velocity[j]])
                        s.velocity[i], s.velocity[j] = out
                        events.append(Collision(t, i, j, (float(m[i]), float(m[j])), before,
                                                np.stack([s.velocity[i], s.velocity[j]])))
                    # positional de-overlap split by inverse mass; velocities untouched
                    nrm = delta / dist if dist > 0 else np.array([1.0, 0.0])
                    w_i = m[j] / (m[i] + m[j])
                    s.position[i] -= nrm * overlap * w_i
                    s.position[j] += nrm * overlap * (1 - w_i)
            for axis in (0, 1):
                s.position[:, axis] = np.clip(s.position[:, axis], s.radius, size - s.radius)
        positions.append(s.position.copy())
        velocities.append(s.velocity.copy())
        energy.append(s.kinetic_energy())
    return BallsTrajectory(np.stack(positions), np.stack(velocities), s.radius.copy(),
                           np.array(energy), events)


def render_balls(positions: np.ndarray, radius: np.ndarray, shade: np.ndarray, size: int) -> np.ndarray:
    """Grayscale frame ``[3, size, size]`` in [0, 1].

    Balls are lit spheres drawn far-to-near (small to large radius), so the
    nearer ball occludes where they overlap.
    """
    xs, ys = _pixel_grid(size)
    img = floor_image(size)
    for k in np.argsort(radius, kind="stable"):
        cover, rho = disc_coverage(xs, ys, positions[k], radius[k])
        lit = shade[k] * (0.55 + 0.45 * np.sqrt(1.0 - rho ** 2))
        img = img * (1 - cover) + lit * cover
    return np.repeat(img[None], 3, axis=0)


def balls_episode(n_balls: int, T: int, seed: int, size: int = 64, index: int = 0) -> Episode:
    rng = np.random.default_rng(derive_seed(seed, "balls", index))
    state = init_balls(n_balls, size, rng)
    traj = simulate_balls(state, T, size)
    shade = state.shade
    frames = np.stack([quantize(render_balls(p, traj.radius, shade, size)) for p in traj.positions])
    coll = np.array([[c.step, c.i, c.j] for c in traj.collisions], dtype=np.float32).reshape(-1, 3)
    extras = {
        "centers": torch.from_numpy(traj.positions.astype(np.float32)),
        "radii": torch.from_numpy(traj.radius.astype(np.float32)),
        "collisions": torch.from_numpy(coll),
    }
    return Episode(torch.from_numpy(frames).float() / 255.0, torch.zeros(T, 2),
                   id=f"balls_{index:05d}", extras=extras)


# ---------------------------------------------------------------------------
# Agent pushing discs
# ---------------------------------------------------------------------------

@dataclass
class PushWorldState:
    agent: np.ndarray          # [2] box centre
    half_extent: float
    discs: np.ndarray          # [n, 2]
    radius: np.ndarray         # [n]
    velocity: np.ndarray       # [n, 2]
    size: float
    friction: float = 0.3

    def copy(self) -> "PushWorldState":
        return PushWorldState(self.agent.copy(), self.half_extent, self.discs.copy(), self.radius.copy(),
                              self.velocity.copy(), self.size, self.friction)


def box_disc_separation(box_center, half: float, disc_center, radius: float):
    """Signed gap between an axis-aligned square and a disc, plus the push-out direction.

    The direction points from the box towards the disc.
    """
    d = disc_center - box_center
    closest = np.clip(d, -half, half)
    v = d - closest
    dist = math.hypot(v[0], v[1])
    if dist > 0:
        return dist - radius, v / dist
    # centre inside the box: leave through the nearest face
    pen = half - np.abs(d)
    axis = int(np.argmin(pen))
    nrm = np.zeros(2)
    nrm[axis] = 1.0 if d[axis] >= 0 else -1.0
    return -(pen[axis] + radius), nrm


def penetration(state: PushWorldState) -> float:
    """Largest overlap (>= 0) among agent-disc and disc-disc pairs and walls."""
    worst = 0.0
    n = state.discs.shape[0]
    for i in range(n):
        gap, _ = box_disc_separation(state.agent, state.half_extent, state.discs[i], state.radius[i])
        worst = max(worst, -gap)
        for j in range(i + 1, n):
            dist = math.hypot(*(state.discs[j] - state.discs[i]))
            worst = max(worst, state.radius[i] + state.radius[j] - dist)
    return worst


def _resolve(state: PushWorldState, iterations: int = 60, slop: float = 1e-9) -> bool:
    """Project discs out of the agent, each other and the walls (in place)."""
    n = state.discs.shape[0]
    r, size = state.radius, state.size
    for _ in range(iterations):
        moved = False
        for i in range(n):
            gap, nrm = box_disc_separation(state.agent, state.half_extent, state.discs[i], r[i])
            if gap < 0:
                state.discs[i] += nrm * (-gap + slop)
                moved = True
        for i in range(n):
            for j in range(i + 1, n):
                delta = state.discs[j] - state.discs[i]
                dist = math.hypot(delta[0], delta[1])
                overlap = r[i] + r[j] - dist
                if overlap > 0:
                    nrm = delta / dist if dist > 0 else np.array([1.0, 0.0])
                    shift = nrm * (overlap / 2 + slop)
                    state.discs[i] -= shift
                    state.discs[j] += shift
                    moved = True
        clipped = np.clip(state.discs, r[:, None], size - r[:, None])
        if not np.array_equal(clipped, state.discs):
            state.discs[:] = clipped
            moved = True
        if not moved:
            return True
    return penetration(state) <= 0.0


def push_step(state: PushWorldState, action: np.ndarray) -> PushWorldState:
    """Move the agent by ``action``, slide discs with friction and resolve contacts.

    If contacts cannot be resolved (a disc wedged against a wall) the agent is
    blocked for this step and the discs come to rest.
    """
    new = state.copy()
    h = new.half_extent
    new.agent = np.clip(new.agent + action, h, new.size - h)
    new.discs = new.discs + new.velocity
    if not _resolve(new):
        new = state.copy()
        new.velocity[:] = 0.0
        return new
    new.velocity = (new.discs - state.discs) * (1.0 - new.friction)
    return new


def init_push(n_objects: int, size: int, rng: np.random.Generator,
              half_extent=0.08, radius_range=(0.06, 0.09)) -> PushWorldState:
    if n_objects < 0:
        raise ValueError("object count must be non-negative")
    half = half_extent * size
    agent = rng.uniform(half, size - half, 2)
    radius = rng.uniform(*radius_range, n_objects) * size

    def blocked(pos):
        return any(box_disc_separation(agent, half, p, rad)[0] <= 1.0 for p, rad in zip(pos, radius))

    discs = place_discs(radius, size, rng, margin=1.0, blocked=blocked) if n_objects else np.zeros((0, 2))
    return PushWorldState(agent, half, discs, radius, np.zeros((n_objects, 2)), float(size))


def push_policy(state: PushWorldState, T: int, rng: np.random.Generator, max_speed: float):
    """Actions that wander towards a target disc, switching target every few steps."""
    n = state.discs.shape[0]
    target = int(rng.integers(n)) if n else -1
    prev = np.zeros(2)
    while True:
        if n and rng.random() < 0.12:
            target = int(rng.integers(n))
        goal = state.discs[target] if n else rng.uniform(0, state.size, 2)
        direction = goal - state.agent
        norm = np.linalg.norm(direction)
        a = 0.6 * prev + 0.4 * (direction / norm * max_speed if norm > 0 else 0) + rng.normal(0, 0.3 * max_speed, 2)
        a = np.clip(a, -max_speed, max_speed)
        prev = a
        state = yield a


def simulate_push(state: PushWorldState, actions: np.ndarray):
    """Roll the world through ``actions [T, 2]``; returns the list of T states.

    State t is the world after applying action t-1 (state 0 is the initial world).
    """
    states = [state]
    for a in actions[:-1]:
        states.append(push_step(states[-1], a))
    return states


def render_push(state: PushWorldState, colors: np.ndarray, size: int) -> np.ndarray:
    xs, ys = _pixel_grid(size)
    img = np.repeat(floor_image(size)[None], 3, axis=0)
    for k in range(state.discs.shape[0]):
        cover, rho = disc_coverage(xs, ys, state.discs[k], state.radius[k])
        lit = colors[k][:, None, None] * (0.6 + 0.4 * np.sqrt(1.0 - rho ** 2))[None]
        img = img * (1 - cover) + lit * cover
    h = state.half_extent
    cx = np.clip(np.minimum(xs + 0.5, state.agent[0] + h) - np.maximum(xs - 0.5, state.agent[0] - h), 0, 1)
    cy = np.clip(np.minimum(ys + 0.5, state.agent[1] + h) - np.maximum(ys - 0.5, state.agent[1] - h), 0, 1)
    cover = cx * cy
    agent_color = np.array([0.85, 0.2, 0.15])[:, None, None]
    return img * (1 - cover) + agent_color * cover


def push_episode(n_objects: int, T: int, seed: int, size: int = 64, index: int = 0,
                 actions: Optional[np.ndarray] = None) -> Episode:
    rng = np.random.default_rng(derive_seed(seed, "push", index))
    state = init_push(n_objects, size, rng)
    colors = rng.uniform(0.3, 1.0, (n_objects, 3))
    if actions is None:
        policy = push_policy(state, T, rng, max_speed=0.04 * size)
        acts = [next(policy)]
        states = [state]
        for _ in range(T - 1):
            states.append(push_step(states[-1], acts[-1]))
            acts.append(policy.send(states[-1]))
        actions = np.stack(acts)
    else:
        actions = np.asarray(actions, dtype=np.float64)
        states = simulate_push(state, actions)
    frames = np.stack([quantize(render_push(s, colors, size)) for s in states])
    contact = [t for t in range(1, T) if not np.array_equal(states[t].discs, states[t - 1].discs)]
    extras = {
        "centers": torch.from_numpy(np.stack([s.discs for s in states]).astype(np.float32).reshape(T, n_objects, 2)),
        "radii": torch.from_numpy(state.radius.astype(np.float32)),
        "agent": torch.from_numpy(np.stack([s.agent for s in states]).astype(np.float32)),
        "contacts": torch.tensor(contact, dtype=torch.float32),
    }
    return Episode(torch.from_numpy(frames).float() / 255.0, torch.from_numpy(actions.astype(np.float32)),
                   id=f"push_{index:05d}", extras=extras)


# ---------------------------------------------------------------------------
# Split I/O
# ---------------------------------------------------------------------------

def episode_tensors(ep: Episode) -> dict:
    out = {"frames": torch.round(ep.frames * 255.0).to(torch.uint8), "actions": ep.actions}
    out.update(ep.extras)
    return out


def save_episode(path: PathLike, ep: Episode) -> None:
    save_tensor_container(path, episode_tensors(ep))


def load_episode(path: PathLike) -> Episode:
    t = load_tensor_container(path)
    if "frames" not in t or "actions" not in t:
        raise ValueError(f"{path}: episode container needs 'frames' and 'actions'")
    frames = t.pop("frames")
    frames = frames.float() / 255.0 if frames.dtype == torch.uint8 else frames.float()
    t["frames"] = frames
    return Episode.from_tensors(t, id=Path(path).stem)


def write_split(out_dir: PathLike, episodes: Sequence[Episode], header: str = "",
                overwrite: bool = True) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise FileExistsError(f"output directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for ep in episodes:
        name = f"{ep.id}.gtsr"
        save_episode(out / name, ep)
        names.append(name)
    lines = [f"# {header}"] if header else []
    (out / MANIFEST).write_text("\n".join(lines + names) + "\n")
    return out


def generate_balls(n_balls: int, n_episodes: int, T: int, seed: int, out_dir: PathLike,
                   size: int = 64, overwrite: bool = True) -> Path:
    if n_balls < 1:
        raise ValueError("need at least one ball")
    eps = (balls_episode(n_balls, T, seed, size, i) for i in range(n_episodes))
    return write_split(out_dir, eps, overwrite=overwrite)


def generate_agent_push(n_objects: int, n_episodes: int, T: int, seed: int, out_dir: PathLike,
                        size: int = 64, overwrite: bool = True) -> Path:
    if n_objects < 0:
        raise ValueError("object count must be non-negative")
    eps = (push_episode(n_objects, T, seed, size, i) for i in range(n_episodes))
    return write_split(out_dir, eps, overwrite=overwrite)


def read_manifest(split_dir: PathLike) -> List[str]:
    path = Path(split_dir) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {split_dir}")
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]


def load_split(split_dir: PathLike, shuffle_seed: Optional[int] = None) -> Iterator[Episode]:
    """Yield episodes in manifest order, or in a seeded permutation of it.

    All episodes must agree on frame size and action dimension.
    """
    split_dir = Path(split_dir)
    names = read_manifest(split_dir)
    missing = [n for n in names if not (split_dir / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{split_dir}: manifest lists missing file {missing[0]}")
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(names))
        names = [names[i] for i in order]
    ref = None
    for name in names:
        ep = load_episode(split_dir / name)
        sig = (tuple(ep.frames.shape[1:]), ep.action_dim)
        if ref is None:
            ref = sig
        elif sig != ref:
            raise ValueError(f"{name}: frame/action shape {sig} differs from {ref}")
        yield ep


def sample_batch(episodes: Sequence[Episode], batch_size: int, length: int,
                 rng: np.random.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """Draw ``batch_size`` episodes and truncate each to its first ``length`` steps.

    Returns ``frames [B, T, 3, H, W]`` and ``actions [B, T, A]``.
    """
    if not episodes:
        raise ValueError("no episodes to sample from")
    idx = rng.integers(len(episodes), size=batch_size)
    T = min(length, min(episodes[i].length for i in idx))
    frames = torch.stack([episodes[i].frames[:T] for i in idx])
    actions = torch.stack([episodes[i].actions[:T] for i in idx])
    return frames, actions
