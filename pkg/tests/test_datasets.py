import filecmp

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from gatsbi.datasets import (MANIFEST, BallState, GenerationError, balls_episode, elastic_collision,
                             generate_agent_push, generate_balls, init_balls, init_push, load_split,
                             penetration, place_discs, push_episode, push_step, read_manifest,
                             reflect_walls, render_balls, sample_batch, simulate_balls,
                             simulate_push, substeps_for)


def test_equal_mass_head_on_swaps_velocities():
    v1, v2 = np.array([0.7, 0.0]), np.array([-0.7, 0.0])
    out = elastic_collision(np.array([0.0, 0.0]), v1, 4.0, np.array([2.0, 0.0]), v2, 4.0)
    assert np.array_equal(out[0], v2) and np.array_equal(out[1], v1)


def test_separating_pair_is_left_alone():
    assert elastic_collision(np.zeros(2), np.array([-1.0, 0]), 1.0, np.array([1.0, 0]),
                             np.array([1.0, 0]), 1.0) is None


@given(st.integers(0, 2 ** 31))
def test_impulse_conserves_momentum_and_energy(seed):
    rng = np.random.default_rng(seed)
    p1, p2 = rng.normal(size=2), rng.normal(size=2)
    v1, v2 = rng.normal(size=2), rng.normal(size=2)
    m1, m2 = rng.uniform(0.5, 5, 2)
    out = elastic_collision(p1, v1, m1, p2, v2, m2)
    if out is None:
        return
    w1, w2 = out
    assert np.allclose(m1 * v1 + m2 * v2, m1 * w1 + m2 * w2, atol=1e-12)
    ke0 = 0.5 * (m1 * v1 @ v1 + m2 * v2 @ v2)
    ke1 = 0.5 * (m1 * w1 @ w1 + m2 * w2 @ w2)
    assert abs(ke0 - ke1) < 1e-12


def test_wall_bounce():
    pos = np.array([[0.5, 10.0], [19.8, 10.0]])
    vel = np.array([[-0.3, 0.2], [0.4, -0.1]])
    radius = np.array([1.0, 1.0])
    speed = np.hypot(*vel.T)
    reflect_walls(pos, vel, radius, 20.0)
    assert vel[0, 0] == 0.3 and vel[1, 0] == -0.4
    assert vel[0, 1] == 0.2 and vel[1, 1] == -0.1
    assert np.all(np.abs(np.hypot(*vel.T) - speed) < 1e-12)
    assert np.all(pos[:, 0] >= radius) and np.all(pos[:, 0] <= 20 - radius)


def test_episode_energy_and_collisions():
    rng = np.random.default_rng(0)
    for _ in range(5):
        state = init_balls(3, 64, rng)
        traj = simulate_balls(state, 30, 64)
        assert np.abs(traj.energy - traj.energy[0]).max() < 1e-9
        for c in traj.collisions:
            m = np.array(c.mass)[:, None]
            assert np.abs((m * c.before).sum(0) - (m * c.after).sum(0)).max() < 1e-9
            assert abs(0.5 * (m * c.before ** 2).sum() - 0.5 * (m * c.after ** 2).sum()) < 1e-9


def test_substeps_prevent_tunnelling():
    state = BallState(np.array([[10.0, 10.0], [30.0, 30.0]]), np.array([[5.0, 0.0], [0.0, 1.0]]),
                      np.array([2.0, 4.0]))
    sub = substeps_for(state)
    assert 5.0 / sub < 2.0


def test_placement_failure():
    with pytest.raises(GenerationError, match="1000"):
        place_discs(np.array([30.0, 30.0]), 64.0, np.random.default_rng(0))


def test_rendering_is_pure_and_occludes():
    pos = np.array([[20.0, 20.0], [24.0, 20.0]])
    radius = np.array([4.0, 8.0])
    shade = np.array([0.5, 0.9])
    a = render_balls(pos, radius, shade, 32)
    assert np.array_equal(a, render_balls(pos.copy(), radius.copy(), shade.copy(), 32))
    assert a.shape == (3, 32, 32) and np.array_equal(a[0], a[1])
    # the larger (nearer) ball covers the overlap, so the small ball's centre shows the big one
    alone = render_balls(pos[1:], radius[1:], shade[1:], 32)
    assert a[0, 20, 20] == pytest.approx(alone[0, 20, 20])


def test_balls_episode_contents():
    ep = balls_episode(2, 12, seed=3)
    assert ep.frames.shape == (12, 3, 64, 64)
    assert torch.equal(ep.actions, torch.zeros(12, 2))
    assert ep.extras["centers"].shape == (12, 2, 2)
    assert ep.frames.min() >= 0 and ep.frames.max() <= 1
    again = balls_episode(2, 12, seed=3)
    assert torch.equal(ep.frames, again.frames)


def test_zero_actions_give_static_world():
    ep = push_episode(3, 8, seed=1, actions=np.zeros((8, 2)))
    for t in range(1, 8):
        assert torch.equal(ep.frames[t], ep.frames[0])


def test_free_agent_moves_exactly():
    state = init_push(0, 64, np.random.default_rng(0))
    state.agent = np.array([20.0, 30.0])
    d = 1.25
    states = simulate_push(state, np.tile([d, 0.0], (6, 1)))
    for s0, s1 in zip(states, states[1:]):
        assert s1.agent[0] - s0.agent[0] == d and s1.agent[1] == s0.agent[1]


def test_push_moves_disc_without_overlap():
    state = init_push(1, 64, np.random.default_rng(0))
    state.agent = np.array([20.0, 32.0])
    state.discs = np.array([[30.0, 32.0]])
    state.radius = np.array([4.0])
    start = state.discs.copy()
    for _ in range(10):
        state = push_step(state, np.array([1.0, 0.0]))
        assert penetration(state) <= 1e-9
    assert state.discs[0, 0] > start[0, 0]


def test_push_episodes_never_interpenetrate():
    for i in range(5):
        rng = np.random.default_rng(i)
        state = init_push(3, 64, rng)
        for _ in range(40):
            state = push_step(state, rng.uniform(-3, 3, 2))
            assert penetration(state) <= 1e-9


def test_split_round_trip(tmp_path):
    out = generate_balls(2, 4, 6, seed=0, out_dir=tmp_path / "a")
    names = read_manifest(out)
    assert len(names) == 4
    eps = list(load_split(out))
    assert [e.id for e in eps] == [n[:-5] for n in names]
    direct = balls_episode(2, 6, 0, index=2)
    assert torch.equal(eps[2].frames, direct.frames) and torch.equal(eps[2].actions, direct.actions)
    again = list(load_split(out))
    assert all(torch.equal(a.frames, b.frames) for a, b in zip(eps, again))


def test_split_shuffle_reproducible(tmp_path):
    out = generate_agent_push(1, 6, 4, seed=0, out_dir=tmp_path)
    a = [e.id for e in load_split(out, shuffle_seed=5)]
    b = [e.id for e in load_split(out, shuffle_seed=5)]
    assert a == b and sorted(a) == sorted(e.id for e in load_split(out))


def test_generation_is_byte_deterministic(tmp_path):
    generate_agent_push(2, 3, 5, seed=7, out_dir=tmp_path / "a")
    generate_agent_push(2, 3, 5, seed=7, out_dir=tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert sorted(cmp.common_files) == sorted(p.name for p in (tmp_path / "a").iterdir())
    for name in cmp.common_files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_episode_is_named(tmp_path):
    out = generate_balls(1, 2, 3, seed=0, out_dir=tmp_path)
    name = read_manifest(out)[1]
    (out / name).unlink()
    with pytest.raises(FileNotFoundError, match=name):
        list(load_split(out))


def test_manifest_required(tmp_path):
    with pytest.raises(FileNotFoundError, match=MANIFEST):
        list(load_split(tmp_path))


def test_no_overwrite(tmp_path):
    generate_balls(1, 1, 3, seed=0, out_dir=tmp_path)
    with pytest.raises(FileExistsError):
        generate_balls(1, 1, 3, seed=0, out_dir=tmp_path, overwrite=False)


def test_sample_batch_truncates():
    eps = [balls_episode(1, 8, 0, size=16, index=i) for i in range(3)]
    frames, actions = sample_batch(eps, 4, 5, np.random.default_rng(0))
    assert frames.shape == (4, 5, 3, 16, 16) and actions.shape == (4, 5, 2)
