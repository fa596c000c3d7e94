import json

import numpy as np
import pytest
import torch

from gatsbi.config import preset, tiny_config
from gatsbi.core import (bytes_tensor, load_tensor_container, save_tensor_container, tensor_bytes)
from gatsbi.datasets import balls_episode
from gatsbi.training import (CheckpointError, NonFiniteLossError, active_losses, effective_alpha,
                             init_train_state, learning_rate, load_checkpoint, moving_average,
                             read_loss_csv, sample_length, save_checkpoint, train, train_step)

KP, MIX, OBJ = "keypoint", "mixture", "objects"

# (preset, step) -> active set
STAGES = [
    ("roll", 0, {KP}), ("roll", 50_000, {KP}), ("roll", 79_999, {KP}), ("roll", 80_000, {KP, MIX}),
    ("roll", 100_000, {KP, MIX}), ("roll", 110_000, {KP, MIX, OBJ}), ("roll", 150_000, {KP, MIX, OBJ}),
    ("roll", 299_999, {KP, MIX, OBJ}), ("roll", 300_000, {MIX, OBJ}), ("roll", 400_000, {MIX, OBJ}),
    ("push1", 119_999, {KP, MIX}), ("push1", 120_000, {KP, MIX, OBJ}), ("push1", 999_999, {KP, MIX, OBJ}),
    ("push1", 1_000_000, {MIX, OBJ}),
    ("push2", 99_999, {KP, MIX}), ("push2", 100_000, {KP, MIX, OBJ}), ("push2", 900_000, {MIX, OBJ}),
    ("bair", 80_000, {KP, MIX}), ("bair", 110_000, {KP, MIX, OBJ}), ("bair", 159_999, {KP, MIX, OBJ}),
    ("bair", 160_000, {MIX, OBJ}),
    ("desk", 799, {KP}), ("desk", 800, {KP, MIX}), ("desk", 1100, {KP, MIX, OBJ}),
    ("desk", 2999, {KP, MIX, OBJ}), ("desk", 3000, {MIX, OBJ}),
]


@pytest.mark.parametrize("name,step,expected", STAGES)
def test_active_losses_table(name, step, expected):
    assert active_losses(preset(name), step) == frozenset(expected)


@pytest.mark.parametrize("step,length", [(0, 5), (19_999, 5), (20_000, 7), (25_000, 7), (40_000, 12),
                                         (109_999, 27), (110_000, 30), (200_000, 30)])
def test_sample_length_table(step, length):
    assert sample_length(preset("roll"), step) == length


@pytest.mark.parametrize("name", ["roll", "push1", "push2", "bair", "desk"])
def test_schedule_monotone(name):
    cfg = preset(name)
    steps = range(0, 1_100_000, 997) if name != "desk" else range(0, 4000)
    lengths = [sample_length(cfg, s) for s in steps]
    assert lengths == sorted(lengths)
    # the stage machine only ever adds mixture/objects and only ever drops keypoint
    seen = [active_losses(cfg, s) for s in steps]
    for a, b in zip(seen, seen[1:]):
        assert (a & {MIX, OBJ}) <= b and (b & {KP}) <= a


def test_alpha_fix_windows():
    roll, push1 = preset("roll"), preset("push1")
    assert effective_alpha(roll, 115_000, None) == 0.45
    assert effective_alpha(roll, 109_999, 0.7) == 0.7
    assert effective_alpha(roll, 120_000, "learned") == "learned"
    assert effective_alpha(push1, 120_000) == 0.4 and effective_alpha(push1, 139_999) == 0.4
    assert effective_alpha(push1, 140_000, 0.1) == 0.1


def test_learning_rate_table():
    roll = preset("roll")
    assert learning_rate(roll, 0) == 3e-4
    assert learning_rate(roll, 120_000) == pytest.approx(2.4e-4, rel=1e-12)
    assert learning_rate(roll, 200_000) == pytest.approx(1.92e-4, rel=1e-12)
    assert learning_rate(preset("bair"), 0) == 4e-4


def _data(cfg, n=3, T=4):
    eps = [balls_episode(1, T, 0, size=16, index=i) for i in range(n)]
    frames = torch.stack([e.frames for e in eps[:2]]).to(torch.float64)
    actions = torch.stack([e.actions for e in eps[:2]]).to(torch.float64)
    return eps, frames, actions


def _cfg(**kw):
    base = dict(sample_lengths=(3,), sample_milestones=(), batch_size=2)
    base.update(kw)
    return tiny_config(**base)


def test_train_step_deterministic():
    cfg = _cfg()
    _, frames, actions = _data(cfg)
    a, b = (init_train_state(cfg, 3, torch.float64) for _ in range(2))
    ra, rb = train_step(a, frames, actions), train_step(b, frames, actions)
    assert ra == rb
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n


def test_train_step_truncates_to_curriculum():
    cfg = _cfg()
    _, frames, actions = _data(cfg)
    row = train_step(init_train_state(cfg, 0, torch.float64), frames, actions)
    assert row["length"] == 3


def _snapshot(modules):
    return [p.detach().clone() for m in modules for p in m.parameters()]


def test_inactive_modules_frozen():
    # keypoint stops at step 10 in the tiny schedule, objects join at 100
    cfg = _cfg(mixture_only_steps=(0, 100), mixture_keypoint_joint_steps=(0, 10))
    _, frames, actions = _data(cfg)
    state = init_train_state(cfg, 0, torch.float64)
    state.step = 20
    assert active_losses(cfg, 20) == {MIX}
    groups = state.model.module_groups()
    kp0, obj0, mix0 = (_snapshot(groups[k]) for k in (KP, OBJ, MIX))
    train_step(state, frames, actions)
    train_step(state, frames, actions)
    assert all(torch.equal(a, b) for a, b in zip(kp0, _snapshot(groups[KP])))
    assert all(torch.equal(a, b) for a, b in zip(obj0, _snapshot(groups[OBJ])))
    assert any(not torch.equal(a, b) for a, b in zip(mix0, _snapshot(groups[MIX])))


def test_keypoint_only_stage_leaves_mixture_alone():
    cfg = _cfg(mixture_only_steps=(50, 100), mixture_keypoint_joint_steps=(50, 200))
    _, frames, actions = _data(cfg)
    state = init_train_state(cfg, 0, torch.float64)
    groups = state.model.module_groups()
    mix0, kp0 = _snapshot(groups[MIX]), _snapshot(groups[KP])
    row = train_step(state, frames, actions)
    assert row["active"] == KP and row["mixture"] == 0.0
    assert all(torch.equal(a, b) for a, b in zip(mix0, _snapshot(groups[MIX])))
    assert any(not torch.equal(a, b) for a, b in zip(kp0, _snapshot(groups[KP])))


def test_alpha_fixed_flag_in_rows():
    cfg = _cfg(alpha_fix_steps=(0, 1))
    _, frames, actions = _data(cfg)
    state = init_train_state(cfg, 0, torch.float64)
    assert train_step(state, frames, actions)["alpha_fixed"] == 1
    assert train_step(state, frames, actions)["alpha_fixed"] == 0


def test_nonfinite_loss_aborts_with_terms():
    cfg = _cfg()
    _, frames, actions = _data(cfg)
    frames[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        train_step(init_train_state(cfg, 0, torch.float64), frames, actions)
    assert info.value.step == 0 and "total" in info.value.terms


def test_nonfinite_loss_dump(tmp_path):
    cfg = _cfg()
    eps, _, _ = _data(cfg)
    eps[0].frames[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        train(init_train_state(cfg, 0), [eps[0]], 3, tmp_path)
    dump = json.loads(info.value.dump_path.read_text())
    assert dump["step"] == 0 and "mixture" in dump["terms"]


def test_checkpoint_round_trip(tmp_path):
    cfg = _cfg()
    _, frames, actions = _data(cfg)
    state = init_train_state(cfg, 4, torch.float64)
    train_step(state, frames, actions)
    save_checkpoint(state, tmp_path / "c.gtsr")
    back = load_checkpoint(tmp_path / "c.gtsr")
    assert back.step == 1 and back.seed == 4 and back.cfg == cfg
    for (n, p), (_, q) in zip(state.model.named_parameters(), back.model.named_parameters()):
        # the container stores float32
        assert torch.equal(p.detach().float().double(), q.detach()), n


def test_resume_matches_uninterrupted(tmp_path):
    cfg = _cfg()
    _, frames, actions = _data(cfg)
    a = init_train_state(cfg, 9)
    frames, actions = frames.float(), actions.float()
    train_step(a, frames, actions)
    save_checkpoint(a, tmp_path / "c.gtsr")
    b = load_checkpoint(tmp_path / "c.gtsr")
    ra, rb = train_step(a, frames, actions), train_step(b, frames, actions)
    assert ra == rb
    for (n, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q), n


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.gtsr")
    state = init_train_state(_cfg(), 0)
    save_checkpoint(state, tmp_path / "c.gtsr")
    t = load_tensor_container(tmp_path / "c.gtsr")
    meta = json.loads(tensor_bytes(t["__meta__"]))
    meta["format"] = 99
    t["__meta__"] = bytes_tensor(json.dumps(meta))
    save_tensor_container(tmp_path / "v.gtsr", t)
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(tmp_path / "v.gtsr")


def test_train_loop_and_resume(tmp_path):
    cfg = _cfg()
    eps, _, _ = _data(cfg)
    state = init_train_state(cfg, 0)
    train(state, eps, 2, tmp_path, checkpoint_every=1)
    resumed = load_checkpoint(tmp_path / "checkpoint.gtsr")
    assert resumed.step == 2
    train(resumed, eps, 4, tmp_path, checkpoint_every=1)
    rows = read_loss_csv(tmp_path / "losses.csv")
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    # the same four steps without interruption give the same losses
    other = tmp_path / "straight"
    train(init_train_state(cfg, 0), eps, 4, other)
    assert [r["total"] for r in read_loss_csv(other / "losses.csv")] == [r["total"] for r in rows]


def test_moving_average():
    assert np.allclose(moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    with pytest.raises(ValueError):
        moving_average([1.0], 2)
