import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from gatsbi.config import tiny_config
from gatsbi.interaction import InteractionModule, knn_neighbors, total_interaction
from gatsbi.layers import zero_parameters
from gatsbi.objects import ObjectModule, empty_objects


def knn_oracle(points, k):
    """Full sort of (distance, index) pairs for each node, self excluded."""
    I = len(points)
    out = []
    for i in range(I):
        d = sorted((sum((a - b) ** 2 for a, b in zip(points[i], points[j])), j) for j in range(I) if j != i)
        out.append([j for _, j in d[:min(k, I - 1)]])
    return out


def fc_oracle(mod, u, pos):
    """Sum of pairwise messages over every other node, one pair at a time."""
    B, I, _ = u.shape
    out = torch.zeros(B, I, mod.cfg.interaction_dim, dtype=u.dtype)
    for b in range(B):
        for i in range(I):
            for j in range(I):
                if j != i:
                    rel = mod.rel_embed(pos[b, j] - pos[b, i])
                    out[b, i] += mod.f_obj(torch.cat([u[b, i], u[b, j], rel]))
    return out


def _module(cfg=None):
    cfg = cfg or tiny_config()
    torch.manual_seed(0)
    obj = ObjectModule(cfg)
    return InteractionModule(cfg, obj.latent_dim + cfg.h_obj_dim).double(), cfg


def test_knn_full_when_k_is_i_minus_one():
    idx, valid = knn_neighbors(torch.randn(3, 2), 2)
    for i in range(3):
        assert sorted(idx[i].tolist()) == [j for j in range(3) if j != i]
    assert valid.all()


def test_knn_collinear():
    pos = torch.tensor([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    idx, _ = knn_neighbors(pos, 1)
    assert idx[1].tolist() == [0]


def test_knn_matches_sort_oracle():
    pos = torch.rand(9, 2, dtype=torch.float64)
    idx, _ = knn_neighbors(pos, 5)
    assert idx.tolist() == knn_oracle(pos.tolist(), 5)


def test_knn_tie_break_and_clip():
    pos = torch.tensor([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    idx, _ = knn_neighbors(pos, 1)
    assert idx[0].tolist() == [1]                   # equal distances, smaller index wins
    idx, _ = knn_neighbors(pos, 10)
    assert idx.shape == (3, 2)


def test_knn_excludes_dead_nodes():
    pos = torch.rand(1, 5, 2)
    alive = torch.tensor([[True, True, False, True, True]])
    idx, valid = knn_neighbors(pos, 4, alive)
    for i in range(5):
        live = [j for j, v in zip(idx[0, i].tolist(), valid[0, i].tolist()) if v]
        assert 2 not in live and i not in live
        assert len(live) == (3 if i != 2 else 4)


@given(st.integers(2, 9), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_neighbour_lists_well_formed(I, k, seed):
    g = torch.Generator().manual_seed(seed)
    idx, valid = knn_neighbors(torch.rand(I, 2, generator=g, dtype=torch.float64), k)
    kk = min(k, I - 1)
    assert idx.shape == (I, kk) and bool(valid.all())
    for i in range(I):
        row = idx[i].tolist()
        assert i not in row and len(set(row)) == len(row)
    assert int(valid.sum()) == I * kk <= I * (I - 1)


@given(st.integers(3, 9), st.integers(0, 2 ** 31), st.floats(-math.pi, math.pi))
def test_neighbours_invariant_to_rigid_motion(I, seed, angle):
    g = torch.Generator().manual_seed(seed)
    pos = torch.rand(I, 2, generator=g, dtype=torch.float64)
    rot = torch.tensor([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]],
                       dtype=torch.float64)
    moved = pos @ rot.T + torch.randn(2, generator=g, dtype=torch.float64)
    k = I // 2
    d = torch.cdist(pos, pos)
    # skip configurations where rounding could reorder near-ties
    gaps = torch.sort(d, -1).values.diff(dim=-1)[:, :k + 1]
    if float(gaps.min()) < 1e-9:
        return
    assert torch.equal(knn_neighbors(pos, k)[0], knn_neighbors(moved, k)[0])


def test_object_object_empty_neighbourhood():
    mod, cfg = _module()
    u = torch.randn(1, 1, mod.object_dim, dtype=torch.float64)
    idx, valid = knn_neighbors(torch.zeros(1, 1, 2, dtype=torch.float64), cfg.k_nn)
    out = mod.object_object(u, torch.zeros(1, 1, 2, dtype=torch.float64), idx, valid)
    assert torch.equal(out, torch.zeros(1, 1, cfg.interaction_dim, dtype=torch.float64))


@pytest.mark.parametrize("I", range(2, 10))
def test_object_object_full_graph_equals_pairwise_sum(I):
    mod, cfg = _module()
    u = torch.randn(2, I, mod.object_dim, dtype=torch.float64)
    pos = torch.rand(2, I, 2, dtype=torch.float64) * 2 - 1
    idx, valid = knn_neighbors(pos, I - 1)
    got = mod.object_object(u, pos, idx, valid)
    assert (got - fc_oracle(mod, u, pos)).abs().max() < 1e-6
    idx_fc, valid_fc = knn_neighbors(pos, None)
    assert torch.allclose(mod.object_object(u, pos, idx_fc, valid_fc), got, atol=1e-12)


def test_object_object_neighbour_permutation_and_partition():
    mod, cfg = _module()
    I = 6
    u = torch.randn(1, I, mod.object_dim, dtype=torch.float64)
    pos = torch.rand(1, I, 2, dtype=torch.float64)
    idx, valid = knn_neighbors(pos, 4)
    base = mod.object_object(u, pos, idx, valid)
    perm = torch.randperm(4)
    assert torch.allclose(mod.object_object(u, pos, idx[..., perm], valid[..., perm]), base, atol=1e-12)
    a = mod.object_object(u, pos, idx[..., :2], valid[..., :2])
    b = mod.object_object(u, pos, idx[..., 2:], valid[..., 2:])
    assert torch.allclose(a + b, base, atol=1e-12)


def test_spatial_constraint_constant_background_position_free():
    mod, cfg = _module()
    mu = torch.full((1, 3, 16, 16), 0.3, dtype=torch.float64)
    scale = torch.full((1, 2, 2), 0.2, dtype=torch.float64)
    center = torch.tensor([[[-0.3, 0.1], [0.4, -0.5]]], dtype=torch.float64)
    e = mod.spatial_constraint(mu, scale, center)
    assert torch.allclose(e[0, 0], e[0, 1], atol=1e-12)


def test_spatial_constraint_zero_encoder():
    mod, cfg = _module()
    zero_parameters(mod.f_static)
    e = mod.spatial_constraint(torch.rand(1, 3, 16, 16, dtype=torch.float64),
                               torch.full((1, 3, 2), 0.2, dtype=torch.float64),
                               torch.zeros(1, 3, 2, dtype=torch.float64))
    assert torch.equal(e, torch.zeros_like(e))


def test_crop_identity_window():
    mod, cfg = _module(tiny_config(crop_size=16))
    mu = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    crop = mod.crop_background(mu, torch.full((1, 1, 2), 0.5, dtype=torch.float64),
                               torch.zeros(1, 1, 2, dtype=torch.float64))
    assert (crop[0, 0] - mu[0]).abs().max() < 1e-12


def _inputs(mod, cfg, I=3, B=1):
    g = torch.Generator().manual_seed(5)
    agent = torch.randn(B, mod.agent_dim, generator=g, dtype=torch.float64)
    u = torch.randn(B, I, mod.object_dim, generator=g, dtype=torch.float64)
    action = torch.randn(B, cfg.enhanced_action_dim, generator=g, dtype=torch.float64)
    h_agent = agent[:, cfg.z_mask_dim:]
    where = torch.randn(B, I, 4, generator=g, dtype=torch.float64)
    h_obj = torch.randn(B, I, cfg.h_obj_dim, generator=g, dtype=torch.float64)
    return agent, u, action, h_agent, where, h_obj


def test_agent_object_local_straight_line():
    mod, cfg = _module()
    agent, u, action, h_agent, where, h_obj = _inputs(mod, cfg)
    got = mod.agent_object_local(agent, u, action, h_agent, where, h_obj)
    for i in range(3):
        u_loc = mod.f_local(torch.cat([agent[0], u[0, i]]))
        w = torch.sigmoid(mod.f_weight(torch.cat([action[0], h_agent[0], where[0, i], h_obj[0, i]])))
        assert torch.allclose(got[0, i], mod.f_temporal_local(w * u_loc), atol=1e-12)
    again = mod.agent_object_local(agent, u, action, h_agent, where, h_obj)
    assert torch.equal(got, again)


def test_agent_object_local_zero_weight():
    mod, cfg = _module()
    agent, u, action, h_agent, where, h_obj = _inputs(mod, cfg)
    zero = torch.zeros(1, 3, cfg.interaction_dim, dtype=torch.float64)
    got = mod.agent_object_local(agent, u, action, h_agent, where, h_obj, weight_override=zero)
    assert torch.allclose(got, mod.f_temporal_local(zero))


def test_agent_object_global_broadcast_and_zero():
    mod, cfg = _module()
    e = mod.agent_object_global(torch.randn(1, mod.agent_dim, dtype=torch.float64), 2)
    assert torch.equal(e[0, 0], e[0, 1])
    zero_parameters(mod.f_temporal_global)
    e = mod.agent_object_global(torch.zeros(1, mod.agent_dim, dtype=torch.float64), 2)
    assert torch.equal(e, torch.zeros_like(e))


def test_default_mode_is_inter3():
    from gatsbi.config import preset
    assert preset("roll").inter_mode == "INTER3"
    assert tiny_config().inter_mode == "INTER3"


def _objects(cfg, I_alive, g):
    s = empty_objects(cfg, 1, torch.float64)
    s.pres[:, :I_alive] = 0.9
    s.center.uniform_(-0.7, 0.7, generator=g)
    s.scale.uniform_(0.1, 0.3, generator=g)
    s.what.normal_(generator=g)
    return s


def test_single_object_zero_static_and_temporal():
    mod, cfg = _module(tiny_config(I_max=1))
    zero_parameters(mod.f_static)
    zero_parameters(mod.f_temporal_global)
    objs = _objects(cfg, 1, torch.Generator().manual_seed(0))
    agent = torch.randn(1, mod.agent_dim, dtype=torch.float64)
    out = total_interaction(mod, objs, agent, torch.randn(1, cfg.enhanced_action_dim, dtype=torch.float64),
                            torch.rand(1, 3, 16, 16, dtype=torch.float64))
    assert torch.allclose(out[0, 0], mod.ambient(torch.zeros(cfg.interaction_dim, dtype=torch.float64)))


def test_inter_modes_structural_sensitivity():
    mod, cfg = _module()
    g = torch.Generator().manual_seed(1)
    objs = _objects(cfg, 4, g)
    mu = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    act = torch.randn(1, cfg.enhanced_action_dim, generator=g, dtype=torch.float64)
    a1, a2 = torch.randn(2, 1, mod.agent_dim, generator=g, dtype=torch.float64)
    i1 = [mod(objs, a, act, mu, "INTER1") for a in (a1, a2)]
    assert torch.equal(i1[0], i1[1])
    i3 = [mod(objs, a, act, mu, "INTER3") for a in (a1, a2)]
    assert bool(((i3[0] - i3[1]).abs().amax(-1) > 0).all())
    i2 = [mod(objs, a, act, mu, "INTER2") for a in (a1, a2)]
    assert not torch.equal(i2[0], i2[1])
    with pytest.raises(ValueError, match="mode"):
        mod(objs, a1, act, mu, "INTER4")
    with pytest.raises(ValueError, match="agent"):
        mod(objs, a1[:, :3], act, mu, "INTER3")


def test_inter1_equals_inter3_without_temporal_coupling():
    mod, cfg = _module()
    zero_parameters(mod.f_temporal_global)
    g = torch.Generator().manual_seed(2)
    objs = _objects(cfg, 5, g)
    mu = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    agent = torch.randn(1, mod.agent_dim, generator=g, dtype=torch.float64)
    act = torch.zeros(1, cfg.enhanced_action_dim, dtype=torch.float64)
    assert torch.equal(mod(objs, agent, act, mu, "INTER1"), mod(objs, agent, act, mu, "INTER3"))


def test_concat_fusion_shape():
    mod, cfg = _module(tiny_config(ambient_fusion="concat"))
    objs = _objects(cfg, 3, torch.Generator().manual_seed(0))
    out = mod(objs, torch.randn(1, mod.agent_dim, dtype=torch.float64),
              torch.randn(1, cfg.enhanced_action_dim, dtype=torch.float64),
              torch.rand(1, 3, 16, 16, dtype=torch.float64))
    assert out.shape == (1, cfg.I_max, cfg.ambient_dim)
