import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given
from hypothesis import strategies as st

from gatsbi.config import tiny_config
from gatsbi.core import GaussianLatent, seeded_rng
from gatsbi.keypoint import (KeypointModule, agent_views, aggregate_keypoint_map, keypoint_loss,
                             select_agent_index)


def keys_weight(t, a=-0.75):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def interp_matrix(n_in, n_out):
    """[n_out, n_in] half-pixel-centred cubic convolution weights with edge replication."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        x0 = math.floor(src)
        for off in range(-1, 3):
            j = min(max(x0 + off, 0), n_in - 1)
            m[i, j] += keys_weight(src - (x0 + off))
    return m


def bicubic_oracle(g, size):
    m = interp_matrix(g.shape[0], size)
    return m @ g @ m.T


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def test_zero_maps_give_half():
    gamma = aggregate_keypoint_map(torch.zeros(5, 4, 4), 16)
    assert torch.allclose(gamma, torch.full((16, 16), 0.5))


def test_matches_independent_bicubic():
    maps = torch.randn(3, 4, 4, dtype=torch.float64)
    ours = aggregate_keypoint_map(maps, 16).numpy()
    oracle = np.clip(bicubic_oracle(sigmoid(maps.sum(0).numpy()), 16), 0, 1)
    assert np.abs(ours - oracle).max() < 1e-10


@pytest.mark.parametrize("cell", [(0, 0), (1, 2), (3, 3), (2, 0)])
def test_single_strong_cell_peak(cell):
    G, H = 4, 32
    maps = torch.zeros(2, G, G, dtype=torch.float64)
    maps[0][cell] = 2.0
    gamma = aggregate_keypoint_map(maps, H).numpy()
    s = H / G
    cy, cx = ((c + 0.5) * s - 0.5 for c in cell)
    ys, xs = np.nonzero(gamma == gamma.max())
    assert np.all(np.abs(ys - cy) <= s) and np.all(np.abs(xs - cx) <= s)
    # the oracle agrees about where the peak is
    oracle = bicubic_oracle(sigmoid(maps.sum(0).numpy()), H)
    assert np.unravel_index(oracle.argmax(), oracle.shape) == (ys[0], xs[0])


@given(st.integers(0, 2 ** 31), st.floats(-4, 4))
def test_output_in_unit_interval(seed, scale):
    g = torch.Generator().manual_seed(seed)
    gamma = aggregate_keypoint_map(scale * 5 * torch.randn(3, 4, 4, generator=g), 16)
    assert float(gamma.min()) >= 0 and float(gamma.max()) <= 1


@given(st.integers(0, 2 ** 31), st.integers(0, 3), st.integers(0, 3), st.floats(0.01, 3))
def test_entry_increase_follows_interpolation_weight_sign(seed, r, c, bump):
    """Raising one entry moves each unclamped output in the direction of its cubic weight."""
    g = torch.Generator().manual_seed(seed)
    maps = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
    before = aggregate_keypoint_map(maps, 16).numpy()
    maps[1, r, c] += bump
    after = aggregate_keypoint_map(maps, 16).numpy()
    m = interp_matrix(4, 16)
    w = np.outer(m[:, r], m[:, c])
    inside = (before > 0) & (before < 1) & (after > 0) & (after < 1)
    delta = after - before
    assert np.all(delta[inside & (w > 1e-12)] > 0)
    assert np.all(delta[inside & (w < -1e-12)] < 0)
    assert np.all(np.abs(delta[inside & (np.abs(w) <= 1e-12)]) < 1e-12)


def overlap_oracle(gamma, masks):
    """First mask with the largest count of jointly-above-threshold pixels."""
    K, _, H, W = masks.shape
    best, best_k = -1, 0
    for k in range(K):
        n = 0
        for y in range(H):
            for x in range(W):
                n += int(masks[k, 0, y, x] > 0.5 and gamma[y, x] > 0.5)
        if n > best:
            best, best_k = n, k
    return best_k


def test_select_matches_mask():
    masks = torch.zeros(3, 1, 8, 8)
    masks[0, 0, :4] = 1
    masks[1, 0, 4:, :4] = 1
    masks[2, 0, 4:, 4:] = 1
    assert int(select_agent_index(masks[1, 0], masks)) == 1
    assert int(select_agent_index(torch.full((8, 8), 0.2), masks)) == 0


def test_select_matches_oracle_random():
    g = torch.Generator().manual_seed(0)
    for i in range(50):
        K = 2 + i % 3
        gamma = torch.rand(6, 6, generator=g) * (1.0 if i % 5 else 0.49)
        masks = torch.rand(K, 1, 6, 6, generator=g)
        assert int(select_agent_index(gamma, masks)) == overlap_oracle(gamma, masks)


def test_select_batched():
    g = torch.Generator().manual_seed(1)
    gamma, masks = torch.rand(5, 6, 6, generator=g), torch.rand(5, 3, 1, 6, 6, generator=g)
    idx = select_agent_index(gamma, masks)
    assert idx.tolist() == [overlap_oracle(gamma[b], masks[b]) for b in range(5)]


@given(st.integers(2, 5), st.integers(0, 2 ** 31))
def test_select_relabeling(K, seed):
    g = torch.Generator().manual_seed(seed)
    gamma, masks = torch.rand(6, 6, generator=g), torch.rand(K, 1, 6, 6, generator=g)
    counts = [int(((masks[k, 0] > 0.5) & (gamma > 0.5)).sum()) for k in range(K)]
    assume(counts.count(max(counts)) == 1)
    perm = torch.randperm(K, generator=g)
    k = int(select_agent_index(gamma, masks))
    k_perm = int(select_agent_index(gamma, masks[perm]))
    assert int(perm[k_perm]) == k


def test_agent_views():
    B, K = 2, 3
    z, h = torch.randn(B, K, 32), torch.randn(B, K, 128)
    masks = torch.rand(B, K, 1, 4, 4)
    zr, hr, pr = agent_views(z, h, masks, 0)
    assert torch.equal(zr, z[:, 0]) and torch.equal(hr, h[:, 0])
    assert pr.data_ptr() == masks[:, 0].data_ptr() and torch.equal(pr, masks[:, 0])
    assert hr.shape[-1] == 128
    zr, hr, pr = agent_views(z, h, masks, torch.tensor([2, 1]))
    assert torch.equal(pr[0], masks[0, 2]) and torch.equal(pr[1], masks[1, 1])
    assert torch.equal(zr[1], z[1, 1])
    with pytest.raises(IndexError):
        agent_views(z, h, masks, 3)
    with pytest.raises(IndexError):
        agent_views(z, h, masks, torch.tensor([0, -1]))


def test_keypoint_loss_zero_terms():
    cfg = tiny_config()
    B = 2
    pi = torch.rand(B, 1, 16, 16)
    q = GaussianLatent(torch.randn(B, 4, 2), torch.randn(B, 4, 2))
    aux = {"image": torch.zeros(B, 3, 16, 16), "sep": torch.zeros(B), "sparse": torch.zeros(B)}
    terms = keypoint_loss(pi[:, 0], pi, q, q, aux, cfg, reduce=False)
    assert all(float(t.abs().sum()) == 0 for t in terms)
    assert torch.equal(keypoint_loss(pi[:, 0], pi, q, q, aux, cfg), torch.zeros(B))


def test_keypoint_loss_scales():
    cfg = tiny_config()
    assert (cfg.kp_sep_scale, cfg.kp_sparse_scale, cfg.kp_kl_scale, cfg.heatmap_reg_scale) == \
        (0.02, 0.002, 0.001, 0.01)
    B = 1
    gamma, pi = torch.zeros(B, 4, 4), torch.ones(B, 1, 4, 4)
    q = GaussianLatent(torch.zeros(B, 1, 1), torch.zeros(B, 1, 1))
    aux = {"image": torch.zeros(B), "sep": torch.ones(B), "sparse": torch.ones(B)}
    # heatmap distance of all-ones vs zeros over 16 pixels is 4
    assert float(keypoint_loss(gamma, pi, q, q, aux, cfg)) == pytest.approx(0.02 + 0.002 + 0.01 * 4)


def test_detect_keypoints_static_frame_and_determinism():
    cfg = tiny_config()
    mod = KeypointModule(cfg).double()
    a = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    b = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    assert torch.equal(mod.detect(a, a), mod.detect(b, b))
    state = mod.initial_state(1, torch.float64)
    act = torch.randn(1, cfg.enhanced_action_dim, dtype=torch.float64)
    s1 = mod.detect_keypoints(b, a, state, act, seeded_rng(2))
    s2 = mod.detect_keypoints(b, a, state, act, seeded_rng(2))
    assert torch.equal(s1.z, s2.z) and torch.equal(s1.gamma, s2.gamma)
    assert s1.feature_maps.shape == (1, cfg.n_keypoints, cfg.kp_grid, cfg.kp_grid)


def test_default_keypoint_count():
    from gatsbi.config import preset
    cfg = preset("roll")
    assert (cfg.n_keypoints, cfg.kp_hidden_dim, cfg.kp_latent_dim) == (32, 512, 16)


def test_no_action_when_joint_conditioning_off():
    cfg = tiny_config(joint_action_conditioning=False)
    mod = KeypointModule(cfg).double()
    assert mod.condition[0].in_features == cfg.kp_hidden_dim
    frame, first = torch.rand(2, 1, 3, 16, 16, dtype=torch.float64)
    state = mod.initial_state(1, torch.float64)
    outs = [mod.detect_keypoints(frame, first, state, a, seeded_rng(0))
            for a in (torch.zeros(1, 8, dtype=torch.float64), torch.randn(1, 8, dtype=torch.float64))]
    assert torch.equal(outs[0].posterior.mean, outs[1].posterior.mean)
    assert torch.equal(outs[0].prior.mean, outs[1].prior.mean)
