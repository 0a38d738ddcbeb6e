import numpy as np
import pytest
from hypothesis import given, strategies as st

from egofusion.networks import (
    DepthNet, DepthNetConfig, EgoMotionModel, FusionStrategy, Linear, PoseNet, PoseNetConfig,
    PoseRegressor, channel_exchange, exchange_masks, exchangeable_indices, late_combine, regressor_forward,
    sigmoid_to_inv_depth, soft_fusion)
from egofusion.tensor import Parameter, Tensor, no_grad

SMALL_DEPTH = DepthNetConfig(encoder_channels=(4, 8, 8, 8), decoder_channels=(4, 4, 4, 4))


def small_pose(strategy, **kw):
    return PoseNetConfig(strategy, widths=(4, 4, 8, 8), blocks=(1, 1, 1, 1), regressor_hidden=(8, 8), **kw)


def pair(rng, n=2, h=32, w=32):
    return Tensor(rng.uniform(0, 1, size=(n, 6, h, w))), Tensor(rng.uniform(0.01, 2, size=(n, 2, h, w)))


# -- depth network ------------------------------------------------------------

def test_depth_output_shapes(rng):
    out = DepthNet(SMALL_DEPTH)(Tensor(rng.uniform(size=(2, 3, 32, 48))))
    assert [o.shape for o in out] == [(2, 1, 32 // 2 ** k, 48 // 2 ** k) for k in range(4)]


def test_depth_rejects_bad_extents(rng):
    with pytest.raises(ValueError):
        DepthNet(SMALL_DEPTH)(Tensor(rng.uniform(size=(1, 3, 24, 32))))
    with pytest.raises(ValueError):
        DepthNet(SMALL_DEPTH)(Tensor(rng.uniform(size=(1, 4, 32, 32))))


def test_sigmoid_endpoints():
    assert sigmoid_to_inv_depth(0.0, 0.1, 100.0) == pytest.approx(0.01, abs=1e-15)
    assert sigmoid_to_inv_depth(1.0, 0.1, 100.0) == pytest.approx(10.0, abs=1e-12)


def test_depth_config_validation():
    with pytest.raises(ValueError):
        DepthNetConfig(num_scales=3)
    with pytest.raises(ValueError):
        DepthNetConfig(min_depth=5.0, max_depth=1.0)


def test_depth_outputs_positive_and_finite_over_trials():
    rng = np.random.default_rng(7)
    net = DepthNet(SMALL_DEPTH, seed=3)
    lo, hi = 1 / SMALL_DEPTH.max_depth, 1 / SMALL_DEPTH.min_depth
    with no_grad():
        for _ in range(100):
            x = Tensor(rng.normal(0.5, 0.5, size=(1, 3, 16, 16)))
            for o in net(x):
                assert np.isfinite(o.data).all()
                assert (o.data >= lo).all() and (o.data <= hi).all() and (o.data > 0).all()


# -- channel exchange ---------------------------------------------------------

def feats(rng, shape=(2, 4, 3, 3)):
    return Tensor(rng.normal(size=shape)), Tensor(rng.normal(size=shape))


def test_no_exchange_when_all_gammas_large(rng):
    r, d = feats(rng)
    g = np.full(4, 0.5)
    r2, d2, counts = channel_exchange(r, d, g, g, 0.02)
    assert counts == (0, 0)
    assert np.array_equal(r2.data, r.data) and np.array_equal(d2.data, d.data)


def test_full_exchange_limit(rng):
    r, d = feats(rng)
    g = np.full(4, 1e-3)
    r2, d2, counts = channel_exchange(r, d, g, g, 0.02)
    assert counts == (2, 2)
    assert np.array_equal(r2.data[:, :2], d.data[:, :2]) and np.array_equal(r2.data[:, 2:], r.data[:, 2:])
    assert np.array_equal(d2.data[:, 2:], r.data[:, 2:]) and np.array_equal(d2.data[:, :2], d.data[:, :2])


def test_mixed_mask_rule_application():
    r = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1))
    d = Tensor(np.array([10.0, 20.0, 30.0, 40.0]).reshape(1, 4, 1, 1))
    g_r = np.array([0.01, 0.5, 0.001, 0.001])    # channels 2, 3 are outside rgb's set
    g_d = np.array([0.001, 0.001, 0.01, 0.5])    # channels 0, 1 are outside depth's set
    r2, d2, counts = channel_exchange(r, d, g_r, g_d, 0.02)
    assert r2.data.ravel().tolist() == [10.0, 2.0, 3.0, 4.0]
    assert d2.data.ravel().tolist() == [10.0, 20.0, 3.0, 40.0]
    assert counts == (1, 1)


def test_threshold_compares_magnitude():
    m_r, m_d = exchange_masks(np.array([-0.01, -0.5]), np.array([0.3, -0.001]), 0.02)
    assert m_r.tolist() == [True, False] and m_d.tolist() == [False, True]


@given(st.integers(1, 32), st.integers(0, 10_000))
def test_exchange_sets_disjoint_cover(half, seed):
    C = 2 * half
    sets = exchangeable_indices(C)
    a, b = set(sets["rgb"]), set(sets["depth"])
    assert not a & b and a | b == set(range(C))
    rng = np.random.default_rng(seed)
    m_r, m_d = exchange_masks(rng.uniform(0, 0.04, C), rng.uniform(0, 0.04, C), 0.02)
    assert not m_r[half:].any() and not m_d[:half].any()


@given(st.integers(0, 10_000), st.floats(1e-4, 0.5), st.floats(1e-4, 0.5))
def test_exchange_count_monotone_in_threshold(seed, t1, t2):
    rng = np.random.default_rng(seed)
    g_r, g_d = rng.uniform(0, 0.5, 8), rng.uniform(0, 0.5, 8)
    lo, hi = sorted((t1, t2))
    n = [sum(m.sum() for m in exchange_masks(g_r, g_d, t)) for t in (lo, hi)]
    assert n[0] <= n[1]


def test_exchange_errors(rng):
    r, d = feats(rng, (1, 3, 2, 2))
    with pytest.raises(ValueError):
        channel_exchange(r, d, np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        exchange_masks(np.ones(4), np.ones(4), 0.0)
    with pytest.raises(ValueError):
        PoseNetConfig(ce_threshold=-1.0)


def test_exchange_passes_gradient_across_modalities(rng):
    r = Parameter(rng.normal(size=(1, 2, 2, 2)))
    d = Parameter(rng.normal(size=(1, 2, 2, 2)))
    r2, _, _ = channel_exchange(r, d, np.array([0.001, 1.0]), np.array([1.0, 1.0]), 0.02)
    r2.sum().backward()
    assert np.array_equal(d.grad[:, 0], np.ones((1, 2, 2)))
    assert np.array_equal(r.grad[:, 0], np.zeros((1, 2, 2)))


# -- fusion heads -------------------------------------------------------------

def test_soft_fusion_saturation(rng):
    fr, fd = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
    gate = Linear(6, 6, rng)
    gate.weight.data[:] = 0.0
    gate.bias.data[:] = 50.0
    both = np.concatenate([fr.data, fd.data], axis=1)
    np.testing.assert_allclose(soft_fusion(fr, fd, gate).data, both, atol=1e-12)
    gate.bias.data[:] = -50.0
    np.testing.assert_allclose(soft_fusion(fr, fd, gate).data, 0.0, atol=1e-12)


def test_soft_fusion_hand_evaluation(fp64, rng):
    fr, fd = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 3)))
    gate = Linear(6, 6, rng)
    x = np.concatenate([fr.data, fd.data], axis=1)
    mask = 1 / (1 + np.exp(-(x @ gate.weight.data.T + gate.bias.data)))
    np.testing.assert_allclose(soft_fusion(fr, fd, gate).data, mask * x, atol=1e-12)
    with pytest.raises(ValueError):
        soft_fusion(fr, fd, Linear(4, 4, rng))


def test_late_combine_cases(fp64):
    a, b = Tensor(np.arange(6.0)[None]), Tensor(np.ones((1, 6)))
    np.testing.assert_allclose(late_combine(a, b, Tensor(np.zeros(2))).data, (a.data + b.data) / 2)
    np.testing.assert_allclose(late_combine(a, b, Tensor(np.array([60.0, 0.0]))).data, a.data, atol=1e-12)
    logits = np.log([0.3, 0.7])
    np.testing.assert_allclose(late_combine(a, b, Tensor(logits)).data, 0.3 * a.data + 0.7 * b.data, atol=1e-12)


# -- regressor ----------------------------------------------------------------

def test_regressor_zero_weights_give_zero_pose(rng):
    reg = PoseRegressor(5, (4, 4), 0.01, rng)
    for p in reg.parameters():
        p.data[:] = 0.0
    assert not regressor_forward(Tensor(rng.normal(size=(3, 5))), reg).data.any()


def test_regressor_loop_oracle(fp64, rng):
    reg = PoseRegressor(5, (4, 3), 0.01, rng)
    x = rng.normal(size=(2, 5))
    out = regressor_forward(Tensor(x), reg).data
    for n in range(2):
        h = x[n]
        for fc, act in ((reg.fc1, True), (reg.fc2, True), (reg.fc3, False)):
            W, b = fc.weight.data, fc.bias.data
            h = np.array([sum(W[i, j] * h[j] for j in range(W.shape[1])) + b[i] for i in range(W.shape[0])])
            if act:
                h = np.maximum(h, 0)
        np.testing.assert_allclose(out[n], 0.01 * h, atol=1e-12)


def test_regressor_last_layer_linearity(fp64, rng):
    reg = PoseRegressor(5, (4, 4), 0.01, rng)
    x = Tensor(rng.normal(size=(2, 5)))
    a = reg(x).data
    reg.fc3.weight.data *= 2
    reg.fc3.bias.data *= 2
    np.testing.assert_allclose(reg(x).data, 2 * a, atol=1e-15)
    with pytest.raises(ValueError):
        reg(Tensor(np.ones((1, 4))))


# -- pose network wiring ------------------------------------------------------

@pytest.mark.parametrize("strategy", list(FusionStrategy))
def test_every_strategy_outputs_six_vector(strategy, rng):
    net = PoseNet(small_pose(strategy))
    rgb, dep = pair(rng)
    out = net(rgb, dep)
    assert out.shape == (2, 6) and np.isfinite(out.data).all()


def test_strategy_parse():
    assert FusionStrategy.parse("multi_layer_ce") is FusionStrategy.MULTI_LAYER_CE
    assert FusionStrategy.parse("RgbOnly") is FusionStrategy.RGB_ONLY
    with pytest.raises(ValueError):
        FusionStrategy.parse("Hybrid")


def test_rgb_only_ignores_depth(rng):
    net = PoseNet(small_pose("RgbOnly"))
    rgb, dep = pair(rng)
    a = net(rgb, dep).data
    b = net(rgb, Tensor(dep.data * 3 + 1)).data
    assert np.array_equal(a, b)


def test_depth_only_requires_depth(rng):
    net = PoseNet(small_pose("DepthOnly"))
    rgb, _ = pair(rng)
    with pytest.raises(ValueError):
        net(rgb, None)


def test_multilayer_ce_shares_convolutions_not_bn():
    net = PoseNet(small_pose("MultiLayerCE"))
    enc = net.encoder
    assert enc.stem.weight.shape[1] == 6    # depth stream is replicated to the RGB input width
    for blk in enc.blocks:
        # a single conv object serves both streams
        assert "rgb" in blk.bn1.bn and "depth" in blk.bn1.bn
        assert blk.bn1.bn["rgb"].gamma is not blk.bn1.bn["depth"].gamma
    names = [n for n, _ in net.named_parameters()]
    assert not any("rgb" in n or "depth" in n for n in names if n.endswith("conv1.weight"))


def test_multilayer_ce_weight_update_reaches_both_streams(rng):
    net = PoseNet(small_pose("MultiLayerCE"))
    rgb, dep = pair(rng)
    net(rgb, dep)
    before = (net.diagnostics["pose_rgb"].copy(), net.diagnostics["pose_depth"].copy())
    net.encoder.blocks[0].conv1.weight.data *= 1.5
    net(rgb, dep)
    assert not np.array_equal(before[0], net.diagnostics["pose_rgb"])
    assert not np.array_equal(before[1], net.diagnostics["pose_depth"])


def test_multilayer_ce_no_exchange_at_init(rng):
    net = PoseNet(small_pose("MultiLayerCE"))
    net(*pair(rng))
    assert all(c == (0, 0) for c in net.diagnostics["exchange_counts"])
    assert len(net.diagnostics["exchange_counts"]) == 2 * len(net.encoder.blocks)


def test_forced_exchange_changes_rgb_stream(rng):
    net = PoseNet(small_pose("MultiLayerCE"))
    rgb, dep = pair(rng)
    net(rgb, dep)
    base = net.diagnostics["pose_rgb"].copy()
    net.encoder.blocks[0].bn1.bn["rgb"].gamma.data[:2] = 0.001
    net(rgb, dep)
    assert net.diagnostics["exchange_counts"][0] == (2, 0)
    assert not np.array_equal(base, net.diagnostics["pose_rgb"])
    # with exchange the rgb stream now depends on the depth input
    net(rgb, dep)
    rgb_a = net.diagnostics["pose_rgb"].copy()
    net(rgb, Tensor(dep.data + 0.5))
    assert not np.array_equal(rgb_a, net.diagnostics["pose_rgb"])


def test_exchange_layers_cover_main_branch_bns():
    net = PoseNet(small_pose("MultiLayerCE"))
    layers = net.exchange_layers()
    assert len(layers) == 2 * len(net.encoder.blocks)
    assert PoseNet(small_pose("Late")).exchange_layers() == []
    g = net.exchangeable_gammas()
    assert g.size == sum(len(l.index_sets["rgb"]) + len(l.index_sets["depth"]) for l in layers)


def test_pose_deterministic_for_fixed_seed(rng):
    rgb, dep = pair(rng)
    a = PoseNet(small_pose("Middle"), seed=4)(rgb, dep).data
    b = PoseNet(small_pose("Middle"), seed=4)(rgb, dep).data
    assert np.array_equal(a, b)


def test_state_dict_round_trip(rng):
    m1 = EgoMotionModel(SMALL_DEPTH, small_pose("MultiLayerCE"), seed=1)
    m2 = EgoMotionModel(SMALL_DEPTH, small_pose("MultiLayerCE"), seed=2)
    m2.load_state_dict(m1.state_dict())
    x = Tensor(rng.uniform(size=(1, 3, 32, 32)))
    for a, b in zip(m1.depth(x), m2.depth(x)):
        assert np.array_equal(a.data, b.data)
    bad = m1.state_dict()
    bad.pop(next(iter(bad)))
    with pytest.raises(KeyError):
        m2.load_state_dict(bad)


def test_gradient_reaches_every_parameter(rng):
    model = EgoMotionModel(SMALL_DEPTH, small_pose("MultiLayerCE"), seed=0)
    # one exchanged channel per modality so the cross-modal path is live
    blk = model.pose.encoder.blocks[0]
    blk.bn1.bn["rgb"].gamma.data[0] = 0.001
    blk.bn2.bn["depth"].gamma.data[-1] = 0.001
    # two pairs at 64x64 keep the deepest BN away from a single normalized sample
    a, b = Tensor(rng.uniform(size=(2, 3, 64, 64))), Tensor(rng.uniform(size=(2, 3, 64, 64)))
    inv = model.depth(Tensor(np.concatenate([a.data, b.data])))
    vec = model.pair_pose(a, b, inv[0][:2], inv[0][2:])
    w = rng.normal(size=vec.shape)
    loss = (vec * w).sum() + sum((x * rng.normal(size=x.shape)).sum() for x in inv)
    loss.backward()
    missing = [n for n, p in model.named_parameters() if p.grad is None or not np.abs(p.grad).any()]
    assert not missing, missing
