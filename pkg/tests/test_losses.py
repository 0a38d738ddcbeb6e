import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from egofusion import geometry, losses
from egofusion.losses import ExchangeLayer, LossWeights, SnippetOutputs
from egofusion.tensor import Parameter, Tensor, default_dtype

import helpers


def img(rng, shape=(1, 3, 8, 10)):
    return Tensor(rng.uniform(0, 1, size=shape))


# -- scalar reference implementations -----------------------------------------

def reflect(i, n):
    return -i if i < 0 else (2 * (n - 1) - i if i >= n else i)


def ssim_loop(a, b):
    H, W = a.shape
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            pa = np.array([[a[reflect(y + i, H), reflect(x + j, W)] for j in (-1, 0, 1)] for i in (-1, 0, 1)])
            pb = np.array([[b[reflect(y + i, H), reflect(x + j, W)] for j in (-1, 0, 1)] for i in (-1, 0, 1)])
            ma, mb = pa.mean(), pb.mean()
            va, vb = ((pa - ma) ** 2).mean(), ((pb - mb) ** 2).mean()
            cov = ((pa - ma) * (pb - mb)).mean()
            out[y, x] = ((2 * ma * mb + 1e-4) * (2 * cov + 9e-4)) / ((ma ** 2 + mb ** 2 + 1e-4) * (va + vb + 9e-4))
    return out


def photometric_loop(t, s, w=0.85):
    C = t.shape[0]
    per = [w * (1 - ssim_loop(t[c], s[c])) / 2 + (1 - w) * np.abs(t[c] - s[c]) for c in range(C)]
    return sum(per) / C


# -- SSIM and photometric error -----------------------------------------------

def test_ssim_identity_is_one(fp64, rng):
    a = img(rng)
    np.testing.assert_allclose(losses.ssim(a, a).data, 1.0, atol=1e-6)


def test_ssim_symmetric(fp64, rng):
    a, b = img(rng), img(rng)
    np.testing.assert_allclose(losses.ssim(a, b).data, losses.ssim(b, a).data, atol=1e-6)


@pytest.mark.parametrize("c", [0.0, 0.3, 0.7])
def test_ssim_of_constants_closed_form(fp64, c):
    a = Tensor(np.full((1, 1, 5, 5), c))
    b = Tensor(np.full((1, 1, 5, 5), c + 1.0))
    # zero variances: only the luminance factor survives
    expect = (2 * c * (c + 1) + 1e-4) / (c ** 2 + (c + 1) ** 2 + 1e-4)
    np.testing.assert_allclose(losses.ssim(a, b).data, expect, atol=1e-12)


def test_ssim_matches_loop(fp64, rng):
    a, b = img(rng, (1, 1, 6, 7)), img(rng, (1, 1, 6, 7))
    np.testing.assert_allclose(losses.ssim(a, b).data[0, 0], ssim_loop(a.data[0, 0], b.data[0, 0]), atol=1e-9)


def test_ssim_shape_mismatch(fp64, rng):
    with pytest.raises(ValueError):
        losses.ssim(img(rng), img(rng, (1, 3, 8, 9)))


def test_photometric_identical_is_zero(fp64, rng):
    a = img(rng)
    np.testing.assert_allclose(losses.photometric_error(a, a).data, 0.0, atol=1e-7)


def test_photometric_pure_l1(fp64, rng):
    a, b = img(rng), img(rng)
    e = losses.photometric_error(a, b, ssim_weight=0.0)
    np.testing.assert_allclose(e.data, np.abs(a.data - b.data).mean(axis=1), atol=1e-15)


def test_photometric_matches_loop(fp64, rng):
    a, b = img(rng, (1, 3, 6, 7)), img(rng, (1, 3, 6, 7))
    np.testing.assert_allclose(losses.photometric_error(a, b).data[0], photometric_loop(a.data[0], b.data[0]),
                               atol=1e-6)


# -- per-pixel minimum over sources -------------------------------------------

def test_single_source_is_masked_mean(fp64, rng):
    t, s = img(rng), img(rng)
    m = rng.uniform(size=(1, 8, 10)) > 0.3
    got = losses.min_reprojection_loss(t, [s], [m])
    np.testing.assert_allclose(float(got.data), losses.photometric_error(t, s).data[m].mean(), atol=1e-12)


def test_exact_source_dominates(fp64, rng):
    t = img(rng)
    ones = np.ones((1, 8, 10), bool)
    got = losses.min_reprojection_loss(t, [img(rng), Tensor(t.data.copy())], [ones, ones])
    assert abs(float(got.data)) < 1e-7


@given(st.integers(0, 10_000))
def test_min_reprojection_dominates_each_source(seed):
    rng = np.random.default_rng(seed)
    t, a, b = img(rng), img(rng), img(rng)
    ones = np.ones((1, 8, 10), bool)
    both = float(losses.min_reprojection_loss(t, [a, b], [ones, ones]).data)
    for s in (a, b):
        assert both <= float(losses.min_reprojection_loss(t, [s], [ones]).data) + 1e-7


def test_min_reprojection_matches_loop(fp64, rng):
    t, a, b = img(rng, (1, 3, 6, 7)), img(rng, (1, 3, 6, 7)), img(rng, (1, 3, 6, 7))
    ma = rng.uniform(size=(1, 6, 7)) > 0.3
    mb = rng.uniform(size=(1, 6, 7)) > 0.3
    ea, eb = photometric_loop(t.data[0], a.data[0]), photometric_loop(t.data[0], b.data[0])
    vals = []
    for y in range(6):
        for x in range(7):
            cand = [e[y, x] for e, m in ((ea, ma), (eb, mb)) if m[0, y, x]]
            if cand:
                vals.append(min(cand))
    got = losses.min_reprojection_loss(t, [a, b], [ma, mb])
    assert abs(float(got.data) - np.mean(vals)) < 1e-6


def test_min_reprojection_errors(fp64, rng):
    with pytest.raises(ValueError):
        losses.min_reprojection_loss(img(rng), [], [])
    with pytest.raises(ValueError):
        losses.min_reprojection_loss(img(rng), [img(rng)], [np.zeros((1, 8, 10), bool)])


def test_erode_mask_removes_neighbourhood_of_holes():
    m = np.ones((1, 5, 6), bool)
    m[0, 2, 3] = False
    e = losses.erode_mask(m)
    expect = np.ones((5, 6), bool)
    expect[1:4, 2:5] = False
    assert np.array_equal(e[0], expect)
    assert losses.erode_mask(np.ones((1, 4, 4), bool)).all()


# -- geometric consistency ----------------------------------------------------

def test_gc_equal_depths_zero(fp64, rng):
    d = Tensor(rng.uniform(1, 5, size=(1, 4, 5)))
    assert float(losses.geometric_consistency_loss(d, d, np.ones((1, 4, 5), bool)).data) == 0.0


def test_gc_hand_value(fp64):
    got = losses.geometric_consistency_loss(Tensor(np.full((1, 3, 3), 3.0)), Tensor(np.ones((1, 3, 3))),
                                            np.ones((1, 3, 3), bool))
    assert abs(float(got.data) - 0.5) < 1e-12


def test_gc_matches_loop(fp64, rng):
    a, b = rng.uniform(1, 5, size=(1, 4, 5)), rng.uniform(1, 5, size=(1, 4, 5))
    m = rng.uniform(size=(1, 4, 5)) > 0.4
    ref = np.mean([abs(x - y) / (x + y) for x, y, k in zip(a.ravel(), b.ravel(), m.ravel()) if k])
    got = losses.geometric_consistency_loss(Tensor(a), Tensor(b), m)
    assert abs(float(got.data) - ref) < 1e-6


def test_gc_empty_mask(fp64):
    with pytest.raises(ValueError):
        losses.geometric_consistency_loss(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 2, 2))),
                                          np.zeros((1, 2, 2), bool))


# -- smoothness ---------------------------------------------------------------

def smoothness_loop(image, inv):
    C, H, W = image.shape
    d = inv / (inv.mean() + 1e-12)
    sx = [abs(d[y, x] - d[y, x + 1]) * math.exp(-np.mean([abs(image[c, y, x] - image[c, y, x + 1]) for c in range(C)]))
          for y in range(H) for x in range(W - 1)]
    sy = [abs(d[y, x] - d[y + 1, x]) * math.exp(-np.mean([abs(image[c, y, x] - image[c, y + 1, x]) for c in range(C)]))
          for y in range(H - 1) for x in range(W)]
    return np.mean(sx) + np.mean(sy)


def test_smoothness_constant_depth_zero(fp64, rng):
    assert float(losses.smoothness_loss(img(rng), Tensor(np.full((1, 1, 8, 10), 0.3))).data) == 0.0


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_smoothness_scale_invariant(scale, seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        image = img(rng)
        inv = rng.uniform(0.1, 2, size=(1, 1, 8, 10))
        a = float(losses.smoothness_loss(image, Tensor(inv)).data)
        b = float(losses.smoothness_loss(image, Tensor(inv * scale)).data)
    assert abs(a - b) <= 1e-6 * max(1.0, abs(a))


def test_smoothness_edge_aware_weighting(fp64):
    inv = np.ones((1, 1, 6, 6))
    inv[..., 3:] = 2.0
    flat = Tensor(np.zeros((1, 3, 6, 6)))
    edge = np.zeros((1, 3, 6, 6))
    edge[..., 3:] = 1.0
    a = float(losses.smoothness_loss(flat, Tensor(inv)).data)
    b = float(losses.smoothness_loss(Tensor(edge), Tensor(inv)).data)
    assert b / a == pytest.approx(math.exp(-1.0), abs=1e-12)
    weak = Tensor(edge * 0.5)
    assert float(losses.smoothness_loss(weak, Tensor(inv)).data) > b


def test_smoothness_matches_loop(fp64, rng):
    image, inv = img(rng, (1, 3, 5, 6)), rng.uniform(0.1, 2, size=(1, 1, 5, 6))
    got = float(losses.smoothness_loss(image, Tensor(inv)).data)
    assert abs(got - smoothness_loop(image.data[0], inv[0, 0])) < 1e-6


def test_smoothness_rejects_degenerate(fp64):
    with pytest.raises(ValueError):
        losses.smoothness_loss(Tensor(np.ones((1, 3, 1, 1))), Tensor(np.ones((1, 1, 1, 1))))


# -- polarization regularizer -------------------------------------------------

def layer(gammas, sets):
    return ExchangeLayer({m: Parameter(np.asarray(g, float)) for m, g in gammas.items()}, sets)


def test_polarization_equal_gammas(fp64):
    got = losses.polarization_reg([layer({"rgb": [0.2] * 4}, {"rgb": [0, 1, 2, 3]})], alpha=0.1)
    assert abs(float(got.data) - 0.8) < 1e-6


def test_polarization_hand_value(fp64):
    got = losses.polarization_reg([layer({"rgb": [0.1, 0.3]}, {"rgb": [0, 1]})], alpha=0.1)
    assert abs(float(got.data) - 0.38) < 1e-6


def test_polarization_alpha_zero_is_l1(fp64, rng):
    g = rng.normal(size=8)
    got = losses.polarization_reg([layer({"rgb": g}, {"rgb": [4, 5, 6, 7]})], alpha=0.0)
    assert abs(float(got.data) - np.abs(g[4:]).sum()) < 1e-12


def test_polarization_only_exchangeable_half_and_per_modality_mean(fp64, rng):
    gr, gd = rng.uniform(0, 1, 6), rng.uniform(0, 1, 6)
    sets = {"rgb": [0, 1, 2], "depth": [3, 4, 5]}
    got = losses.polarization_reg([layer({"rgb": gr, "depth": gd}, sets)], alpha=0.3)
    ref = 0.0
    for g, idx in ((gr, sets["rgb"]), (gd, sets["depth"])):
        v = g[idx]
        ref += (np.abs(v) - 0.3 * np.abs(v - v.mean())).sum()
    assert abs(float(got.data) - ref) < 1e-12
    joint = losses.polarization_reg([layer({"rgb": gr, "depth": gd}, sets)], alpha=0.3, joint_mean=True)
    mu = np.concatenate([gr[:3], gd[3:]]).mean()
    ref_j = sum((np.abs(v) - 0.3 * np.abs(v - mu)).sum() for v in (gr[:3], gd[3:]))
    assert abs(float(joint.data) - ref_j) < 1e-12


def test_polarization_lower_bound(fp64, rng):
    for _ in range(20):
        g = rng.uniform(0, 1, 6)
        alpha = rng.uniform(0, 1)
        got = float(losses.polarization_reg([layer({"rgb": g}, {"rgb": range(6)})], alpha).data)
        assert got >= (1 - alpha) * g.sum() - alpha * 6 * g.mean() - 1e-12


def test_polarization_errors(fp64):
    with pytest.raises(ValueError):
        losses.polarization_reg([layer({"rgb": [0.1]}, {"rgb": []})], 0.1)
    with pytest.raises(ValueError):
        losses.polarization_reg([], 0.1)


# -- total objective ----------------------------------------------------------

def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3, w.alpha, w.ssim_weight) == (1e-2, 1e-3, 2e-5, 1e-1, 0.85)
    with pytest.raises(ValueError):
        LossWeights(lambda2=-1.0)


def random_outputs(rng):
    seq = helpers.small_scene(width=32, height=32, num_frames=3)
    t, a, b = (Tensor(f[None]) for f in seq.frames)

    def scales():
        return [Tensor(rng.uniform(2, 6, size=(1, 1, 32 // 2 ** k, 32 // 2 ** k))) for k in range(4)]
    poses = [geometry.pose_vec_to_rt(Tensor(v[None])) for v in
             (np.array([0.01, -0.02, 0.0, 0.02, 0.0, -0.03]), np.array([-0.01, 0.02, 0.01, -0.02, 0.01, 0.03]))]
    ex = [layer({"rgb": rng.uniform(0, 1, 4), "depth": rng.uniform(0, 1, 4)}, {"rgb": [0, 1], "depth": [2, 3]})]
    return SnippetOutputs(target=t, sources=[a, b], inv_depth_target=scales(),
                          inv_depth_sources=[scales(), scales()], poses=poses, intrinsics=seq.intrinsics,
                          exchange_layers=ex)


def test_total_loss_reduces_to_photometric(fp64, rng):
    out = random_outputs(rng)
    total, terms = losses.total_loss(out, LossWeights(lambda1=0, lambda2=0, lambda3=0))
    assert float(total.data) == terms["photometric"]


def test_total_loss_weighted_sum_identity(fp64, rng):
    out = random_outputs(rng)
    w = LossWeights(lambda1=0.3, lambda2=0.2, lambda3=0.1, alpha=0.1)
    total, terms = losses.total_loss(out, w)
    hand = terms["photometric"] + 0.3 * terms["geometric"] + 0.2 * terms["smoothness"] + 0.1 * terms["regularizer"]
    assert abs(float(total.data) - hand) < 1e-12
    assert abs(losses.combine_terms(terms, w) - hand) < 1e-15
    assert all(terms[k] >= 0 for k in ("photometric", "geometric", "smoothness"))


def test_total_loss_requires_four_scales(fp64, rng):
    out = random_outputs(rng)
    out.inv_depth_target = out.inv_depth_target[:3]
    with pytest.raises(ValueError):
        losses.total_loss(out, LossWeights())


def test_exact_warp_limit():
    lp, lgc = helpers.exact_warp_losses(helpers.small_scene(width=64, height=64, num_frames=4), 1)
    assert lp < 1e-3 and lgc < 1e-6
