"""Self-supervised objective: photometric, geometric consistency, smoothness
and the channel-exchange polarization regularizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .tensor import Tensor, ops

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
# stand-in error for invalid pixels; any real photometric error is far below it
_INVALID = 1e4
# guards the mean normalization of inverse depth against a zero mean while
# keeping the loss scale invariant to 1e-6 for means down to 1e-6
SMOOTH_EPS = 1e-12


@dataclass
class LossWeights:
    lambda1: float = 1e-2   # geometric consistency
    lambda2: float = 1e-3   # smoothness
    lambda3: float = 2e-5   # channel-exchange regularizer
    alpha: float = 1e-1     # polarization strength
    ssim_weight: float = 0.85

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


def ssim(a, b):
    """Per-pixel SSIM over 3x3 windows (reflection-padded), shape preserved."""
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    a = ops.pad2d(a, 1)
    b = ops.pad2d(b, 1)
    mu_a = ops.avg_pool2d(a, 3)
    mu_b = ops.avg_pool2d(b, 3)
    sig_a = ops.avg_pool2d(a * a, 3) - mu_a * mu_a
    sig_b = ops.avg_pool2d(b * b, 3) - mu_b * mu_b
    sig_ab = ops.avg_pool2d(a * b, 3) - mu_a * mu_b
    num = (mu_a * mu_b * 2 + SSIM_C1) * (sig_ab * 2 + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (sig_a + sig_b + SSIM_C2)
    return num / den


def photometric_error(target, synth, ssim_weight=0.85):
    """(N, H, W) map mixing structural dissimilarity and L1, averaged over channels."""
    if target.shape != synth.shape:
        raise ValueError(f"photometric shape mismatch {target.shape} vs {synth.shape}")
    l1 = ops.abs(target - synth)
    if ssim_weight == 0:
        per_channel = l1
    else:
        per_channel = (1 - ssim(target, synth)) * (0.5 * ssim_weight) + l1 * (1 - ssim_weight)
    return per_channel.mean(axis=1)


def erode_mask(mask):
    """3x3 erosion of an (N, H, W) boolean mask; the image border counts as valid."""
    m = np.pad(np.asarray(mask, dtype=bool), ((0, 0), (1, 1), (1, 1)), mode="edge")
    H, W = m.shape[1] - 2, m.shape[2] - 2
    out = np.ones((m.shape[0], H, W), dtype=bool)
    for i in range(3):
        for j in range(3):
            out &= m[:, i:i + H, j:j + W]
    return out


def min_over_sources(maps, masks):
    """Masked per-pixel minimum over sources and the mean over surviving pixels.

    A source only competes at pixels where its mask holds; pixels valid in
    no source are dropped.
    """
    if not maps:
        raise ValueError("need at least one source")
    masks = [np.asarray(m, dtype=bool) for m in masks]
    any_valid = np.logical_or.reduce(masks)
    count = int(any_valid.sum())
    if count == 0:
        raise ValueError("no pixel is valid in any source")
    masked = [ops.where(m, e, _INVALID) for e, m in zip(maps, masks)]
    best = ops.minimum(masked)
    return ops.where(any_valid, best, 0.0).sum() * (1.0 / count)


def min_reprojection_loss(target, synths, masks, ssim_weight=0.85):
    if not synths:
        raise ValueError("need at least one source view")
    errors = [photometric_error(target, s, ssim_weight) for s in synths]
    return min_over_sources(errors, masks)


def geometric_consistency_map(d_proj, d_interp, mask):
    mask = np.asarray(mask, dtype=bool)
    denom = ops.where(mask, d_proj + d_interp, 1.0)
    return ops.abs(d_proj - d_interp) / denom


def geometric_consistency_loss(d_proj, d_interp, mask):
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("geometric consistency over an empty mask")
    diff = geometric_consistency_map(d_proj, d_interp, mask)
    return ops.where(mask, diff, 0.0).sum() * (1.0 / n)


def smoothness_loss(image, inv_depth):
    """Edge-aware first-order smoothness of mean-normalized inverse depth."""
    H, W = inv_depth.shape[-2:]
    if H < 2 or W < 2:
        raise ValueError("smoothness needs at least 2x2 maps")
    if image.shape[-2:] != (H, W):
        raise ValueError("image and inverse depth extents differ")
    d = inv_depth / (inv_depth.mean(axis=(2, 3), keepdims=True) + SMOOTH_EPS)
    dx = ops.abs(d[:, :, :, :-1] - d[:, :, :, 1:])
    dy = ops.abs(d[:, :, :-1, :] - d[:, :, 1:, :])
    ix = np.abs(image.data[:, :, :, :-1] - image.data[:, :, :, 1:]).mean(axis=1, keepdims=True)
    iy = np.abs(image.data[:, :, :-1, :] - image.data[:, :, 1:, :]).mean(axis=1, keepdims=True)
    if image.requires_grad:
        ix = ops.abs(image[:, :, :, :-1] - image[:, :, :, 1:]).mean(axis=1, keepdims=True)
        iy = ops.abs(image[:, :, :-1, :] - image[:, :, 1:, :]).mean(axis=1, keepdims=True)
        wx, wy = ops.exp(-ix), ops.exp(-iy)
    else:
        wx, wy = np.exp(-ix), np.exp(-iy)
    return (dx * wx).mean() + (dy * wy).mean()


@dataclass
class ExchangeLayer:
    """Scaling factors of one channel-exchanging BN layer: modality -> (gamma, indices)."""
    gammas: dict
    index_sets: dict


def polarization_reg(layers, alpha, joint_mean=False):
    """Sum over modalities, layers and exchangeable channels of |g| - alpha |g - mean|.

    The mean is taken over the modality's own exchangeable set in the layer,
    or over the union of both modalities' sets when ``joint_mean`` is set.
    """
    total = None
    for layer in layers:
        picked = {}
        for m, g in layer.gammas.items():
            idx = np.asarray(layer.index_sets[m])
            if idx.size == 0:
                raise ValueError(f"empty exchangeable set for modality {m}")
            picked[m] = g[idx]
        if joint_mean:
            joint = ops.concat(list(picked.values()))
            means = {m: joint.mean() for m in picked}
        else:
            means = {m: v.mean() for m, v in picked.items()}
        for m, v in picked.items():
            term = (ops.abs(v) - ops.abs(v - means[m]) * alpha).sum()
            total = term if total is None else total + term
    if total is None:
        raise ValueError("no exchange layers given")
    return total


@dataclass
class SnippetOutputs:
    """Everything the objective needs for a batch of snippets.

    ``inv_depth_target``: four (N, 1, h, w) inverse-depth tensors, finest first.
    ``inv_depth_sources``: per source, the same four-scale list.
    ``poses``: per source, ``(R, t)`` tensors of ``T_target_to_source``.
    """
    target: Tensor
    sources: list
    inv_depth_target: list
    inv_depth_sources: list
    poses: list
    intrinsics: geometry.Intrinsics
    exchange_layers: list = field(default_factory=list)
    extra_mask: np.ndarray | None = None


NUM_SCALES = 4


def total_loss(out: SnippetOutputs, weights: LossWeights, joint_mean=False):
    """Weighted objective averaged over scales; returns (scalar, breakdown)."""
    if len(out.inv_depth_target) != NUM_SCALES or any(len(s) != NUM_SCALES for s in out.inv_depth_sources):
        raise ValueError(f"expected {NUM_SCALES} depth scales")
    if not (len(out.sources) == len(out.inv_depth_sources) == len(out.poses)):
        raise ValueError("sources, source depths and poses must align")
    K = out.intrinsics
    H, W = out.target.shape[-2:]
    lp_sum = lgc_sum = ls_sum = None
    for k in range(NUM_SCALES):
        inv_t = ops.upsample_bilinear(out.inv_depth_target[k], H, W)
        depth_t = 1.0 / inv_t
        photo, photo_masks, gc, gc_masks = [], [], [], []
        for src, inv_s_scales, pose in zip(out.sources, out.inv_depth_sources, out.poses):
            coords, d_proj, valid = geometry.reprojection_grid(depth_t, pose, K)
            synth, inb = ops.bilinear_sample(src, coords)
            mask = valid & inb
            if out.extra_mask is not None:
                mask = mask & out.extra_mask
            depth_s = 1.0 / ops.upsample_bilinear(inv_s_scales[k], H, W)
            d_interp, inb_d = ops.bilinear_sample(depth_s, coords)
            photo.append(photometric_error(out.target, synth, weights.ssim_weight))
            photo_masks.append(erode_mask(mask))
            gc.append(geometric_consistency_map(d_proj, d_interp[:, 0], mask & inb_d))
            gc_masks.append(mask & inb_d)
        lp = min_over_sources(photo, photo_masks)
        lgc = min_over_sources(gc, gc_masks)
        ls = smoothness_loss(out.target, inv_t)
        lp_sum = lp if lp_sum is None else lp_sum + lp
        lgc_sum = lgc if lgc_sum is None else lgc_sum + lgc
        ls_sum = ls if ls_sum is None else ls_sum + ls
    lp = lp_sum * (1.0 / NUM_SCALES)
    lgc = lgc_sum * (1.0 / NUM_SCALES)
    ls = ls_sum * (1.0 / NUM_SCALES)
    total = lp + lgc * weights.lambda1 + ls * weights.lambda2
    lr = None
    if out.exchange_layers and weights.lambda3 > 0:
        lr = polarization_reg(out.exchange_layers, weights.alpha, joint_mean)
        total = total + lr * weights.lambda3
    breakdown = {
        "photometric": float(lp.data),
        "geometric": float(lgc.data),
        "smoothness": float(ls.data),
        "regularizer": float(lr.data) if lr is not None else 0.0,
        "total": float(total.data),
    }
    return total, breakdown


def combine_terms(terms, weights: LossWeights):
    """Plain-number weighted sum of a loss breakdown."""
    return (terms["photometric"] + weights.lambda1 * terms["geometric"]
            + weights.lambda2 * terms["smoothness"] + weights.lambda3 * terms["regularizer"])
