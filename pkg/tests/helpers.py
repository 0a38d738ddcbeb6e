"""Shared builders for the gradient suite and the acceptance module."""
import numpy as np

from egofusion import data, geometry, losses
from egofusion.networks import DepthNetConfig, EgoMotionModel, PoseNetConfig
from egofusion.tensor import ops


def small_scene(width=64, height=64, seed=3, num_frames=3):
    spec = data.SyntheticSceneSpec(width=width, height=height, num_frames=num_frames, fx=60.0, fy=60.0, seed=seed)
    return data.generate_synthetic(spec)


def two_frame_model(seed=0, motion=None):
    """Desk-scale model with one exchanged channel per modality in the first block.

    ``motion`` (a 6-vector) is written into both regressors' output biases so
    the predicted warp starts at a generic pose. Near the identity every
    sampling coordinate sits next to a pixel centre, where bilinear
    interpolation has its slope breaks.
    """
    model = EgoMotionModel(DepthNetConfig(), PoseNetConfig("MultiLayerCE"), seed=seed)
    blk = model.pose.encoder.blocks[0]
    blk.bn1.bn["rgb"].gamma.data[0] = 0.01
    blk.bn2.bn["depth"].gamma.data[-1] = 0.01
    if motion is not None:
        scale = model.pose.cfg.output_scale
        for reg in (model.pose.regressor_rgb, model.pose.regressor_depth):
            reg.fc3.bias.data[:] = np.asarray(motion) / scale
    return model


# a few pixels of flow at the initial network's depth scale (about 0.2 m)
GENERIC_MOTION = np.array([0.003, 0.02, -0.004, 0.01, -0.005, 0.02])


def two_frame_loss(model, target, source, K, weights=None):
    """L_self for a target frame and its successor as the single source."""
    weights = weights or losses.LossWeights()
    inv = model.depth(ops.concat([target, source], axis=0))
    inv_t = [x[:1] for x in inv]
    inv_s = [x[1:] for x in inv]
    vec = model.pair_pose(target, source, inv_t[0], inv_s[0])
    out = losses.SnippetOutputs(
        target=target, sources=[source], inv_depth_target=inv_t, inv_depth_sources=[inv_s],
        poses=[geometry.pose_vec_to_rt(vec)], intrinsics=K,
        exchange_layers=model.pose.exchange_layers())
    return losses.total_loss(out, weights)[0]


def translation_direction_errors(pred_traj, gt_traj):
    """Angles (deg) between per-frame displacements of the Sim(3)-aligned prediction and GT."""
    from egofusion.evaluation import align_trajectory

    aligned, _ = align_trajectory(gt_traj, pred_traj, with_scale=True)
    dp = np.diff(aligned.positions(), axis=0)
    dg = np.diff(gt_traj.positions(), axis=0)
    cos = (dp * dg).sum(1) / (np.linalg.norm(dp, axis=1) * np.linalg.norm(dg, axis=1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def exact_warp_losses(seq, t, occlusion_tol=1e-3):
    """L_p and L_gc at frame ``t`` from ground-truth depth and pose, in float64.

    Pixels whose transported depth disagrees with the source's ground-truth
    depth are disocclusions (the point is hidden in the source) and are
    excluded, as are samples outside either image.
    """
    from egofusion.tensor import Tensor, default_dtype

    K = seq.intrinsics
    with default_dtype(np.float64):
        tgt = Tensor(seq.frames[t][None].astype(np.float64))
        depth = Tensor(seq.depths[t][None, None])
        photo, photo_masks, gc, gc_masks = [], [], [], []
        for s, T in ((t - 1, geometry.se3_invert(seq.relative[t - 1])), (t + 1, seq.relative[t])):
            coords, d_proj, valid = geometry.reprojection_grid(depth, T, K)
            synth, inb = ops.bilinear_sample(Tensor(seq.frames[s][None].astype(np.float64)), coords)
            d_src, inb_d = ops.bilinear_sample(Tensor(seq.depths[s][None, None]), coords)
            with np.errstate(divide="ignore", invalid="ignore"):
                visible = np.abs(d_proj.data - d_src.data[:, 0]) / d_src.data[:, 0] < occlusion_tol
            mask = valid & inb & inb_d & visible
            photo.append(losses.photometric_error(tgt, synth))
            photo_masks.append(losses.erode_mask(mask))
            gc.append(losses.geometric_consistency_map(d_proj, d_src[:, 0], mask))
            gc_masks.append(mask)
        lp = float(losses.min_over_sources(photo, photo_masks).data)
        lgc = float(losses.min_over_sources(gc, gc_masks).data)
    return lp, lgc


# -- evaluation oracles -------------------------------------------------------

def random_trajectory(rng, n=None, step=None):
    """Wandering camera path with a few metres per frame and small per-frame rotations."""
    from scipy.spatial.transform import Rotation

    from egofusion.evaluation import Trajectory

    n = n or int(rng.integers(120, 300))
    step = step or rng.uniform(1.0, 3.0)
    R, p = np.eye(3), np.zeros(3)
    poses = []
    for _ in range(n):
        poses.append(geometry.PoseSE3(R.copy(), p.copy()))
        R = R @ Rotation.from_rotvec(rng.normal(scale=0.02, size=3)).as_matrix()
        p = p + R @ np.array([0.0, 0.0, step]) + rng.normal(scale=0.1, size=3)
    return Trajectory(poses)


def perturbed(traj, rng, rot=0.01, trans=0.3):
    """Copy of ``traj`` with independent noise on every pose."""
    from scipy.spatial.transform import Rotation

    from egofusion.evaluation import Trajectory

    return Trajectory([geometry.PoseSE3(p.rotation @ Rotation.from_rotvec(rng.normal(scale=rot, size=3)).as_matrix(),
                                        p.translation + rng.normal(scale=trans, size=3)) for p in traj.poses])


def reference_relative_errors(gt, pred, lengths=tuple(range(100, 900, 100)), start_step=10):
    """Direct double loop over start frames and segment lengths.

    Returns (t_rel %, r_rel deg/100m, {length: count}); NaN when no segment fits.
    """
    from scipy.spatial.transform import Rotation

    G = [p.matrix() for p in gt.poses]
    P = [p.matrix() for p in pred.poses]
    dist = [0.0]
    for a, b in zip(G, G[1:]):
        dist.append(dist[-1] + float(np.sqrt(((b[:3, 3] - a[:3, 3]) ** 2).sum())))
    t_errs, r_errs, counts = [], [], {}
    for first in range(0, len(G), start_step):
        for L in lengths:
            last = next((j for j in range(first, len(G)) if dist[j] >= dist[first] + L), None)
            if last is None:
                continue
            dg = np.linalg.inv(G[first]) @ G[last]
            dp = np.linalg.inv(P[first]) @ P[last]
            E = np.linalg.inv(dg) @ dp
            t_errs.append(np.linalg.norm(E[:3, 3]) / L)
            r_errs.append(Rotation.from_matrix(E[:3, :3]).magnitude() / L)
            counts[L] = counts.get(L, 0) + 1
    if not t_errs:
        return float("nan"), float("nan"), counts
    return 100.0 * np.mean(t_errs), np.degrees(np.mean(r_errs)) * 100.0, counts


def yaw_drift_fixture(n=900, drift_deg=0.01):
    """Straight 1 m/frame path along z; the prediction's heading drifts by ``drift_deg`` per frame."""
    from scipy.spatial.transform import Rotation

    from egofusion.evaluation import Trajectory

    gt = Trajectory([geometry.PoseSE3(np.eye(3), np.array([0.0, 0.0, float(k)])) for k in range(n)])
    pred = Trajectory([geometry.PoseSE3(Rotation.from_euler("y", drift_deg * k, degrees=True).as_matrix(),
                                        np.array([0.0, 0.0, float(k)])) for k in range(n)])
    return gt, pred


def similarity_fixture(rng, n=20):
    """Points and their image under s=2, a quarter turn about z and t=(1, 2, 3)."""
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    s, t = 2.0, np.array([1.0, 2.0, 3.0])
    pred = rng.normal(size=(n, 3))
    return pred, s * pred @ R.T + t, (s, R, t)
