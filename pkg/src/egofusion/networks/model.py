"""Joint depth + pose model."""
from __future__ import annotations

import numpy as np

from .. import geometry
from ..losses import SnippetOutputs
from ..tensor import ops
from .depth import DepthNet, DepthNetConfig
from .layers import Module
from .pose import PoseNet, PoseNetConfig


class EgoMotionModel(Module):
    def __init__(self, depth_cfg: DepthNetConfig | None = None, pose_cfg: PoseNetConfig | None = None,
                 seed=0):
        self.depth = DepthNet(depth_cfg, seed=seed)
        self.pose = PoseNet(pose_cfg, seed=seed + 1)
        self.name_parameters()

    def config_dict(self):
        d = self.depth.cfg
        return {
            "depth": {"encoder_channels": list(d.encoder_channels), "decoder_channels": list(d.decoder_channels),
                      "num_scales": d.num_scales, "min_depth": d.min_depth, "max_depth": d.max_depth},
            "pose": self.pose.cfg.as_dict(),
        }

    def pair_pose(self, img_a, img_b, inv_a, inv_b):
        """Pose vectors ``T_a_to_b`` for batched frame pairs in temporal order."""
        rgb = ops.concat([img_a, img_b], axis=1)
        dep = ops.concat([inv_a, inv_b], axis=1)
        return self.pose(rgb, dep)

    def snippet_outputs(self, prev, target, nxt, K: geometry.Intrinsics):
        """Run both networks on a batch of (t-1, t, t+1) snippets.

        The pose network always sees pairs in temporal order; the warp from
        the previous frame uses the inverse of ``T_{t-1 -> t}``.
        """
        B = target.shape[0]
        inv = self.depth(ops.concat([prev, target, nxt], axis=0))
        inv_prev = [x[:B] for x in inv]
        inv_t = [x[B:2 * B] for x in inv]
        inv_next = [x[2 * B:] for x in inv]
        vec = self.pair_pose(ops.concat([prev, target], axis=0), ops.concat([target, nxt], axis=0),
                             ops.concat([inv_prev[0], inv_t[0]], axis=0),
                             ops.concat([inv_t[0], inv_next[0]], axis=0))
        R, t = geometry.pose_vec_to_rt(vec)
        R_prev_t, t_prev_t = R[:B], t[:B]
        R_t_next, t_t_next = R[B:], t[B:]
        pose_t_prev = geometry.invert_rt(R_prev_t, t_prev_t)
        return SnippetOutputs(
            target=target,
            sources=[prev, nxt],
            inv_depth_target=inv_t,
            inv_depth_sources=[inv_prev, inv_next],
            poses=[pose_t_prev, (R_t_next, t_t_next)],
            intrinsics=K,
            exchange_layers=self.pose.exchange_layers(),
        ), vec

    def exchange_summary(self):
        g = self.pose.exchangeable_gammas()
        if g.size == 0:
            return {}
        thr = self.pose.cfg.ce_threshold
        return {"exchanged_fraction": float((g < thr).mean()), "gamma_mean": float(g.mean()),
                "gamma_hist": np.histogram(g, bins=10, range=(0.0, max(1.0, float(g.max()))))[0].tolist()}
