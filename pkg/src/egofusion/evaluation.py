"""Trajectory integration, similarity alignment and odometry error metrics.

Trajectories hold camera-to-world poses. Relative network outputs are
``T_t_to_t+1`` (points of frame t expressed in frame t+1), so the camera
path is built as ``P_{t+1} = P_t @ inverse(T_t_to_t+1)`` starting from the
identity.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PoseSE3, nearest_rotation, se3_compose, se3_invert

DEFAULT_LENGTHS = tuple(range(100, 900, 100))
DEFAULT_START_STEP = 10
ORTHO_TOL = 1e-3


class PoseFileError(ValueError):
    pass


class DegenerateAlignmentError(ValueError):
    pass


@dataclass
class Trajectory:
    poses: list
    indices: list | None = None

    def __post_init__(self):
        if self.indices is None:
            self.indices = list(range(len(self.poses)))
        if len(self.indices) != len(self.poses):
            raise ValueError("one index per pose required")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("frame indices must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self):
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def transformed(self, s, R, t):
        """Apply x -> s R x + t to the whole path (orientation rotated by R)."""
        R = np.asarray(R, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        return Trajectory([PoseSE3(R @ p.rotation, s * (R @ p.translation) + t) for p in self.poses],
                          list(self.indices))


# -- file format --------------------------------------------------------------

def parse_kitti_poses(path) -> Trajectory:
    """Read 3x4 row-major [R|t] lines; blank lines are skipped."""
    path = Path(path)
    if not path.is_file():
        raise PoseFileError(f"missing pose file {path}")
    poses = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        toks = line.split()
        if not toks:
            continue
        if len(toks) != 12:
            raise PoseFileError(f"{path}:{lineno}: expected 12 values, got {len(toks)}")
        try:
            M = np.array([float(x) for x in toks]).reshape(3, 4)
        except ValueError as exc:
            raise PoseFileError(f"{path}:{lineno}: {exc}") from None
        if not np.isfinite(M).all():
            raise PoseFileError(f"{path}:{lineno}: non-finite value")
        R = M[:, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or np.linalg.det(R) <= 0:
            warnings.warn(f"{path}:{lineno}: rotation not orthonormal, projecting to the nearest rotation",
                          stacklevel=2)
            R = nearest_rotation(R)
        poses.append(PoseSE3(R, M[:, 3]))
    if not poses:
        raise PoseFileError(f"{path}: no poses")
    return Trajectory(poses)


def format_kitti_poses(traj: Trajectory) -> str:
    lines = []
    for p in traj.poses:
        M = np.hstack([p.rotation, p.translation.reshape(3, 1)])
        lines.append(" ".join(f"{v:.15e}" for v in M.ravel()))
    return "\n".join(lines) + "\n"


def write_kitti_poses(traj: Trajectory, path):
    Path(path).write_text(format_kitti_poses(traj))


# -- integration and alignment ------------------------------------------------

def integrate_trajectory(relative_poses, indices=None) -> Trajectory:
    poses = [PoseSE3.identity()]
    for T in relative_poses:
        poses.append(se3_compose(poses[-1], se3_invert(T)))
    return Trajectory(poses, indices)


def relative_from_trajectory(traj: Trajectory):
    """Inverse of integrate_trajectory: T_t_to_t+1 = inverse(P_{t+1}) @ P_t."""
    return [se3_compose(se3_invert(b), a) for a, b in zip(traj.poses, traj.poses[1:])]


def _shortest_arc(a, b):
    """Rotation by the smallest angle taking unit vector ``a`` to unit vector ``b``."""
    v = np.cross(a, b)
    c = float(a @ b)
    if c < -1.0 + 1e-12:
        # antiparallel: half turn about any axis perpendicular to a
        axis = np.cross(a, np.eye(3)[np.argmin(np.abs(a))])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    K = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


def umeyama_align(pred, gt, with_scale=True, allow_collinear=False):
    """Similarity (s, R, t) minimizing sum ||gt - (s R pred + t)||^2.

    Collinear point sets leave the rotation about their common line free.
    They raise unless ``allow_collinear`` is set, in which case the
    minimizer with the smallest rotation angle is returned.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"point sets must both be (n, 3); got {pred.shape} and {gt.shape}")
    n = pred.shape[0]
    if n < 3 and not allow_collinear:
        raise DegenerateAlignmentError(f"need at least 3 point pairs, got {n}")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    xp, xg = pred - mu_p, gt - mu_g
    collinear = False
    for name, x in (("predicted", xp), ("reference", xg)):
        sv = np.linalg.svd(x, compute_uv=False) if n else np.zeros(1)
        if sv[0] <= 1e-12:
            raise DegenerateAlignmentError(f"{name} points are coincident")
        if len(sv) < 2 or sv[1] <= 1e-9 * sv[0]:
            if not allow_collinear:
                raise DegenerateAlignmentError(f"{name} points are coincident or collinear")
            collinear = True
    var_p = (xp ** 2).sum(axis=1).mean()
    if collinear:
        # best rotation maps the principal direction of pred onto the
        # principal direction of gt, oriented so the projections correlate
        dp = np.linalg.svd(xp)[2][0]
        dg = np.linalg.svd(xg)[2][0]
        if (xg @ dg) @ (xp @ dp) < 0:
            dg = -dg
        R = _shortest_arc(dp, dg)
        s = float((xg @ dg) @ (xp @ dp) / n / var_p) if with_scale else 1.0
    else:
        cov = xg.T @ xp / n
        U, D, Vt = np.linalg.svd(cov)
        S = np.eye(3)
        if np.linalg.det(U) * np.linalg.det(Vt) < 0:
            S[2, 2] = -1.0
        R = U @ S @ Vt
        s = float(np.trace(np.diag(D) @ S) / var_p) if with_scale else 1.0
    t = mu_g - s * R @ mu_p
    return s, R, t


def align_trajectory(gt: Trajectory, pred: Trajectory, with_scale=True):
    """Align ``pred`` onto ``gt``; straight-line paths get the minimal-angle rotation."""
    if len(gt) != len(pred):
        raise ValueError(f"trajectory lengths differ: {len(gt)} vs {len(pred)}")
    s, R, t = umeyama_align(pred.positions(), gt.positions(), with_scale, allow_collinear=True)
    return pred.transformed(s, R, t), (s, R, t)


def ate_rmse(gt: Trajectory, pred: Trajectory, with_scale=True):
    if len(gt) < 3:
        raise DegenerateAlignmentError("need at least 3 frames")
    aligned, _ = align_trajectory(gt, pred, with_scale)
    res = gt.positions() - aligned.positions()
    return float(np.sqrt((res ** 2).sum(axis=1).mean()))


# -- relative errors ----------------------------------------------------------

def trajectory_distances(traj: Trajectory):
    steps = np.linalg.norm(np.diff(traj.positions(), axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _rotation_angle(R):
    # atan2 of sine and cosine stays exact near zero, where arccos of the
    # (clipped) cosine alone turns 1e-16 rounding into 1e-8 rad
    sin = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(sin, cos))


def kitti_relative_errors(gt: Trajectory, pred: Trajectory, lengths=DEFAULT_LENGTHS,
                          start_step=DEFAULT_START_STEP):
    """Average translational (%) and rotational (deg / 100 m) segment errors.

    Returns ``(t_rel, r_rel, table)`` where ``table`` maps each length with at
    least one segment to ``(t_rel, r_rel, count)``. Both averages are ``nan``
    when the path is too short for any segment.
    """
    if len(gt) != len(pred):
        raise ValueError(f"trajectory lengths differ: {len(gt)} vs {len(pred)}")
    dist = trajectory_distances(gt)
    Pg = [p.matrix() for p in gt.poses]
    Pp = [p.matrix() for p in pred.poses]
    per_len = {L: [] for L in lengths}
    for first in range(0, len(gt), start_step):
        for L in lengths:
            last = int(np.searchsorted(dist, dist[first] + L, side="left"))
            if last >= len(gt):
                continue
            dg = np.linalg.solve(Pg[first], Pg[last])
            dp = np.linalg.solve(Pp[first], Pp[last])
            E = np.linalg.solve(dg, dp)
            per_len[L].append((np.linalg.norm(E[:3, 3]) / L, _rotation_angle(E[:3, :3]) / L))
    table = {}
    pooled = []
    for L, errs in per_len.items():
        if errs:
            a = np.array(errs)
            table[L] = (100.0 * a[:, 0].mean(), np.degrees(a[:, 1].mean()) * 100.0, len(errs))
            pooled.extend(errs)
    if not pooled:
        return float("nan"), float("nan"), table
    a = np.array(pooled)
    return 100.0 * float(a[:, 0].mean()), float(np.degrees(a[:, 1].mean()) * 100.0), table


# -- report -------------------------------------------------------------------

@dataclass
class MetricsReport:
    t_rel_percent: float
    r_rel_deg_per_100m: float
    ate_rmse_m: float
    per_length: dict = field(default_factory=dict)
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def summary(self):
        return (f"ATE RMSE {self.ate_rmse_m:.4f} m | T_rel {self.t_rel_percent:.4f} % | "
                f"R_rel {self.r_rel_deg_per_100m:.4f} deg/100m | scale {self.scale:.6f}")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["segment", "t_rel_percent", "r_rel_deg_per_100m", "count"])
        for L, (t, r, n) in sorted(self.per_length.items()):
            w.writerow([f"{L}m", f"{t:.9f}", f"{r:.9f}", n])
        w.writerow(["all", f"{self.t_rel_percent:.9f}", f"{self.r_rel_deg_per_100m:.9f}",
                    sum(n for _, _, n in self.per_length.values())])
        w.writerow([])
        w.writerow(["ate_rmse_m", f"{self.ate_rmse_m:.9f}"])
        w.writerow(["scale", f"{self.scale:.12f}"])
        w.writerow(["rotation"] + [f"{v:.12f}" for v in self.rotation.ravel()])
        w.writerow(["translation"] + [f"{v:.12f}" for v in self.translation])
        return buf.getvalue()


def evaluate(gt: Trajectory, pred: Trajectory, with_scale=True, lengths=DEFAULT_LENGTHS,
             start_step=DEFAULT_START_STEP) -> MetricsReport:
    aligned, (s, R, t) = align_trajectory(gt, pred, with_scale)
    res = gt.positions() - aligned.positions()
    rmse = float(np.sqrt((res ** 2).sum(axis=1).mean()))
    t_rel, r_rel, table = kitti_relative_errors(gt, aligned, lengths, start_step)
    return MetricsReport(t_rel, r_rel, rmse, table, s, R, t)
