"""Pinhole camera, SE(3) algebra and differentiable reprojection.

Conventions
-----------
* Pixel centres are at integer coordinates: pixel (u, v) has homogeneous
  coordinates (u, v, 1).
* A pose ``T_a_to_b`` maps 3-D points expressed in camera ``a`` into camera
  ``b``: ``X_b = R X_a + t``.
* Compact poses are 6-vectors ``(axis_angle[3], translation[3])``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, ops
from .tensor.core import default_dtype, no_grad

SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]], dtype=np.float64)

    def scaled(self, width, height):
        """Intrinsics for the image resized to ``width`` x ``height``."""
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass
class Pose6D:
    axis_angle: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.axis_angle = np.asarray(self.axis_angle, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.axis_angle).all() and np.isfinite(self.translation).all()):
            raise ValueError("pose must be finite")

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def vector(self):
        return np.concatenate([self.axis_angle, self.translation])


@dataclass
class PoseSE3:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def is_valid(self, tol=1e-6):
        R = self.rotation
        return (np.abs(R.T @ R - np.eye(3)).max() < tol
                and abs(np.linalg.det(R) - 1) < tol
                and np.isfinite(self.translation).all())

    def __matmul__(self, other):
        return se3_compose(self, other)

    def inverse(self):
        return se3_invert(self)


# -- tensor-level (differentiable) --------------------------------------------

def skew(w):
    """(N, 3) tensor -> (N, 3, 3) cross-product matrices."""
    x, y, z = w[:, 0], w[:, 1], w[:, 2]
    zero = x * 0.0
    return ops.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape(-1, 3, 3)


def axis_angle_to_matrix(w):
    """Rodrigues' formula for an (N, 3) tensor of rotation vectors.

    Uses sin(t)/t and the half-angle form of (1 - cos t)/t^2, which are
    well conditioned down to tiny angles; below ``SMALL_ANGLE`` the
    second-order series I + K + K^2/2 takes over.
    """
    sq = (w * w).sum(axis=1)
    small = sq.data < SMALL_ANGLE ** 2
    theta = ops.where(small, 1.0, sq).sqrt()
    a = ops.sin(theta) / theta
    half = theta * 0.5
    s = ops.sin(half) / half
    b = s * s * 0.5
    a = ops.where(small, 1.0, a).reshape(-1, 1, 1)
    b = ops.where(small, 0.5, b).reshape(-1, 1, 1)
    K = skew(w)
    eye = np.eye(3, dtype=w.dtype)
    return K * a + (K @ K) * b + eye


def pose_vec_to_rt(vec):
    """(N, 6) tensor -> rotation (N, 3, 3) and translation (N, 3) tensors."""
    return axis_angle_to_matrix(vec[:, :3]), vec[:, 3:]


def invert_rt(R, t):
    Rt = R.transpose(0, 2, 1)
    tt = -(Rt @ t.reshape(-1, 3, 1)).reshape(-1, 3)
    return Rt, tt


def _pixel_rays(K: Intrinsics, dtype):
    u, v = np.meshgrid(np.arange(K.width, dtype=np.float64), np.arange(K.height, dtype=np.float64))
    a = (u - K.cx) / K.fx
    b = (v - K.cy) / K.fy
    rays = np.stack([a.ravel(), b.ravel(), np.ones(a.size)]).astype(dtype)
    return u.astype(dtype), v.astype(dtype), rays


def _as_rt(pose, dtype):
    if isinstance(pose, Pose6D):
        pose = PoseSE3(*_numpy_rt(pose.vector()))
    if isinstance(pose, PoseSE3):
        return (Tensor(pose.rotation[None], dtype=dtype), Tensor(pose.translation[None], dtype=dtype))
    if isinstance(pose, Tensor):
        return pose_vec_to_rt(pose)
    R, t = pose
    return R, t


def reprojection_grid(depth, pose, K: Intrinsics, eps=1e-6):
    """Project every target pixel into the source camera.

    ``depth`` is an (N, 1, H, W) tensor of positive target depths, ``pose``
    is ``T_target_to_source`` given as a Pose6D/PoseSE3, an (N, 6) tensor
    or an ``(R, t)`` pair of tensors. Returns the (N, H, W, 2) source pixel
    coordinates, the (N, H, W) depth of each point in the source camera,
    and a boolean validity mask (in front of the camera and inside the
    source image).
    """
    if not isinstance(depth, Tensor):
        depth = Tensor(depth)
    N, C, H, W = depth.shape
    if C != 1 or (H, W) != (K.height, K.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics {K.width}x{K.height}")
    if not (depth.data > 0).all():
        raise ValueError("depth must be strictly positive")
    R, t = _as_rt(pose, depth.dtype)
    u, v, rays = _pixel_rays(K, depth.dtype)
    d = depth.reshape(N, 1, H * W)
    # X_s / d = R r + t / d keeps the identity pose bit-exact
    q = R @ rays + t.reshape(-1, 3, 1) / d
    qz = q[:, 2]
    front = qz.data > eps
    qz_safe = ops.where(front, qz, 1.0)
    du = (q[:, 0] / qz_safe - rays[0]) * K.fx
    dv = (q[:, 1] / qz_safe - rays[1]) * K.fy
    cu = du + u.reshape(1, -1)
    cv = dv + v.reshape(1, -1)
    coords = ops.stack([cu, cv], axis=-1).reshape(N, H, W, 2)
    proj_depth = (d.reshape(N, H * W) * qz).reshape(N, H, W)
    cd = coords.data
    inside = (cd[..., 0] >= 0) & (cd[..., 0] <= W - 1) & (cd[..., 1] >= 0) & (cd[..., 1] <= H - 1)
    valid = front.reshape(N, H, W) & inside
    return coords, proj_depth, valid


def synthesize_view(source, coords, validity):
    """Warp ``source`` (N, C, H, W) onto the target grid described by ``coords``."""
    if source.shape[0] != coords.shape[0]:
        raise ValueError("batch mismatch between source image and coords")
    img, inb = ops.bilinear_sample(source, coords)
    mask = np.asarray(validity, dtype=bool) & inb
    return img, mask


def project_depth_for_gc(depth_t, depth_s, pose, K: Intrinsics):
    """Target depth transported into the source frame and source depth sampled there."""
    coords, d_proj, valid = reprojection_grid(depth_t, pose, K)
    if not (depth_s.data > 0).all():
        raise ValueError("depth must be strictly positive")
    d_interp, inb = ops.bilinear_sample(depth_s, coords)
    return d_proj, d_interp[:, 0], valid & inb


# -- numpy-level SE(3) --------------------------------------------------------

def _numpy_rt(vec):
    with default_dtype(np.float64), no_grad():
        R, t = pose_vec_to_rt(Tensor(np.asarray(vec, dtype=np.float64).reshape(1, 6)))
    return R.data[0], t.data[0]


def pose6d_to_se3(p: Pose6D) -> PoseSE3:
    return PoseSE3(*_numpy_rt(p.vector()))


def rotation_log(R):
    """Rotation vector of a 3x3 rotation, stable near 0 and near pi."""
    R = np.asarray(R, dtype=np.float64)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = 0.5 * np.linalg.norm(vee)
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if theta < SMALL_ANGLE:
        return 0.5 * vee
    if np.pi - theta > 1e-4:
        return theta / (2 * sin_t) * vee
    # near pi: axis from the symmetric part, (R + R^T)/2 = cos(t) I + (1 - cos(t)) n n^T
    S = (0.5 * (R + R.T) - cos_t * np.eye(3)) / (1.0 - cos_t)
    k = int(np.argmax(np.diag(S)))
    n = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
    n /= np.linalg.norm(n)
    if n @ vee < 0:
        n = -n
    return theta * n


def se3_to_pose6d(T: PoseSE3) -> Pose6D:
    R = T.rotation
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
        raise ValueError("not a rotation matrix")
    return Pose6D(rotation_log(R), T.translation)


def se3_compose(A: PoseSE3, B: PoseSE3) -> PoseSE3:
    """A after B: x -> A(B(x))."""
    return PoseSE3(A.rotation @ B.rotation, A.rotation @ B.translation + A.translation)


def se3_invert(T: PoseSE3) -> PoseSE3:
    Rt = T.rotation.T
    return PoseSE3(Rt, -Rt @ T.translation)


def nearest_rotation(M):
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt
