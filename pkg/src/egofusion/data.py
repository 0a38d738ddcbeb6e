"""KITTI-layout ingestion, training snippets and a synthetic scene renderer.

On-disk layout (both read and written)::

    <root>/sequences/<seq>/image_2/000000.png     8-bit RGB
    <root>/sequences/<seq>/calib.txt              "P2: 12 floats" (P0..P3 written)
    <root>/sequences/<seq>/depth_2/000000.png     16-bit depth, 1/256 m per unit (synthetic only)
    <root>/poses/<seq>.txt                        camera-to-world 3x4 rows (synthetic only)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry
from .geometry import Intrinsics, Pose6D, PoseSE3
from .tensor.ops import resize_array

DEPTH_PNG_SCALE = 256.0


class DataError(Exception):
    """Missing or malformed dataset files."""


@dataclass
class Sequence:
    frames: list
    indices: list
    intrinsics: Intrinsics
    path: Path | None = None

    def __len__(self):
        return len(self.frames)


@dataclass(frozen=True)
class Snippet:
    target: int
    sources: tuple

    @property
    def frame_indices(self):
        return (self.sources[0], self.target, self.sources[1])


# -- KITTI layout -------------------------------------------------------------

def sequence_dir(root, seq=None):
    """``root/sequences/<seq>`` or ``root/<seq>``; with no id, ``root`` itself."""
    root = Path(root)
    if seq is None:
        if (root / "image_2").is_dir():
            return root
        raise DataError(f"{root} is not a sequence directory (no image_2/)")
    seq = str(seq)
    for cand in (root / "sequences" / seq, root / seq):
        if cand.is_dir():
            return cand
    raise DataError(f"sequence {seq!r} not found under {root}")


def parse_calib(path):
    """Intrinsics (without image size) from the P2 row of a calib file."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing calibration file {path}")
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.startswith("P2:"):
            continue
        toks = line.split()[1:]
        if len(toks) != 12:
            raise DataError(f"{path}:{lineno}: P2 needs 12 values, got {len(toks)}")
        try:
            P = np.array([float(t) for t in toks]).reshape(3, 4)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        return P
    raise DataError(f"{path}: no P2 row")


def load_image(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing image {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def resize_image(img, height, width):
    if img.shape[-2:] == (height, width):
        return img
    return np.ascontiguousarray(resize_array(img, height, width).astype(img.dtype))


def load_kitti_sequence(root, seq=None, size=None):
    """Frames of one sequence as (3, H, W) float32 arrays in [0, 1].

    ``size=(height, width)`` resizes every frame (bilinear, align-corners
    false) and scales the intrinsics by the same factors.
    """
    sdir = sequence_dir(root, seq)
    img_dir = sdir / "image_2"
    if not img_dir.is_dir():
        raise DataError(f"missing image directory {img_dir}")
    files = sorted(img_dir.glob("*.png"))
    if not files:
        raise DataError(f"no frames in {img_dir}")
    indices = []
    for f in files:
        try:
            indices.append(int(f.stem))
        except ValueError:
            raise DataError(f"unexpected frame name {f.name}") from None
    for expect, got in zip(range(indices[0], indices[0] + len(indices)), indices):
        if expect != got:
            raise DataError(f"missing frame {img_dir / f'{expect:06d}.png'}")
    P = parse_calib(sdir / "calib.txt")
    frames = [load_image(f) for f in files]
    H, W = frames[0].shape[1:]
    if any(f.shape[1:] != (H, W) for f in frames):
        raise DataError("frames differ in size")
    try:
        K = Intrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2], W, H)
    except ValueError as exc:
        raise DataError(f"{sdir / 'calib.txt'}: {exc} ({W}x{H} frames)") from None
    if size is not None:
        h, w = size
        frames = [resize_image(f, h, w) for f in frames]
        K = K.scaled(w, h)
    return Sequence(frames, indices, K, sdir)


def write_calib(path, K: Intrinsics):
    row = f"{K.fx:.12g} 0 {K.cx:.12g} 0 0 {K.fy:.12g} {K.cy:.12g} 0 0 0 1 0"
    Path(path).write_text("".join(f"P{i}: {row}\n" for i in range(4)))


def save_image(path, img):
    arr = np.clip(np.round(np.asarray(img).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_depth_png(path, depth):
    units = np.round(np.asarray(depth, dtype=np.float64) * DEPTH_PNG_SCALE)
    if units.max() > 65535:
        raise DataError("depth exceeds the 16-bit PNG range")
    Image.fromarray(units.astype(np.uint16)).save(path)


def load_depth_png(path):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / DEPTH_PNG_SCALE


# -- snippets -----------------------------------------------------------------

def build_snippets(frames):
    """One (t-1, t, t+1) snippet per interior frame."""
    n = len(frames)
    if n < 3:
        raise ValueError(f"need at least 3 frames, got {n}")
    return [Snippet(t, (t - 1, t + 1)) for t in range(1, n - 1)]


# -- synthetic scenes ---------------------------------------------------------

@dataclass
class Plane:
    """Fronto-parallel (world z = const) textured rectangle; ``None`` extents are unbounded."""
    z: float
    x_range: tuple | None = None
    y_range: tuple | None = None
    color: tuple = (0.5, 0.5, 0.5)
    wavelength: float = 3.0   # shortest texture wavelength, world units
    amplitude: float = 0.12


@dataclass
class SyntheticSceneSpec:
    width: int = 192
    height: int = 64
    num_frames: int = 10
    fx: float | None = None
    fy: float | None = None
    seed: int = 0
    # per-frame camera displacement in its own frame: P_{t+1} = P_t * M
    motion: list = field(default_factory=lambda: [Pose6D([0.0, 0.004, 0.0], [0.03, 0.0, 0.5])])
    planes: list | None = None
    saturation: tuple | None = None   # (x0, y0, x1, y1) pixel box forced to white
    min_depth: float = 0.1
    max_depth: float = 100.0

    def intrinsics(self):
        fx = self.fx if self.fx is not None else 0.58 * self.width
        fy = self.fy if self.fy is not None else 1.92 * self.height
        return Intrinsics(fx, fy, 0.5 * self.width, 0.5 * self.height, self.width, self.height)

    def scene(self):
        if self.planes is not None:
            return self.planes
        rng = np.random.default_rng(self.seed)
        planes = [Plane(40.0, color=tuple(rng.uniform(0.35, 0.65, 3)), wavelength=8.0, amplitude=0.15)]
        for _ in range(4):
            z = rng.uniform(10.0, 22.0)
            x0 = rng.uniform(-12.0, 8.0)
            y0 = rng.uniform(-4.0, 2.0)
            planes.append(Plane(z, (x0, x0 + rng.uniform(3.0, 6.0)), (y0, y0 + rng.uniform(2.0, 4.0)),
                                tuple(rng.uniform(0.3, 0.7, 3)), wavelength=rng.uniform(2.5, 4.0)))
        return planes

    def camera_motion(self, t):
        return self.motion[t % len(self.motion)]


def _texture_params(seed, plane_idx):
    rng = np.random.default_rng([seed, plane_idx])
    freqs = rng.normal(size=(3, 4, 2))
    freqs /= np.linalg.norm(freqs, axis=-1, keepdims=True)
    scales = rng.uniform(0.35, 1.0, size=(3, 4, 1))
    phases = rng.uniform(0, 2 * np.pi, size=(3, 4))
    weights = rng.uniform(0.5, 1.0, size=(3, 4))
    weights /= weights.sum(axis=1, keepdims=True)
    return freqs * scales, phases, weights


def plane_texture(plane: Plane, params, x, y):
    """Smooth band-limited RGB pattern at world points on the plane."""
    freqs, phases, weights = params
    k = 2 * np.pi / plane.wavelength
    out = np.empty((3,) + x.shape)
    for c in range(3):
        acc = np.zeros(x.shape)
        for j in range(freqs.shape[1]):
            acc += weights[c, j] * np.sin(k * (freqs[c, j, 0] * x + freqs[c, j, 1] * y) + phases[c, j])
        out[c] = plane.color[c] + plane.amplitude * acc
    return out


def camera_poses(spec: SyntheticSceneSpec):
    """Camera-to-world poses P_0 = I, P_{t+1} = P_t * M_t."""
    poses = [PoseSE3.identity()]
    for t in range(spec.num_frames - 1):
        M = geometry.pose6d_to_se3(spec.camera_motion(t))
        poses.append(geometry.se3_compose(poses[-1], M))
    return poses


def render_view(spec: SyntheticSceneSpec, pose: PoseSE3):
    """Ray-cast one camera; returns (image (3, H, W), depth (H, W))."""
    K = spec.intrinsics()
    planes = spec.scene()
    u, v = np.meshgrid(np.arange(K.width, dtype=np.float64), np.arange(K.height, dtype=np.float64))
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)])
    dirs = np.einsum("ij,jhw->ihw", pose.rotation, rays)
    o = pose.translation
    depth = np.full(u.shape, np.inf)
    image = np.zeros((3,) + u.shape)
    for idx, pl in enumerate(planes):
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (pl.z - o[2]) / dirs[2]
        hit = np.isfinite(s) & (s > 0)
        x = o[0] + s * dirs[0]
        y = o[1] + s * dirs[1]
        if pl.x_range is not None:
            hit &= (x >= pl.x_range[0]) & (x <= pl.x_range[1])
        if pl.y_range is not None:
            hit &= (y >= pl.y_range[0]) & (y <= pl.y_range[1])
        closer = hit & (s < depth)
        if not closer.any():
            continue
        tex = plane_texture(pl, _texture_params(spec.seed, idx), x[closer], y[closer])
        image[:, closer] = tex
        depth[closer] = s[closer]  # rays have unit z, so the ray parameter is the camera depth
    return image, depth


@dataclass
class SyntheticSequence:
    frames: list
    depths: list
    poses: list           # camera-to-world
    relative: list        # T_{t -> t+1}
    intrinsics: Intrinsics
    spec: SyntheticSceneSpec

    def sequence(self):
        return Sequence(self.frames, list(range(len(self.frames))), self.intrinsics)


def generate_synthetic(spec: SyntheticSceneSpec) -> SyntheticSequence:
    """Render every frame with exact depth and exact relative poses."""
    poses = camera_poses(spec)
    frames, depths = [], []
    for t, P in enumerate(poses):
        img, dep = render_view(spec, P)
        if not np.isfinite(dep).all():
            raise DataError(f"frame {t}: scene does not cover the view (frustum violation)")
        if dep.min() < spec.min_depth or dep.max() > spec.max_depth:
            raise DataError(f"frame {t}: depth range [{dep.min():.3g}, {dep.max():.3g}] "
                            f"outside [{spec.min_depth}, {spec.max_depth}]")
        if spec.saturation is not None:
            x0, y0, x1, y1 = spec.saturation
            img[:, y0:y1, x0:x1] = 1.0
        frames.append(np.clip(img, 0.0, 1.0).astype(np.float32))
        depths.append(dep)
    relative = [geometry.se3_compose(geometry.se3_invert(poses[t + 1]), poses[t])
                for t in range(len(poses) - 1)]
    return SyntheticSequence(frames, depths, poses, relative, spec.intrinsics(), spec)


def write_synthetic(seq: SyntheticSequence, out_dir, name="00"):
    """Serialize to the KITTI layout with GT depth PNGs and a pose file."""
    from .evaluation import Trajectory, write_kitti_poses

    out_dir = Path(out_dir)
    sdir = out_dir / "sequences" / name
    (sdir / "image_2").mkdir(parents=True, exist_ok=True)
    (sdir / "depth_2").mkdir(parents=True, exist_ok=True)
    (out_dir / "poses").mkdir(parents=True, exist_ok=True)
    for i, (img, dep) in enumerate(zip(seq.frames, seq.depths)):
        save_image(sdir / "image_2" / f"{i:06d}.png", img)
        save_depth_png(sdir / "depth_2" / f"{i:06d}.png", dep)
    write_calib(sdir / "calib.txt", seq.intrinsics)
    (sdir / "times.txt").write_text("".join(f"{0.1 * i:.6e}\n" for i in range(len(seq.frames))))
    write_kitti_poses(Trajectory(seq.poses, list(range(len(seq.poses)))), out_dir / "poses" / f"{name}.txt")
    return sdir
