"""Deterministic synthetic stereo sequences with exact ground truth.

The scene is a rigid, infinitely extended height-field surface around a
base plane orthogonal to the initial optical axis, textured with smooth
multi-octave value noise. Images are rendered by intersecting each pixel
ray with the surface analytically (fixed-point solve, not pixel
differencing), so depth, flow, and poses are exact to solver tolerance
and re-rendering with the same seed is bit-identical.

Dataset layout written by render():
    left/%06d.ppm, right/%06d.ppm     16-bit binary PPM images
    depth_left/%06d.pfm, depth_right/%06d.pfm
    flow_fwd/%06d.pfm                 left flow frame k -> k+1 (n-1 files)
    flow_bwd/%06d.pfm                 left flow frame k+1 -> k (n-1 files)
    poses_abs.txt                     world-from-camera, one line per frame
    poses_rel.txt                     cur->prev relative poses (n-1 lines)
    rig.txt, scene.txt
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import dataio
from .geometry import (
    CameraRig,
    DEPTH_CAP_M,
    MIN_DEPTH_M,
    euler_to_rotmat,
    invert,
    make_rig,
    pixel_rays,
    se3_matrix,
)


class RenderError(RuntimeError):
    pass


# -- seeded lattice noise --------------------------------------------------

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_PX = np.uint64(0x9E3779B185EBCA87)
_PY = np.uint64(0xC2B2AE3D27D4EB4F)


def _mix64(h: np.ndarray) -> np.ndarray:
    h = (h ^ (h >> np.uint64(30))) * _MIX1
    h = (h ^ (h >> np.uint64(27))) * _MIX2
    return h ^ (h >> np.uint64(31))


def _lattice_values(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    h = (ix.astype(np.int64).astype(np.uint64) * _PX
         + iy.astype(np.int64).astype(np.uint64) * _PY
         + np.uint64(salt & 0xFFFFFFFFFFFFFFFF))
    return (_mix64(h) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _quintic(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def smooth_noise(x: np.ndarray, y: np.ndarray, salt: int) -> np.ndarray:
    """C2-continuous value noise in [0, 1) with unit lattice spacing."""
    ix, iy = np.floor(x), np.floor(y)
    wx = _quintic(x - ix)
    wy = _quintic(y - iy)
    v00 = _lattice_values(ix, iy, salt)
    v01 = _lattice_values(ix + 1, iy, salt)
    v10 = _lattice_values(ix, iy + 1, salt)
    v11 = _lattice_values(ix + 1, iy + 1, salt)
    top = v00 * (1.0 - wx) + v01 * wx
    bot = v10 * (1.0 - wx) + v11 * wx
    return top * (1.0 - wy) + bot * wy


_M64 = 0xFFFFFFFFFFFFFFFF


def _salt(seed: int, *tags: int) -> int:
    h = ((seed & _M64) * 0x9E3779B185EBCA87) & _M64
    for t in tags:
        h = (h + t * 0xC2B2AE3D27D4EB4F) & _M64
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _M64
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _M64
        h ^= h >> 31
    return h


# -- scene definition --------------------------------------------------------


@dataclass
class SceneSpec:
    """Everything needed to re-render a sequence deterministically."""

    seed: int = 0
    n_frames: int = 40
    width: int = 128
    height: int = 64
    fx: float = 90.0
    fy: float = 90.0
    cx: float = 63.5
    cy: float = 31.5
    baseline: float = 0.5
    base_depth: float = 16.0
    surface_amp: float = 1.6
    surface_wavelength: float = 9.0
    texture_octaves: tuple = ((5.0, 0.5), (2.5, 0.3), (1.3, 0.2))
    texture_lo: float = 0.08
    texture_hi: float = 0.92
    speed: float = 0.1
    yaw_amp: float = 0.08
    yaw_period: float = 70.0
    drift: float = 1.05  # travel direction relative to the view axis (rad)

    def rig(self) -> CameraRig:
        return make_rig(self.fx, self.fy, self.cx, self.cy,
                        self.width, self.height, self.baseline)


def surface_height(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Signed height of the surface around the base plane, in meters."""
    n = smooth_noise(x / spec.surface_wavelength, y / spec.surface_wavelength,
                     _salt(spec.seed, 101))
    return (n - 0.5) * 2.0 * spec.surface_amp


def texture_rgb(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Smooth procedural albedo at surface points, channels last, in [0, 1]."""
    out = np.empty((*x.shape, 3))
    total = sum(a for _, a in spec.texture_octaves)
    for c in range(3):
        acc = np.zeros_like(x)
        for o, (wavelength, amp) in enumerate(spec.texture_octaves):
            acc += amp * smooth_noise(x / wavelength, y / wavelength,
                                      _salt(spec.seed, 202, c, o))
        out[..., c] = spec.texture_lo + (spec.texture_hi - spec.texture_lo) * acc / total
    return out


def motion_poses(spec: SceneSpec) -> list[np.ndarray]:
    """World-from-camera pose per frame: steady travel plus a yaw profile.

    The camera keeps facing the surface (orientation follows the yaw
    profile) while traveling at `drift` radians off the view axis, so long
    sequences stay inside the depth range instead of running into the
    surface; drift 0 is a head-on approach.
    """
    poses = []
    pos = np.zeros(3)
    for k in range(spec.n_frames):
        yaw = spec.yaw_amp * np.sin(2.0 * np.pi * k / spec.yaw_period)
        poses.append(se3_matrix(euler_to_rotmat(0.0, yaw, 0.0), pos.copy()))
        heading = yaw + spec.drift
        pos = pos + spec.speed * np.array([np.sin(heading), 0.0, np.cos(heading)])
    return poses


def _solve_ray_depths(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray,
                      frame: int) -> np.ndarray:
    """Depth (z in camera units) where each ray meets the height field.

    `dirs` are world-frame directions with unit camera-z component, so the
    ray parameter equals camera depth. Fixed-point iteration, which
    contracts because surface slopes are gentle relative to ray z-slope.
    """
    rz = dirs[:, 2]
    if np.any(rz <= 1e-4):
        raise RenderError(f"frame {frame}: ray nearly parallel to the surface plane")
    lam = (spec.base_depth - origin[2]) / rz
    for _ in range(60):
        px = origin[0] + lam * dirs[:, 0]
        py = origin[1] + lam * dirs[:, 1]
        target = spec.base_depth + surface_height(spec, px, py)
        new_lam = (target - origin[2]) / rz
        delta = np.abs(new_lam - lam).max()
        lam = new_lam
        if delta < 1e-13:
            break
    if lam.min() < MIN_DEPTH_M or lam.max() > DEPTH_CAP_M:
        raise RenderError(
            f"frame {frame}: surface leaves the depth range "
            f"[{MIN_DEPTH_M}, {DEPTH_CAP_M}] (got [{lam.min():.3f}, {lam.max():.3f}])")
    return lam


def render_view(spec: SceneSpec, world_pose: np.ndarray, frame: int,
                rig: CameraRig | None = None):
    """Render one camera: returns (image HxWx3, depth HxW, world points HxWx3)."""
    rig = rig or spec.rig()
    rays = pixel_rays(rig).reshape(-1, 3)
    rot = world_pose[:3, :3]
    origin = world_pose[:3, 3]
    dirs = rays @ rot.T
    depth = _solve_ray_depths(spec, origin, dirs, frame)
    points = origin + depth[:, None] * dirs
    img = texture_rgb(spec, points[:, 0], points[:, 1])
    h, w = rig.height, rig.width
    return (img.reshape(h, w, 3), depth.reshape(h, w), points.reshape(h, w, 3))


def project_points(points: np.ndarray, world_pose: np.ndarray,
                   rig: CameraRig) -> np.ndarray:
    """Pixel coordinates of world points in the given camera, shape (..., 2)."""
    rel = invert(world_pose)
    cam = points @ rel[:3, :3].T + rel[:3, 3]
    z = cam[..., 2]
    if np.any(z <= 0):
        raise RenderError("point projects behind the camera")
    return np.stack([cam[..., 0] / z * rig.fx + rig.cx,
                     cam[..., 1] / z * rig.fy + rig.cy], axis=-1)


def render(spec: SceneSpec, out_dir: str) -> dict:
    """Render the full sequence with ground truth to `out_dir`."""
    rig = spec.rig()
    poses = motion_poses(spec)
    right_offset = rig.right_to_left  # right camera's pose in the left frame

    for sub in ("left", "right", "depth_left", "depth_right", "flow_fwd", "flow_bwd"):
        dataio.ensure_dir(os.path.join(out_dir, sub))

    grid = np.stack(np.meshgrid(np.arange(rig.width, dtype=np.float64),
                                np.arange(rig.height, dtype=np.float64)), axis=-1)
    points_prev = None
    for k, pose in enumerate(poses):
        img_l, depth_l, points_l = render_view(spec, pose, k, rig)
        img_r, depth_r, _ = render_view(spec, pose @ right_offset, k, rig)
        dataio.write_ppm(os.path.join(out_dir, "left", f"{k:06d}.ppm"), img_l)
        dataio.write_ppm(os.path.join(out_dir, "right", f"{k:06d}.ppm"), img_r)
        dataio.write_pfm(os.path.join(out_dir, "depth_left", f"{k:06d}.pfm"), depth_l)
        dataio.write_pfm(os.path.join(out_dir, "depth_right", f"{k:06d}.pfm"), depth_r)
        if k > 0:
            fwd = project_points(points_prev, pose, rig) - grid
            bwd = project_points(points_l, poses[k - 1], rig) - grid
            dataio.write_flow_pfm(os.path.join(out_dir, "flow_fwd", f"{k - 1:06d}.pfm"), fwd)
            dataio.write_flow_pfm(os.path.join(out_dir, "flow_bwd", f"{k - 1:06d}.pfm"), bwd)
        points_prev = points_l

    dataio.write_pose_file(os.path.join(out_dir, "poses_abs.txt"), poses)
    rels = [invert(poses[k]) @ poses[k + 1] for k in range(len(poses) - 1)]
    dataio.write_pose_file(os.path.join(out_dir, "poses_rel.txt"), rels)
    dataio.write_rig(os.path.join(out_dir, "rig.txt"), rig)
    with open(os.path.join(out_dir, "scene.txt"), "w") as f:
        for fld in fields(spec):
            f.write(f"{fld.name} = {getattr(spec, fld.name)}\n")
    return {"n_frames": spec.n_frames, "out_dir": out_dir}


# -- dataset access -----------------------------------------------------------


class SceneDataset:
    """Reader for the directory layout written by render()."""

    def __init__(self, root: str):
        self.root = root
        self.rig = dataio.read_rig(os.path.join(root, "rig.txt"))
        self.abs_poses, _ = dataio.read_pose_file(os.path.join(root, "poses_abs.txt"))
        self.rel_poses, _ = dataio.read_pose_file(os.path.join(root, "poses_rel.txt"))
        self.n_frames = len(self.abs_poses)
        self._cache: dict = {}

    def _load(self, key, loader):
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    def left(self, k: int) -> np.ndarray:
        return self._load(("l", k), lambda: dataio.read_ppm(
            os.path.join(self.root, "left", f"{k:06d}.ppm")))

    def right(self, k: int) -> np.ndarray:
        return self._load(("r", k), lambda: dataio.read_ppm(
            os.path.join(self.root, "right", f"{k:06d}.ppm")))

    def depth_left(self, k: int) -> np.ndarray:
        return self._load(("dl", k), lambda: dataio.read_pfm(
            os.path.join(self.root, "depth_left", f"{k:06d}.pfm")))

    def depth_right(self, k: int) -> np.ndarray:
        return self._load(("dr", k), lambda: dataio.read_pfm(
            os.path.join(self.root, "depth_right", f"{k:06d}.pfm")))

    def flow_fwd(self, k: int) -> np.ndarray:
        """Ground-truth left flow from frame k to k+1."""
        return self._load(("ff", k), lambda: dataio.read_flow_pfm(
            os.path.join(self.root, "flow_fwd", f"{k:06d}.pfm")))

    def flow_bwd(self, k: int) -> np.ndarray:
        """Ground-truth left flow from frame k+1 back to frame k."""
        return self._load(("fb", k), lambda: dataio.read_flow_pfm(
            os.path.join(self.root, "flow_bwd", f"{k:06d}.pfm")))
