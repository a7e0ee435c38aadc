"""Procedural textured indoor scene with exact depth, for tests and demos.

The scene is an axis-aligned room (camera convention: x right, y down, z
forward) holding a couple of boxes. Surfaces are shaded with a solid 3-D
value-noise texture so every view of the same point sees the same
intensity, which makes photometric residuals vanish at the true pose.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, RigidPose, pixel_grid

FLOOR, VERTICAL, FURNITURE, SMALL = 0, 1, 2, 3
CLASS_NAMES = ("floor", "vertical structure", "large structure/furniture", "small structure")

_M = np.uint64(0xFFFFFFFFFFFFFFFF)


def _hash3(ix, iy, iz, seed: int) -> np.ndarray:
    """Deterministic lattice hash to ``[0, 1)``."""
    with np.errstate(over="ignore"):
        h = (
            ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B185EBCA87)
            ^ iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
            ^ iz.astype(np.int64).astype(np.uint64) * np.uint64(0x165667B19E3779F9)
            ^ np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x27D4EB2F165667C5)
        )
        h ^= h >> np.uint64(31)
        h = (h * np.uint64(0xBF58476D1CE4E5B9)) & _M
        h ^= h >> np.uint64(29)
        h = (h * np.uint64(0x94D049BB133111EB)) & _M
        h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(P: np.ndarray, cell: float, seed: int) -> np.ndarray:
    """C2-smooth trilinear value noise in ``[0, 1]`` with lattice spacing ``cell``."""
    g = P / cell
    i0 = np.floor(g)
    f = g - i0
    s = f * f * f * (f * (f * 6 - 15) + 10)
    ix, iy, iz = (i0[..., k].astype(np.int64) for k in range(3))
    out = np.zeros(P.shape[:-1])
    for dx in (0, 1):
        wx = s[..., 0] if dx else 1 - s[..., 0]
        for dy in (0, 1):
            wy = s[..., 1] if dy else 1 - s[..., 1]
            for dz in (0, 1):
                wz = s[..., 2] if dz else 1 - s[..., 2]
                out += wx * wy * wz * _hash3(ix + dx, iy + dy, iz + dz, seed)
    return out


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    label: int


@dataclass
class Scene:
    room_lo: tuple[float, float, float] = (-3.0, -1.8, -1.0)
    room_hi: tuple[float, float, float] = (3.0, 1.2, 3.0)
    boxes: list[Box] = field(
        default_factory=lambda: [
            Box((-1.3, 0.2, 1.7), (-0.3, 1.2, 2.5), FURNITURE),
            Box((0.5, 0.75, 1.4), (0.9, 1.2, 1.8), SMALL),
        ]
    )
    octaves: tuple[tuple[float, float], ...] = ((0.04, 0.10), (0.08, 0.16), (0.16, 0.16), (0.32, 0.12), (0.64, 0.12))
    seed: int = 7
    # per-class albedo offsets; non-zero values put aliased steps at creases
    label_albedo: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def texture(self, P: np.ndarray, labels: np.ndarray) -> np.ndarray:
        val = np.full(P.shape[:-1], 0.5)
        for k, (cell, amp) in enumerate(self.octaves):
            val += amp * (value_noise(P, cell, self.seed + 101 * k) - 0.5)
        offsets = np.asarray(self.label_albedo)
        val += offsets[np.clip(labels, 0, 3)]
        return np.clip(val, 0.0, 1.0)

    def raycast(self, origin: np.ndarray, dirs: np.ndarray):
        """Distance along ``dirs`` (un-normalised) to the first surface and its label."""
        lo = np.asarray(self.room_lo)
        hi = np.asarray(self.room_hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            bound = np.where(dirs > 0, hi, lo)
            lam_axes = np.where(dirs != 0, (bound - origin) / dirs, np.inf)
        axis = np.argmin(lam_axes, axis=-1)
        lam = np.take_along_axis(lam_axes, axis[..., None], axis=-1)[..., 0]
        is_floor = (axis == 1) & (dirs[..., 1] > 0)
        labels = np.where(is_floor, FLOOR, VERTICAL)
        for box in self.boxes:
            blo = np.asarray(box.lo)
            bhi = np.asarray(box.hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (blo - origin) / dirs
                t2 = (bhi - origin) / dirs
            tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
            hit = (tmin <= tmax) & (tmin > 1e-9) & (tmin < lam)
            lam = np.where(hit, tmin, lam)
            labels = np.where(hit, box.label, labels)
        return lam, labels

    def render(self, K: CameraIntrinsics, world_to_cam: RigidPose):
        """Render ``(intensity, depth, labels)`` for a world-to-camera pose."""
        xs, ys = pixel_grid(K.width, K.height)
        rays_cam = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], axis=-1)
        R = world_to_cam.rotation
        origin = -R.T @ world_to_cam.translation
        dirs = rays_cam @ R  # R^T applied to each ray
        depth, labels = self.raycast(origin, dirs)
        P = origin + dirs * depth[..., None]
        return self.texture(P, labels), depth, labels.astype(np.int64)


def look_at(center, target, down=(0.0, 1.0, 0.0)) -> RigidPose:
    """World-to-camera pose of a camera at ``center`` looking at ``target``."""
    c = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - c
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidPose(R, -R @ c)


def default_intrinsics() -> CameraIntrinsics:
    """TUM-like 525 px focal at 640x480, expressed at 320x240."""
    return CameraIntrinsics(262.5, 262.5, 159.75, 119.75, 320, 240)


def loop_trajectory(n_frames: int, radius: float = 0.3, target=(0.0, 0.0, 3.0)) -> list[RigidPose]:
    """Closed circular loop in the image plane, always facing ``target``.

    With the default target the first pose is the identity.
    """
    poses = []
    for i in range(n_frames):
        a = 2 * np.pi * i / n_frames
        c = np.array([radius * (np.cos(a) - 1.0), radius * np.sin(a), 0.0])
        poses.append(look_at(c, target))
    return poses


def pan_trajectory(n_frames: int, total_deg: float = 45.0) -> list[RigidPose]:
    """Pure rotation about the camera's vertical axis, starting at identity."""
    poses = []
    for i in range(n_frames):
        ang = np.deg2rad(total_deg) * i / max(n_frames - 1, 1)
        c, s = np.cos(ang), np.sin(ang)
        R = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
        poses.append(RigidPose(R, np.zeros(3)))
    return poses


def write_tum_sequence(
    out_dir,
    poses: list[RigidPose],
    scene: Scene | None = None,
    K: CameraIntrinsics | None = None,
    fps: float = 30.0,
    t0: float = 1000.0,
    prediction_blur: float | None = None,
    prediction_bias: float = 1.0,
    prediction_noise: float = 0.0,
    with_labels: bool = True,
    seed: int = 0,
) -> Path:
    """Render a TUM-layout sequence (rgb, depth, groundtruth, associations).

    When ``prediction_blur`` is given, a ``predictions/`` directory with
    degraded ground-truth depth (``.f32``) and label maps is written too.
    Poses are world-to-camera; ``groundtruth.txt`` stores their inverses.
    """
    from PIL import Image

    from .dataset import write_depth_png, write_f32, write_label_png, write_trajectory
    from .prediction import synthesize_degraded

    scene = scene or Scene()
    K = K or default_intrinsics()
    out = Path(out_dir)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    if prediction_blur is not None:
        (out / "predictions").mkdir(exist_ok=True)
    assoc, gt = [], []
    for i, T in enumerate(poses):
        ts = t0 + i / fps
        name = f"{ts:.6f}"
        inten, depth, labels = scene.render(K, T)
        rgb = np.repeat(np.round(inten * 255).astype(np.uint8)[..., None], 3, axis=2)
        Image.fromarray(rgb).save(out / "rgb" / f"{name}.png")
        write_depth_png(depth, out / "depth" / f"{name}.png")
        assoc.append(f"{name} rgb/{name}.png {name} depth/{name}.png")
        gt.append((ts, T.inverse()))
        if prediction_blur is not None:
            pred = synthesize_degraded(depth, prediction_blur, prediction_bias, prediction_noise, seed + i)
            write_f32(pred, out / "predictions" / f"{name}.f32")
            if with_labels:
                write_label_png(labels, out / "predictions" / f"{name}_labels.png")
    (out / "associations.txt").write_text("\n".join(assoc) + "\n")
    write_trajectory(gt, out / "groundtruth.txt")
    (out / "depth.txt").write_text("".join(f"{a.split()[2]} {a.split()[3]}\n" for a in assoc))
    (out / "camera.txt").write_text(
        f"fx={K.fx!r}\nfy={K.fy!r}\ncx={K.cx!r}\ncy={K.cy!r}\nwidth={K.width}\nheight={K.height}\nf_train={K.fx!r}\n"
    )
    if prediction_blur is not None:
        lines = [f"f_train={K.fx!r}"]
        if with_labels:
            lines.append("classes=" + ",".join(CLASS_NAMES))
        (out / "predictions" / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out
