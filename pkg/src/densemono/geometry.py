"""Rigid poses, pinhole intrinsics and the projection/warping primitives.

Poses map points from a source frame into a target frame: ``p' = R p + t``.
Following the tracking convention ``T_t = T_rel @ T_kf``, a camera's world
pose is the world-to-camera transform; trajectory files store the inverse
(camera-to-world) as TUM tooling expects.

Twists are ordered ``(v, w)``: translational part first, rotation vector
second. Optimisation updates are left-multiplicative, ``T <- exp(xi) @ T``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import NonPositiveDepth


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


@dataclass(frozen=True, eq=False)
class RigidPose:
    """SE(3) transform stored as a rotation matrix and a translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation).reshape(3, 3)
        t = _frozen(self.translation).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose contains non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidPose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> RigidPose:
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quaternion(cls, translation, quaternion_xyzw) -> RigidPose:
        q = np.asarray(quaternion_xyzw, dtype=np.float64)
        return cls(Rotation.from_quat(q / np.linalg.norm(q)).as_matrix(), translation)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> RigidPose:
        Rt = self.rotation.T
        return RigidPose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: RigidPose) -> RigidPose:
        if not isinstance(other, RigidPose):
            return NotImplemented
        R = self.rotation @ other.rotation
        # re-orthonormalise so long chains stay on SO(3)
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return RigidPose(R, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an ``(..., 3)`` array of points."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def translation_norm(self) -> float:
        return float(np.linalg.norm(self.translation))

    def allclose(self, other: RigidPose, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self):
        return f"RigidPose(t={np.round(self.translation, 6).tolist()}, angle={self.rotation_angle():.6f})"


def compose(a: RigidPose, b: RigidPose) -> RigidPose:
    """``a @ b``: apply ``b`` first, then ``a``."""
    return a @ b


def invert(T: RigidPose) -> RigidPose:
    return T.inverse()


def relative_pose(source: RigidPose, target: RigidPose) -> RigidPose:
    """Transform taking points in ``source`` camera coordinates to ``target``.

    Both arguments are world-to-camera poses, so this is ``target @ source^-1``.
    """
    return target @ source.inverse()


def pose_distance(a: RigidPose, b: RigidPose, meters_per_radian: float = 1.0) -> float:
    """Translation norm plus weighted rotation angle of the relative pose."""
    rel = relative_pose(a, b)
    # camera-centre displacement, independent of which frame expresses it
    ca = -a.rotation.T @ a.translation
    cb = -b.rotation.T @ b.translation
    return float(np.linalg.norm(ca - cb) + meters_per_radian * rel.rotation_angle())


# --- Lie algebra ----------------------------------------------------------


def so3_exp(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=np.float64)).as_matrix()


def so3_log(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    t2 = theta * theta
    return np.eye(3) + (1 - np.cos(theta)) / t2 * W + (theta - np.sin(theta)) / (t2 * theta) * W @ W


def _left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    half = 0.5 * theta
    coef = (1.0 - half / np.tan(half)) / (theta * theta)
    return np.eye(3) - 0.5 * W + coef * W @ W


def se3_exp(xi) -> RigidPose:
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    v, w = xi[:3], xi[3:]
    return RigidPose(so3_exp(w), _left_jacobian(w) @ v)


def se3_log(T: RigidPose) -> np.ndarray:
    w = so3_log(T.rotation)
    v = _left_jacobian_inv(w) @ T.translation
    return np.concatenate([v, w])


def adjoint(T: RigidPose) -> np.ndarray:
    """6x6 adjoint for ``(v, w)`` twists: ``T exp(xi) T^-1 = exp(Ad_T xi)``."""
    R, t = T.rotation, T.translation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = skew(t) @ R
    A[3:, 3:] = R
    return A


# --- camera -----------------------------------------------------------------


class PixelCoord(NamedTuple):
    x: float
    y: float

    def homogeneous(self) -> np.ndarray:
        return np.array([self.x, self.y, 1.0])


@dataclass(frozen=True)
class CameraIntrinsics:
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
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def resized(self, width: int, height: int) -> CameraIntrinsics:
        """Intrinsics for the same camera resampled to ``width x height``.

        Uses the pixel-centre convention, so pixel ``(0, 0)`` covers
        ``[-0.5, 0.5]^2`` at every resolution.
        """
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            int(width),
            int(height),
        )

    def downsampled(self) -> CameraIntrinsics:
        return self.resized(self.width // 2, self.height // 2)

    def contains(self, x, y):
        return (x >= 0) & (x < self.width) & (y >= 0) & (y < self.height)


def project(p, K: CameraIntrinsics) -> PixelCoord:
    """Perspective projection of a camera-frame point."""
    p = np.asarray(p, dtype=np.float64)
    if p[2] <= 0:
        raise NonPositiveDepth(f"point has z = {p[2]}")
    return PixelCoord(K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy)


def vertex(u, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Back-project pixel ``u`` at ``depth`` metres: ``K^-1 [x, y, 1]^T * depth``."""
    if not depth > 0:
        raise NonPositiveDepth(f"depth = {depth}")
    x, y = u
    return np.array([(x - K.cx) / K.fx * depth, (y - K.cy) / K.fy * depth, depth])


def warp(u, depth: float, T: RigidPose, K: CameraIntrinsics) -> tuple[PixelCoord, bool]:
    """Warp a pixel with known depth through ``T``.

    Returns the warped coordinate and a validity flag; the flag is False when
    the point lands behind the camera or outside the image. Callers skip such
    pixels instead of treating them as failures.
    """
    p = T.apply(vertex(u, depth, K))
    if p[2] <= 0:
        return PixelCoord(float("nan"), float("nan")), False
    w = project(p, K)
    return w, bool(K.contains(w.x, w.y))


# --- vectorised variants ----------------------------------------------------


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def backproject(xs, ys, depth, K: CameraIntrinsics) -> np.ndarray:
    xs, ys, depth = np.broadcast_arrays(np.asarray(xs, float), np.asarray(ys, float), np.asarray(depth, float))
    return np.stack([(xs - K.cx) / K.fx * depth, (ys - K.cy) / K.fy * depth, depth], axis=-1)


def project_points(P: np.ndarray, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project ``(..., 3)`` points; returns ``(x, y, in_front)``.

    Coordinates for points with ``z <= 0`` are NaN.
    """
    z = P[..., 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(in_front, z, np.nan)
        x = K.fx * P[..., 0] / safe + K.cx
        y = K.fy * P[..., 1] / safe + K.cy
    return x, y, in_front


def vertex_map(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    xs, ys = pixel_grid(depth.shape[1], depth.shape[0])
    return backproject(xs, ys, depth, K)


def warp_depth_map(depth: np.ndarray, T: RigidPose, K: CameraIntrinsics):
    """Warp every pixel of a dense depth map through ``T``.

    Returns ``(x, y, z, valid)`` arrays shaped like ``depth``; ``z`` is the
    depth of the transformed point in the target camera.
    """
    P = T.apply(vertex_map(depth, K))
    x, y, in_front = project_points(P, K)
    valid = in_front & (depth > 0) & (x >= 0) & (x <= K.width - 1) & (y >= 0) & (y <= K.height - 1)
    return x, y, P[..., 2], valid
