"""Direct photometric tracking of a frame against a key-frame.

The pose of frame ``t`` relative to key-frame ``k`` is found by minimising

    E(T) = sum_u huber( r(u, T) / sigma(r(u, T)) )

over high-gradient key-frame pixels, where ``r`` is the intensity difference
between the key-frame pixel and its warp into frame ``t``, and ``sigma``
combines photometric noise with the depth uncertainty propagated through
the warp. Minimisation is iteratively-reweighted Gauss-Newton on SE(3),
coarse to fine.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import GradientMap, compute_gradient, downsample, sample_bilinear_array, sample_bilinear_with_gradient
from .errors import TrackingLost
from .geometry import CameraIntrinsics, RigidPose, se3_exp, warp
from .keyframes import KeyFrame

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackingConfig:
    gradient_threshold: float = 0.02
    sigma_photometric: float = 0.03
    huber_delta: float = 3.0
    pyramid_levels: int = 3
    max_iterations: int = 20
    convergence_eps: float = 1e-6
    min_valid_ratio: float = 0.2
    max_step_halvings: int = 10
    # relative depth span within depth_edge_radius (full-resolution pixels,
    # halved per level) above which a pixel is
    # treated as occlusion-prone and left out of the energy; 0 disables
    depth_edge_threshold: float = 0.05
    depth_edge_radius: int = 4
    # coarsest-level mean energy per valid pixel that triggers rotated restarts
    restart_energy: float = 0.1
    restart_rotation_deg: float = 2.0


@dataclass
class TrackingResult:
    relative_pose: RigidPose
    world_pose: RigidPose
    final_energy: float
    valid_pixel_ratio: float
    converged: bool
    iterations_per_level: list[int] = field(default_factory=list)


def select_high_gradient_pixels(grad: GradientMap | np.ndarray, threshold: float, border: int = 2) -> np.ndarray:
    """Pixels whose gradient magnitude exceeds ``threshold``, as an ``(N, 2)`` array of ``(x, y)``.

    A ``border``-pixel frame around the image is always excluded.
    """
    mag = grad.magnitude if isinstance(grad, GradientMap) else np.asarray(grad)
    mask = mag > threshold
    if border > 0:
        mask[:border, :] = False
        mask[-border:, :] = False
        mask[:, :border] = False
        mask[:, -border:] = False
    ys, xs = np.nonzero(mask)
    return np.stack([xs, ys], axis=1)


def huber_energy(x: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(x)
    return np.where(a <= delta, 0.5 * x * x, delta * (a - 0.5 * delta))


def huber_weight(x: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(x)
    with np.errstate(divide="ignore"):
        return np.where(a <= delta, 1.0, delta / a)


def residual_uncertainty(drdD, depth_variance, sigma_photometric: float = 0.03):
    """``sqrt(2 sigma_I^2 + (dr/dD)^2 U)``: both images' noise plus depth variance."""
    drdD = np.asarray(drdD, dtype=np.float64)
    return np.sqrt(2.0 * sigma_photometric**2 + drdD * drdD * np.asarray(depth_variance, dtype=np.float64))


@dataclass
class ResidualSet:
    """Per-pixel quantities at one pose; arrays are over the selected pixels."""

    valid: np.ndarray
    residual: np.ndarray
    sigma: np.ndarray
    jacobian: np.ndarray  # (N, 6), d r / d xi for left increments
    drdD: np.ndarray

    def energy(self, delta: float) -> float:
        x = self.residual[self.valid] / self.sigma[self.valid]
        return float(np.sum(huber_energy(x, delta)))


class PhotometricProblem:
    """Residuals of one key-frame/frame pair at one pyramid level."""

    def __init__(self, ref_intensity, ref_depth, ref_uncertainty, target_intensity, K: CameraIntrinsics,
                 pixels: np.ndarray, sigma_photometric: float = 0.03):
        self.K = K
        self.target = np.asarray(target_intensity, dtype=np.float64)
        self.pixels = pixels
        xs = pixels[:, 0].astype(np.float64)
        ys = pixels[:, 1].astype(np.float64)
        self.ref_values = ref_intensity[pixels[:, 1], pixels[:, 0]]
        self.depth = ref_depth[pixels[:, 1], pixels[:, 0]]
        self.variance = ref_uncertainty[pixels[:, 1], pixels[:, 0]]
        self.rays = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], axis=1)
        self.points = self.rays * self.depth[:, None]
        self.sigma_photometric = sigma_photometric

    def __len__(self):
        return len(self.pixels)

    def _project(self, P):
        K = self.K
        z = P[:, 2]
        ok = z > 1e-9
        zs = np.where(ok, z, 1.0)
        x = K.fx * P[:, 0] / zs + K.cx
        y = K.fy * P[:, 1] / zs + K.cy
        ok &= (x >= 0) & (x <= K.width - 1) & (y >= 0) & (y <= K.height - 1)
        return x, y, ok

    def evaluate(self, T: RigidPose, with_jacobian: bool = True) -> ResidualSet:
        K = self.K
        R, t = T.rotation, T.translation
        P = self.points @ R.T + t
        x, y, valid = self._project(P)
        xc = np.where(valid, x, 0.0)
        yc = np.where(valid, y, 0.0)
        val, gx, gy = sample_bilinear_with_gradient(self.target, xc, yc)
        r = self.ref_values - val

        # warp derivative along depth by central differences
        h = 1e-4 * self.depth
        dP = (self.rays @ R.T) * h[:, None]
        xp, yp, okp = self._project(P + dP)
        xm, ym, okm = self._project(P - dP)
        both = okp & okm
        dwx = np.where(both, (xp - xm) / (2 * h), 0.0)
        dwy = np.where(both, (yp - ym) / (2 * h), 0.0)
        drdD = -(gx * dwx + gy * dwy)
        sigma = residual_uncertainty(drdD, self.variance, self.sigma_photometric)

        J = None
        if with_jacobian:
            z = np.where(valid, P[:, 2], 1.0)
            gPx = gx * K.fx / z
            gPy = gy * K.fy / z
            gPz = -(gx * K.fx * P[:, 0] + gy * K.fy * P[:, 1]) / (z * z)
            gP = np.stack([gPx, gPy, gPz], axis=1)
            J = -np.concatenate([gP, np.cross(P, gP)], axis=1)
            J[~valid] = 0.0
        r = np.where(valid, r, 0.0)
        return ResidualSet(valid, r, sigma, J, drdD)


def photometric_residual(u, T: RigidPose, kf: KeyFrame, target: np.ndarray) -> tuple[float, bool]:
    """Residual of one key-frame pixel; the flag is False when the warp is invalid."""
    x, y = int(round(u[0])), int(round(u[1]))
    d = kf.depth[y, x]
    w, ok = warp((x, y), d, T, kf.K)
    h, wd = target.shape
    if not ok or not (0 <= w.x <= wd - 1 and 0 <= w.y <= h - 1):
        return float("nan"), False
    val = sample_bilinear_array(target, np.array([w.x]), np.array([w.y]))[0]
    return float(kf.intensity[y, x] - val), True


def depth_edge_mask(depth: np.ndarray, threshold: float, radius: int = 2) -> np.ndarray:
    """True where the depth span in a ``(2r+1)^2`` window exceeds ``threshold * depth``."""
    size = 2 * radius + 1
    hi = ndimage.maximum_filter(depth, size=size, mode="nearest")
    lo = ndimage.minimum_filter(depth, size=size, mode="nearest")
    return (hi - lo) > threshold * depth


def _pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        pyr.append(downsample(pyr[-1]))
    return pyr


def _intrinsics_pyramid(K: CameraIntrinsics, levels: int) -> list[CameraIntrinsics]:
    out = [K]
    for _ in range(levels - 1):
        out.append(out[-1].downsampled())
    return out


def build_problems(kf: KeyFrame, target: np.ndarray, config: TrackingConfig, state=None) -> list[PhotometricProblem]:
    """One problem per pyramid level, finest first."""
    st = state or kf.state
    L = config.pyramid_levels
    ref = kf.intensity_pyramid(L)
    dep = _pyramid(st.depth, L)
    unc = _pyramid(st.uncertainty, L)
    tgt = _pyramid(target, L)
    Ks = _intrinsics_pyramid(kf.K, L)
    problems = []
    for lvl in range(L):
        pix = select_high_gradient_pixels(compute_gradient(ref[lvl]), config.gradient_threshold)
        if config.depth_edge_threshold > 0 and len(pix):
            radius = max(1, round(config.depth_edge_radius / 2**lvl))
            edges = depth_edge_mask(dep[lvl], config.depth_edge_threshold, radius)
            pix = pix[~edges[pix[:, 1], pix[:, 0]]]
        problems.append(PhotometricProblem(ref[lvl], dep[lvl], unc[lvl], tgt[lvl], Ks[lvl], pix, config.sigma_photometric))
    return problems


def _optimize_level(prob: PhotometricProblem, T: RigidPose, config: TrackingConfig, lvl: int):
    """IRLS Gauss-Newton on one level; returns ``(T, residuals, energy, iterations, converged)``."""
    delta = config.huber_delta
    res = prob.evaluate(T)
    E = res.energy(delta)
    its = 0
    converged = False
    for its in range(1, config.max_iterations + 1):
        v = res.valid
        if not v.any():
            raise TrackingLost(f"no valid pixels at level {lvl}")
        x = res.residual[v] / res.sigma[v]
        w = huber_weight(x, delta) / res.sigma[v] ** 2
        J = res.jacobian[v]
        H = J.T @ (J * w[:, None])
        b = J.T @ (w * res.residual[v])
        scale = np.max(np.abs(np.diag(H)))
        if not np.isfinite(scale) or scale < 1e-12:
            raise TrackingLost("photometric system carries no information")
        H = H + 1e-9 * scale * np.eye(6)
        try:
            step = -np.linalg.solve(H, b)
        except np.linalg.LinAlgError:
            raise TrackingLost("singular photometric system") from None
        accepted = False
        for _ in range(config.max_step_halvings):
            T_new = se3_exp(step) @ T
            res_new = prob.evaluate(T_new)
            E_new = res_new.energy(delta)
            if np.isfinite(E_new) and E_new <= E and res_new.valid.mean() >= config.min_valid_ratio:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            converged = True
            break
        T, res, E = T_new, res_new, E_new
        if np.linalg.norm(step) < config.convergence_eps:
            converged = True
            break
    return T, res, E, its, converged


def _mean_energy(res: ResidualSet, E: float) -> float:
    n = int(res.valid.sum())
    return E / n if n else np.inf


def _restart_seeds(T: RigidPose, angle: float) -> list[RigidPose]:
    """``T`` rotated by +-``angle`` about each camera axis."""
    seeds = []
    for k in range(3, 6):
        for sign in (-1.0, 1.0):
            xi = np.zeros(6)
            xi[k] = sign * angle
            seeds.append(se3_exp(xi) @ T)
    return seeds


def estimate_pose(kf: KeyFrame, target: np.ndarray, T_init: RigidPose | None = None,
                  config: TrackingConfig = TrackingConfig(), keyframe_pose: RigidPose | None = None) -> TrackingResult:
    """Estimate the key-frame-to-frame transform by coarse-to-fine Gauss-Newton.

    When the coarsest level settles at a mean energy above
    ``config.restart_energy`` the level is re-solved from rotated seeds and
    the lowest-energy result is kept, which widens the basin for large
    inter-frame rotations.

    Raises:
        TrackingLost: no usable pixels, no photometric information, diverging
            energy, or fewer than ``min_valid_ratio`` of the pixels valid at
            the final pose.
    """
    T = T_init if T_init is not None else RigidPose.identity()
    problems = build_problems(kf, target, config)
    if len(problems[0]) == 0:
        raise TrackingLost("key-frame has no high-gradient pixels")
    delta = config.huber_delta
    iterations = []
    converged = False
    coarsest = True
    for lvl in reversed(range(len(problems))):
        prob = problems[lvl]
        if len(prob) < 6:
            iterations.append(0)
            continue
        T_start = T
        T, res, E, its, converged = _optimize_level(prob, T_start, config, lvl)
        if coarsest and config.restart_energy > 0 and _mean_energy(res, E) > config.restart_energy:
            best = _mean_energy(res, E)
            for seed in _restart_seeds(T_start, np.deg2rad(config.restart_rotation_deg)):
                try:
                    cand = _optimize_level(prob, seed, config, lvl)
                except TrackingLost:
                    continue
                m = _mean_energy(cand[1], cand[2])
                if m < best:
                    best = m
                    T, res, E, its_c, converged = cand
                    its += its_c
                if best <= config.restart_energy:
                    break
            logger.debug("coarse restart: mean energy %.4f", best)
        coarsest = False
        iterations.append(its)
        if not np.isfinite(E):
            raise TrackingLost(f"energy diverged at level {lvl}")
    iterations.reverse()
    final = problems[0].evaluate(T, with_jacobian=False)
    ratio = float(final.valid.mean())
    energy = final.energy(delta)
    if not np.isfinite(energy):
        raise TrackingLost("energy diverged")
    if ratio < config.min_valid_ratio:
        raise TrackingLost(f"valid pixel ratio {ratio:.3f} below {config.min_valid_ratio}")
    kf_pose = keyframe_pose if keyframe_pose is not None else kf.pose
    return TrackingResult(T, T @ kf_pose, energy, ratio, converged, iterations)
