"""Small-baseline stereo refinement of the active key-frame.

Every key-frame pixel ``u`` with prior depth ``D`` and variance ``U`` is
searched for in frame ``t`` along its epipolar segment, the projection of
the back-projected ray over ``D +- 2 sqrt(U)``. A 5-sample key-frame
intensity profile, taken along the epipolar direction, is slid along the
segment at 1 px steps; the best SSD position is refined by a parabola and
triangulated. The observation variance follows the usual small-baseline
model: geometric sensitivity squared times photometric noise over the
squared gradient along the epipolar line.

The per-frame observation maps are fused into the key-frame with the same
inverse-variance rule used when a key-frame is created.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import sample_bilinear_array
from .errors import AmbiguousMatch, DegenerateBaseline
from .geometry import CameraIntrinsics, PixelCoord, RigidPose
from .keyframes import KeyFrame, fuse_depth

# per-pixel status codes of a dense refinement pass
VALID = 0
DEGENERATE = 1
AMBIGUOUS = 2
OUT_OF_BOUNDS = 3
INVALID_DEPTH = 4

PROFILE_OFFSETS = np.arange(-2, 3, dtype=np.float64)


@dataclass(frozen=True)
class StereoConfig:
    sigma_photometric: float = 0.03
    min_depth: float = 0.1
    max_depth: float = 10.0
    range_sigmas: float = 2.0
    ambiguity_ratio: float = 0.9
    gradient_floor: float = 1e-4
    # baselines below this fraction of the mean key-frame depth count as pure rotation
    min_baseline_ratio: float = 1e-3
    # keeps the 5-sample target profile inside the image
    border_margin: float = 2.0
    chunk_size: int = 4096


class EpipolarSearch(NamedTuple):
    """Search segment in frame ``t`` for key-frame pixel ``pixel``.

    ``a`` and ``b`` parameterise the homogeneous projection of the ray,
    ``K (R K^-1 u d + t) = a d + b``; ``start`` projects the smaller depth.
    """

    pixel: PixelCoord
    start: np.ndarray
    end: np.ndarray
    depth_range: tuple[float, float]
    a: np.ndarray
    b: np.ndarray
    kf_direction: np.ndarray

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def direction(self) -> np.ndarray:
        return (self.end - self.start) / self.length


class EpipolarMatch(NamedTuple):
    depth: float
    match_error: float
    position: np.ndarray


@dataclass
class ObservationMaps:
    """Per-frame stereo depth and variance on the key-frame grid.

    Invalid pixels hold NaN depth and infinite variance; ``status`` tells why.
    """

    depth: np.ndarray
    uncertainty: np.ndarray
    status: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.status == VALID


# --- geometry of the search -------------------------------------------------------


def _projection_coefficients(xs, ys, T: RigidPose, K: CameraIntrinsics):
    """Per-pixel ``a`` (N, 3) and shared ``b`` (3,) with ``K (R ray d + t) = a d + b``."""
    rays = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(xs)], axis=-1)
    a = rays @ (K.K @ T.rotation).T
    b = K.K @ T.translation
    return a, b


def _depth_interval(depth, variance, cfg: StereoConfig):
    half = cfg.range_sigmas * np.sqrt(variance)
    lo = np.clip(depth - half, cfg.min_depth, cfg.max_depth)
    hi = np.clip(depth + half, cfg.min_depth, cfg.max_depth)
    return lo, hi


def _clip_to_front(a, b, lo, hi, z_min=1e-6):
    """Shrink ``[lo, hi]`` so the projected point stays in front of the camera."""
    az = a[:, 2]
    bz = b[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = (z_min - bz) / az
    lo = np.where(az > 0, np.maximum(lo, bound), lo)
    hi = np.where(az < 0, np.minimum(hi, bound), hi)
    # az == 0: depth-independent z, usable only when it is positive
    dead = (az == 0) & (bz <= z_min)
    hi = np.where(dead, -np.inf, hi)
    return lo, hi


def _project_affine(a, b, d):
    q = a * d[:, None] + b
    return q[:, :2] / q[:, 2:3]


def _liang_barsky(p0, p1, lo_xy, hi_xy):
    """Clip segments ``p0 -> p1`` to a box; returns parameters ``(s0, s1)``, empty when ``s0 > s1``."""
    s0 = np.zeros(len(p0))
    s1 = np.ones(len(p0))
    d = p1 - p0
    for k in range(2):
        for p, q in ((-d[:, k], p0[:, k] - lo_xy[k]), (d[:, k], hi_xy[k] - p0[:, k])):
            with np.errstate(divide="ignore", invalid="ignore"):
                r = q / p
            parallel = p == 0
            s0 = np.where(~parallel & (p < 0), np.maximum(s0, r), s0)
            s1 = np.where(~parallel & (p > 0), np.minimum(s1, r), s1)
            s1 = np.where(parallel & (q < 0), -1.0, s1)
    return s0, s1


def _kf_directions(xs, ys, depth, T: RigidPose, K: CameraIntrinsics, seg_dir):
    """Unit epipolar direction in the key-frame, oriented like ``seg_dir`` in frame ``t``.

    The line runs through the pixel and the epipole (the projection of frame
    ``t``'s centre). Orientation is fixed by warping a one-pixel step at the
    prior depth.
    """
    centre = -T.rotation.T @ T.translation
    e = K.K @ centre
    if abs(e[2]) > 1e-12:
        ex, ey = e[0] / e[2], e[1] / e[2]
        dirs = np.stack([xs - ex, ys - ey], axis=-1)
    else:
        dirs = np.broadcast_to(e[:2], (len(xs), 2)).copy()
    norm = np.linalg.norm(dirs, axis=-1)
    ok = norm > 1e-9
    dirs = dirs / np.where(ok, norm, 1.0)[:, None]

    def warp(x, y):
        P = np.stack([(x - K.cx) / K.fx * depth, (y - K.cy) / K.fy * depth, depth], axis=-1)
        Q = P @ T.rotation.T + T.translation
        return np.stack([K.fx * Q[:, 0] / Q[:, 2] + K.cx, K.fy * Q[:, 1] / Q[:, 2] + K.cy], axis=-1)

    with np.errstate(divide="ignore", invalid="ignore"):
        moved = warp(xs + dirs[:, 0], ys + dirs[:, 1]) - warp(xs, ys)
    flip = np.sum(moved * seg_dir, axis=-1) < 0
    dirs[flip] *= -1.0
    return dirs, ok


def _triangulate(a, b, pos, dir_):
    """Depth at a matched position and its derivative along the segment (per unit step)."""
    c = np.where(np.abs(dir_[:, 0]) >= np.abs(dir_[:, 1]), 0, 1)
    rows = np.arange(len(c))
    x = pos[rows, c]
    ac = a[rows, c]
    bc = b[c]
    a2 = a[:, 2]
    b2 = b[2]
    den = x * a2 - ac
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = (bc - x * b2) / den
        ddx = (b2 * ac - bc * a2) / (den * den)
    return depth, ddx * dir_[rows, c]


# --- matching core ---------------------------------------------------------------


def _match_profiles(kf_profile, target, start, direction, n_pos, cfg: StereoConfig):
    """SSD search over padded candidate positions.

    One extra position beyond each end of the segment is scored so the
    parabola can be fitted when the best match sits on a segment end; the
    best position itself is always chosen inside the segment.

    Returns ``(best_index, subpixel_offset, best_ssd, ambiguous)``.
    """
    n = len(start)
    S = int(n_pos.max())
    steps = np.arange(-1, S + 1, dtype=np.float64)
    # consecutive windows overlap, so sample the line once and slide
    k = len(PROFILE_OFFSETS)
    line = np.arange(-1 - k // 2, S + 1 + k // 2, dtype=np.float64)
    h, w = target.shape
    sx = np.clip(start[:, 0, None] + line[None, :] * direction[:, 0, None], 0, w - 1)
    sy = np.clip(start[:, 1, None] + line[None, :] * direction[:, 1, None], 0, h - 1)
    vals = sliding_window_view(sample_bilinear_array(target, sx, sy), k, axis=1)
    diff = vals - kf_profile[:, None, :]
    ssd_pad = np.sum(diff * diff, axis=-1)
    ssd_pad = np.where(steps[None, :] <= n_pos[:, None], ssd_pad, np.inf)
    ssd = ssd_pad[:, 1:-1]
    steps = steps[1:-1]
    used = steps[None, :] < n_pos[:, None]
    ssd = np.where(used, ssd, np.inf)

    rows = np.arange(n)
    best = np.argmin(ssd, axis=1)
    e_best = ssd[rows, best]
    far = np.abs(steps[None, :] - best[:, None]) > 1
    second = np.min(np.where(far, ssd, np.inf), axis=1)
    near_only = ~np.isfinite(second)
    if near_only.any():
        others = steps[None, :] != best[:, None]
        second = np.where(near_only, np.min(np.where(others, ssd, np.inf), axis=1), second)
    ambiguous = ~(e_best < cfg.ambiguity_ratio * second)

    left = ssd_pad[rows, best]
    right = ssd_pad[rows, best + 2]
    curv = left - 2.0 * e_best + right
    inner = np.isfinite(left) & np.isfinite(right) & (curv > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(inner, 0.5 * (left - right) / curv, 0.0)
    off = np.clip(off, -0.5, 0.5)
    return best, off, e_best, ambiguous


def _observe(us, depth, variance, kf_intensity, target, T, K, cfg: StereoConfig):
    """Stereo observations for a batch of key-frame pixels ``us`` (N, 2).

    Returns ``(depth, variance, status, extras)``; ``extras`` carries the
    search geometry for the scalar API.
    """
    n = len(us)
    xs = us[:, 0].astype(np.float64)
    ys = us[:, 1].astype(np.float64)
    status = np.full(n, VALID, dtype=np.int8)
    out_d = np.full(n, np.nan)
    out_u = np.full(n, np.inf)

    a, b = _projection_coefficients(xs, ys, T, K)
    lo, hi = _depth_interval(depth, variance, cfg)
    lo, hi = _clip_to_front(a, b, lo, hi)
    status[~(hi > lo)] = DEGENERATE
    with np.errstate(invalid="ignore", divide="ignore"):
        p_lo = _project_affine(a, b, np.where(hi > lo, lo, 1.0))
        p_hi = _project_affine(a, b, np.where(hi > lo, hi, 1.0))
    m = cfg.border_margin
    s0, s1 = _liang_barsky(p_lo, p_hi, (m, m), (K.width - 1 - m, K.height - 1 - m))
    seg = p_hi - p_lo
    start = p_lo + s0[:, None] * seg
    end = p_lo + s1[:, None] * seg
    length = np.linalg.norm(end - start, axis=-1)
    bad = ~(s1 >= s0) | ~np.isfinite(length) | (length < 1.0)
    status[(status == VALID) & bad] = DEGENERATE
    extras = {"a": a, "b": b, "lo": lo, "hi": hi, "start": start, "end": end}

    h, w = kf_intensity.shape
    inside = (xs >= 2) & (xs <= w - 3) & (ys >= 2) & (ys <= h - 3)
    status[(status == VALID) & ~inside] = OUT_OF_BOUNDS

    act = np.nonzero(status == VALID)[0]
    if len(act) == 0:
        extras["kf_direction"] = np.zeros((n, 2))
        return out_d, out_u, status, extras
    direction = (end[act] - start[act]) / length[act, None]
    kdir, kok = _kf_directions(xs[act], ys[act], depth[act], T, K, direction)
    kdir_full = np.zeros((n, 2))
    kdir_full[act] = kdir
    extras["kf_direction"] = kdir_full
    status[act[~kok]] = DEGENERATE
    keep = kok
    act, direction, kdir = act[keep], direction[keep], kdir[keep]
    if len(act) == 0:
        return out_d, out_u, status, extras

    kx = xs[act, None] + PROFILE_OFFSETS * kdir[:, 0, None]
    ky = ys[act, None] + PROFILE_OFFSETS * kdir[:, 1, None]
    profile = sample_bilinear_array(kf_intensity, np.clip(kx, 0, w - 1), np.clip(ky, 0, h - 1))
    n_pos = np.floor(length[act]).astype(np.int64) + 1

    best, off, err, ambiguous = _match_profiles(profile, target, start[act], direction, n_pos, cfg)
    s_best = np.clip(best + off, 0.0, length[act])
    pos = start[act] + s_best[:, None] * direction
    d_obs, dd_ds = _triangulate(a[act], b, pos, direction)

    th, tw = target.shape
    fwd = sample_bilinear_array(target, np.clip(pos[:, 0] + direction[:, 0], 0, tw - 1),
                                np.clip(pos[:, 1] + direction[:, 1], 0, th - 1))
    bwd = sample_bilinear_array(target, np.clip(pos[:, 0] - direction[:, 0], 0, tw - 1),
                                np.clip(pos[:, 1] - direction[:, 1], 0, th - 1))
    g = np.maximum(np.abs(0.5 * (fwd - bwd)), cfg.gradient_floor)
    u_obs = dd_ds * dd_ds * cfg.sigma_photometric**2 / (g * g)

    good = np.isfinite(d_obs) & (d_obs > 0) & np.isfinite(u_obs) & (u_obs > 0)
    st = np.where(ambiguous, AMBIGUOUS, np.where(good, VALID, INVALID_DEPTH))
    status[act] = st
    ok = st == VALID
    out_d[act[ok]] = d_obs[ok]
    out_u[act[ok]] = u_obs[ok]
    extras.update(position=(act, pos, err, g))
    return out_d, out_u, status, extras


# --- public per-pixel API --------------------------------------------------------------


def epipolar_segment(u, T_t_kf: RigidPose, K: CameraIntrinsics, depth_range, config: StereoConfig = StereoConfig()) -> EpipolarSearch:
    """Segment in frame ``t`` covering key-frame pixel ``u`` over ``depth_range``.

    Raises:
        ValueError: non-positive depth bounds.
        DegenerateBaseline: the clipped segment is shorter than one pixel.
    """
    d_min, d_max = (float(v) for v in depth_range)
    if not (d_min > 0 and d_max > 0):
        raise ValueError("depth range must be positive")
    d_min, d_max = min(d_min, d_max), max(d_min, d_max)
    xs = np.array([float(u[0])])
    ys = np.array([float(u[1])])
    a, b = _projection_coefficients(xs, ys, T_t_kf, K)
    lo, hi = _clip_to_front(a, b, np.array([d_min]), np.array([d_max]))
    if not hi[0] > lo[0]:
        raise DegenerateBaseline(f"pixel {tuple(u)}: ray is behind the camera")
    p_lo = _project_affine(a, b, lo)
    p_hi = _project_affine(a, b, hi)
    m = config.border_margin
    s0, s1 = _liang_barsky(p_lo, p_hi, (m, m), (K.width - 1 - m, K.height - 1 - m))
    start = p_lo[0] + s0[0] * (p_hi[0] - p_lo[0])
    end = p_lo[0] + s1[0] * (p_hi[0] - p_lo[0])
    if not s1[0] >= s0[0] or not np.linalg.norm(end - start) >= 1.0:
        raise DegenerateBaseline(f"pixel {tuple(u)}: epipolar segment shorter than 1 px")
    d_mid = np.array([0.5 * (d_min + d_max)])
    seg_dir = ((end - start) / np.linalg.norm(end - start))[None]
    kdir, ok = _kf_directions(xs, ys, d_mid, T_t_kf, K, seg_dir)
    if not ok[0]:
        raise DegenerateBaseline(f"pixel {tuple(u)} coincides with the epipole")
    return EpipolarSearch(PixelCoord(float(u[0]), float(u[1])), start, end, (float(lo[0]), float(hi[0])),
                          a[0], b, kdir[0])


def match_along_epipolar(u, kf_intensity: np.ndarray, target: np.ndarray, search: EpipolarSearch,
                         config: StereoConfig = StereoConfig()) -> EpipolarMatch:
    """Best 5-sample SSD match of ``u``'s profile along ``search``.

    Raises:
        DegenerateBaseline: segment shorter than one pixel.
        AmbiguousMatch: best SSD is not below ``ambiguity_ratio`` times the
            best non-adjacent alternative.
    """
    if isinstance(kf_intensity, KeyFrame):
        kf_intensity = kf_intensity.intensity
    length = search.length
    if not length >= 1.0:
        raise DegenerateBaseline("segment shorter than 1 px")
    h, w = kf_intensity.shape
    kd = search.kf_direction
    kx = np.clip(float(u[0]) + PROFILE_OFFSETS * kd[0], 0, w - 1)
    ky = np.clip(float(u[1]) + PROFILE_OFFSETS * kd[1], 0, h - 1)
    profile = sample_bilinear_array(kf_intensity, kx, ky)[None]
    direction = search.direction[None]
    n_pos = np.array([int(np.floor(length)) + 1])
    best, off, err, ambiguous = _match_profiles(profile, target, search.start[None], direction, n_pos, config)
    if ambiguous[0]:
        raise AmbiguousMatch(f"pixel {tuple(u)}: no distinct SSD minimum")
    pos = search.start + min(max(best[0] + off[0], 0.0), length) * search.direction
    depth, _ = _triangulate(search.a[None], search.b, pos[None], direction)
    return EpipolarMatch(float(depth[0]), float(err[0]), pos)


def observation_uncertainty(u, match: EpipolarMatch, search: EpipolarSearch, kf, target: np.ndarray,
                            config: StereoConfig = StereoConfig()) -> float:
    """Depth variance of a stereo match: ``(dD/ds)^2 sigma_I^2 / g^2``.

    ``g`` is the target's central-difference gradient along the epipolar
    direction at the match, floored at ``config.gradient_floor``.
    """
    direction = search.direction
    _, dd_ds = _triangulate(search.a[None], search.b, np.asarray(match.position)[None], direction[None])
    g = gradient_along(target, match.position, direction)
    g = max(abs(g), config.gradient_floor)
    return float(dd_ds[0] ** 2 * config.sigma_photometric**2 / g**2)


def gradient_along(img: np.ndarray, position, direction) -> float:
    h, w = img.shape
    p = np.asarray(position, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    f = sample_bilinear_array(img, np.clip([p[0] + d[0]], 0, w - 1), np.clip([p[1] + d[1]], 0, h - 1))[0]
    bk = sample_bilinear_array(img, np.clip([p[0] - d[0]], 0, w - 1), np.clip([p[1] - d[1]], 0, h - 1))[0]
    return 0.5 * (f - bk)


# --- dense pass ------------------------------------------------------------------------


def compute_observations(kf: KeyFrame, target: np.ndarray, T_t_kf: RigidPose, config: StereoConfig = StereoConfig(),
                         state=None) -> ObservationMaps:
    """Stereo depth and variance for every key-frame pixel against frame ``t``.

    ``T_t_kf`` maps key-frame coordinates into frame ``t``. A baseline
    shorter than ``min_baseline_ratio`` times the mean key-frame depth marks
    every pixel degenerate: the translation tracked under pure rotation is
    noise, yet with a wide prior range it can stretch segments past 1 px.
    """
    st = state or kf.state
    H, W = st.depth.shape
    if T_t_kf.translation_norm() < config.min_baseline_ratio * float(np.mean(st.depth)):
        return ObservationMaps(np.full((H, W), np.nan), np.full((H, W), np.inf), np.full((H, W), DEGENERATE, dtype=np.int8))
    ys, xs = np.mgrid[0:H, 0:W]
    us = np.stack([xs.ravel(), ys.ravel()], axis=1)
    depth = st.depth.ravel()
    var = st.uncertainty.ravel()
    out_d = np.full(H * W, np.nan)
    out_u = np.full(H * W, np.inf)
    status = np.full(H * W, DEGENERATE, dtype=np.int8)

    # cheap geometric pass first, then chunks ordered by segment length so
    # padded candidate arrays stay compact
    xsf = xs.ravel().astype(np.float64)
    ysf = ys.ravel().astype(np.float64)
    a, b = _projection_coefficients(xsf, ysf, T_t_kf, kf.K)
    lo, hi = _depth_interval(depth, var, config)
    lo, hi = _clip_to_front(a, b, lo, hi)
    span = hi > lo
    with np.errstate(invalid="ignore", divide="ignore"):
        p_lo = _project_affine(a, b, np.where(span, lo, 1.0))
        p_hi = _project_affine(a, b, np.where(span, hi, 1.0))
        length = np.linalg.norm(p_hi - p_lo, axis=-1)
    length = np.where(span & np.isfinite(length), length, 0.0)
    cand = np.nonzero(length >= 1.0)[0]
    cand = cand[np.argsort(length[cand], kind="stable")]
    intensity = kf.intensity
    for i in range(0, len(cand), config.chunk_size):
        idx = cand[i : i + config.chunk_size]
        d, u, s, _ = _observe(us[idx], depth[idx], var[idx], intensity, target, T_t_kf, kf.K, config)
        out_d[idx] = d
        out_u[idx] = u
        status[idx] = s
    return ObservationMaps(out_d.reshape(H, W), out_u.reshape(H, W), status.reshape(H, W))


def refine_keyframe(kf: KeyFrame, obs: ObservationMaps, state=None):
    """Fuse ``obs`` into ``kf`` and publish the result as a new generation.

    Pixels without a valid observation keep their values bit-for-bit.
    """
    st = state or kf.state
    if obs.depth.shape != st.depth.shape:
        raise ValueError("observation maps are not aligned with the key-frame")
    D = np.array(st.depth, dtype=np.float64)
    U = np.array(st.uncertainty, dtype=np.float64)
    m = obs.valid
    D[m], U[m] = fuse_depth(st.depth[m], st.uncertainty[m], obs.depth[m], obs.uncertainty[m])
    return kf.publish(D, U, expected_generation=st.generation)


def refine_with_frame(kf: KeyFrame, target: np.ndarray, T_t_kf: RigidPose, config: StereoConfig = StereoConfig()):
    """One refinement step: observe against ``target`` and fuse."""
    st = kf.state
    obs = compute_observations(kf, target, T_t_kf, config, state=st)
    return refine_keyframe(kf, obs, state=st), obs
