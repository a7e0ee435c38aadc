"""Key-frames: creation policy, confidence-based uncertainty and depth fusion.

Depth maps are dense metric depth (m), uncertainty maps are depth variances
(m^2). All fusion, whether between key-frames or from per-frame stereo
observations, goes through :func:`fuse_depth`.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .dataset import downsample, sample_bilinear_array
from .geometry import CameraIntrinsics, RigidPose, backproject, pose_distance, relative_pose, warp_depth_map
from .prediction import SemanticLabelMap

U_MAX = 4.0
SIGMA_P2 = 0.01
METERS_PER_RADIAN = 1.0


@dataclass(frozen=True)
class DepthState:
    """One published generation of a key-frame's depth and uncertainty."""

    depth: np.ndarray
    uncertainty: np.ndarray
    generation: int

    def __post_init__(self):
        for name in ("depth", "uncertainty"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)


class KeyFrame:
    """Key-frame with an atomically swappable depth/uncertainty state.

    Readers call :attr:`state` once and use that snapshot; writers build a
    complete new :class:`DepthState` and publish it with :meth:`publish`.
    """

    def __init__(
        self,
        id: int,
        pose: RigidPose,
        intensity: np.ndarray,
        depth: np.ndarray,
        uncertainty: np.ndarray,
        K: CameraIntrinsics,
        labels: SemanticLabelMap | None = None,
        color: np.ndarray | None = None,
        frame_index: int = 0,
        timestamp: float = 0.0,
        frame_id: str = "",
    ):
        if depth.shape != intensity.shape or uncertainty.shape != intensity.shape:
            raise ValueError("depth, uncertainty and intensity must share dimensions")
        if not np.all(depth > 0):
            raise ValueError("key-frame depth must be dense and positive")
        if not np.all(uncertainty >= 0):
            raise ValueError("uncertainty must be non-negative")
        self.id = id
        self.pose = pose
        self.intensity = np.asarray(intensity, dtype=np.float64)
        self.intensity.setflags(write=False)
        self.K = K
        self.labels = labels
        self.color = color
        self.frame_index = frame_index
        self.timestamp = timestamp
        self.frame_id = frame_id
        self._state = DepthState(depth, uncertainty, 0)
        self._lock = threading.Lock()
        self._intensity_pyramid: list[np.ndarray] | None = None

    @property
    def state(self) -> DepthState:
        return self._state

    @property
    def depth(self) -> np.ndarray:
        return self._state.depth

    @property
    def uncertainty(self) -> np.ndarray:
        return self._state.uncertainty

    @property
    def generation(self) -> int:
        return self._state.generation

    def publish(self, depth: np.ndarray, uncertainty: np.ndarray, expected_generation: int | None = None) -> DepthState:
        """Swap in a new depth/uncertainty pair, bumping the generation."""
        with self._lock:
            cur = self._state
            if expected_generation is not None and expected_generation != cur.generation:
                raise RuntimeError("key-frame was refined concurrently")
            new = DepthState(depth, uncertainty, cur.generation + 1)
            self._state = new
            return new

    def intensity_pyramid(self, levels: int) -> list[np.ndarray]:
        pyr = self._intensity_pyramid
        if pyr is None or len(pyr) < levels:
            pyr = [self.intensity]
            for _ in range(levels - 1):
                pyr.append(downsample(pyr[-1]))
            self._intensity_pyramid = pyr
        return pyr[:levels]

    def mean_depth(self) -> float:
        return float(np.mean(self.depth))

    def __repr__(self):
        return f"KeyFrame(id={self.id}, frame={self.frame_index}, gen={self.generation})"


class KeyframeStore:
    """Ordered key-frame list with batch pose updates.

    Pose updates from the graph optimiser are applied under one lock so a
    reader taking :meth:`snapshot` sees either all old or all new poses.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._keyframes: list[KeyFrame] = []

    def add(self, kf: KeyFrame) -> None:
        with self._lock:
            self._keyframes = [*self._keyframes, kf]

    def snapshot(self) -> list[tuple[KeyFrame, RigidPose]]:
        with self._lock:
            return [(kf, kf.pose) for kf in self._keyframes]

    def keyframes(self) -> list[KeyFrame]:
        return list(self._keyframes)

    def apply_poses(self, poses: dict[int, RigidPose]) -> None:
        with self._lock:
            for kf in self._keyframes:
                if kf.id in poses:
                    kf.pose = poses[kf.id]

    def __len__(self):
        return len(self._keyframes)

    def __getitem__(self, i) -> KeyFrame:
        return self._keyframes[i]

    def by_id(self, kf_id: int) -> KeyFrame:
        for kf in self._keyframes:
            if kf.id == kf_id:
                return kf
        raise KeyError(kf_id)


@dataclass(frozen=True)
class KeyframePolicy:
    max_translation: float
    max_rotation: float

    def __post_init__(self):
        if not (self.max_translation > 0 and self.max_rotation > 0):
            raise ValueError("key-frame thresholds must be positive")

    @classmethod
    def for_keyframe(cls, kf: KeyFrame, translation_ratio: float = 0.15, max_rotation_deg: float = 10.0):
        """Translation threshold proportional to the key-frame's mean depth."""
        return cls(translation_ratio * kf.mean_depth(), np.deg2rad(max_rotation_deg))


def should_create_keyframe(T_t: RigidPose, nearest_pose: RigidPose, policy: KeyframePolicy) -> bool:
    rel = relative_pose(nearest_pose, T_t)
    return rel.translation_norm() > policy.max_translation or rel.rotation_angle() > policy.max_rotation


def find_nearest_keyframe(T_t: RigidPose, keyframes) -> KeyFrame:
    """Key-frame closest to ``T_t`` by translation + 1 m/rad * rotation angle.

    ``keyframes`` is a list of key-frames or of ``(kf, pose)`` snapshot pairs.
    Ties go to the lower id.
    """
    if not keyframes:
        raise ValueError("no key-frames")
    best, best_key = None, None
    for item in keyframes:
        kf, pose = item if isinstance(item, tuple) else (item, item.pose)
        key = (pose_distance(pose, T_t, METERS_PER_RADIAN), kf.id)
        if best_key is None or key < best_key:
            best, best_key = kf, key
    return best


# --- fusion arithmetic ------------------------------------------------------


def fuse_depth(depth_a, unc_a, depth_b, unc_b):
    """Inverse-variance fusion of two depth estimates.

    ``D = (U_b D_a + U_a D_b) / (U_a + U_b)``, ``U = U_b U_a / (U_a + U_b)``.
    An infinite ``unc_b`` leaves ``(depth_a, unc_a)`` untouched. Results are
    clamped to the input hull to absorb last-bit rounding.
    """
    depth_a, unc_a, depth_b, unc_b = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (depth_a, unc_a, depth_b, unc_b))
    )
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        denom = unc_a + unc_b
        d = (unc_b * depth_a + unc_a * depth_b) / denom
        u = (unc_b * unc_a) / denom
    d = np.clip(d, np.minimum(depth_a, depth_b), np.maximum(depth_a, depth_b))
    u = np.minimum(u, np.minimum(unc_a, unc_b))
    # undefined (0/0) or dominated-by-prior cases keep the prior
    inf_b = np.isinf(unc_b) | (denom == 0)
    d = np.where(inf_b, depth_a, d)
    u = np.where(inf_b, unc_a, u)
    return d, u


def uncertainty_from_depths(depth_i, depth_j_warped):
    """Squared difference between a prediction and the neighbour's depth."""
    diff = np.asarray(depth_i, dtype=np.float64) - np.asarray(depth_j_warped, dtype=np.float64)
    return diff * diff


def propagate_uncertainty(depth_j, unc_j, depth_i, sigma_p2: float = SIGMA_P2, exponent: float = 1.0):
    """Neighbour uncertainty carried into the new key-frame.

    ``(D_j / D_i) ** exponent * U_j + sigma_p2``; ``exponent`` defaults to 1.
    """
    ratio = np.asarray(depth_j, dtype=np.float64) / np.asarray(depth_i, dtype=np.float64)
    if exponent != 1.0:
        ratio = ratio**exponent
    return ratio * np.asarray(unc_j, dtype=np.float64) + sigma_p2


@dataclass
class NeighbourSample:
    """Key-frame ``j`` resampled on key-frame ``i``'s pixel grid."""

    valid: np.ndarray
    depth_j: np.ndarray = field(repr=False)  # D_j(v), in k_j's frame
    unc_j: np.ndarray = field(repr=False)
    depth_j_in_i: np.ndarray = field(repr=False)  # same surface point, depth in k_i's frame


def sample_neighbour(depth_i: np.ndarray, K: CameraIntrinsics, depth_j: np.ndarray, unc_j: np.ndarray,
                     T_i_to_j: RigidPose) -> NeighbourSample:
    """Warp every pixel of ``i`` into ``j`` and bilinearly sample ``j``'s maps there."""
    x, y, _, valid = warp_depth_map(depth_i, T_i_to_j, K)
    xs = np.where(valid, x, 0.0)
    ys = np.where(valid, y, 0.0)
    dj = sample_bilinear_array(depth_j, xs, ys)
    uj = sample_bilinear_array(unc_j, xs, ys)
    Pj = backproject(xs, ys, dj, K)
    Pi = T_i_to_j.inverse().apply(Pj)
    dji = Pi[..., 2]
    valid = valid & (dj > 0) & (dji > 0)
    return NeighbourSample(valid, dj, uj, np.where(valid, dji, np.nan))


def init_uncertainty(depth_i: np.ndarray, K: CameraIntrinsics, nearest: KeyFrame | None,
                     T_i_to_j: RigidPose | None, u_max: float = U_MAX,
                     sample: NeighbourSample | None = None) -> np.ndarray:
    """Confidence-based uncertainty for a freshly predicted key-frame depth.

    Pixels that warp outside the neighbour, and every pixel of the very first
    key-frame (``nearest is None``), get ``u_max``.
    """
    if nearest is None:
        return np.full(depth_i.shape, float(u_max))
    if sample is None:
        st = nearest.state
        sample = sample_neighbour(depth_i, K, st.depth, st.uncertainty, T_i_to_j)
    U = np.full(depth_i.shape, float(u_max))
    U[sample.valid] = uncertainty_from_depths(depth_i[sample.valid], sample.depth_j_in_i[sample.valid])
    return U


def fuse_new_keyframe(depth_i: np.ndarray, unc_i: np.ndarray, K: CameraIntrinsics, nearest: KeyFrame,
                      T_i_to_j: RigidPose, sigma_p2: float = SIGMA_P2, exponent: float = 1.0,
                      sample: NeighbourSample | None = None):
    """Fuse the neighbour's refined maps into a new key-frame.

    Pixels without a valid correspondence keep their prior values.
    """
    if sample is None:
        st = nearest.state
        sample = sample_neighbour(depth_i, K, st.depth, st.uncertainty, T_i_to_j)
    D = depth_i.astype(np.float64, copy=True)
    U = unc_i.astype(np.float64, copy=True)
    m = sample.valid
    u_prop = propagate_uncertainty(sample.depth_j[m], sample.unc_j[m], depth_i[m], sigma_p2, exponent)
    D[m], U[m] = fuse_depth(depth_i[m], unc_i[m], sample.depth_j_in_i[m], u_prop)
    return D, U
