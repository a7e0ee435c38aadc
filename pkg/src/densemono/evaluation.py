"""Trajectory and depth accuracy metrics, and the run report.

ATE aligns the estimated camera centres to ground truth with a rigid
(rotation + translation, no scale) least-squares fit before taking the
RMSE, so absolute-scale errors are penalised. Depth accuracy counts pixels
within 10% of ground truth over all ground-truth-valid pixels; pixels
without an estimate count as wrong.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset
from .errors import InsufficientPairs, IoError, MalformedLine, MissingFile, NoGroundTruth
from .geometry import RigidPose

logger = logging.getLogger(__name__)

UNAVAILABLE = "unavailable"


@dataclass
class TrajectoryPair:
    """Associated camera-to-world poses, sorted by estimate timestamp."""

    timestamps: list[float]
    estimated: list[RigidPose]
    ground_truth: list[RigidPose]

    @classmethod
    def associate(cls, estimated, ground_truth, tolerance: float = dataset.ASSOCIATION_TOLERANCE) -> TrajectoryPair:
        """Pair ``(timestamp, pose)`` lists by nearest timestamp, one-to-one."""
        est = sorted(estimated, key=lambda p: p[0])
        gt = sorted(ground_truth, key=lambda p: p[0])
        pairs = dataset.associate([t for t, _ in est], [t for t, _ in gt], tolerance)
        keys = sorted(pairs)
        return cls([est[i][0] for i in keys], [est[i][1] for i in keys], [gt[pairs[i]][1] for i in keys])

    def __len__(self):
        return len(self.timestamps)

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        est = np.array([p.translation for p in self.estimated]).reshape(-1, 3)
        gt = np.array([p.translation for p in self.ground_truth]).reshape(-1, 3)
        return est, gt


def align_rigid(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation ``R`` and translation ``t`` minimising ``sum |R s + t - g|^2`` (Kabsch, no scale)."""
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    C = (target - mu_t).T @ (source - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ S @ Vt
    return R, mu_t - R @ mu_s


def ate_residuals(pair: TrajectoryPair, align: str = "rigid") -> np.ndarray:
    if len(pair) < 2:
        raise InsufficientPairs(f"need at least 2 associated poses, got {len(pair)}")
    est, gt = pair.positions()
    if align == "rigid":
        R, t = align_rigid(est, gt)
        est = est @ R.T + t
    elif align != "none":
        raise ValueError(f"unknown alignment {align!r}")
    return np.linalg.norm(est - gt, axis=1)


def absolute_trajectory_error(pair: TrajectoryPair, align: str = "rigid") -> float:
    """RMSE of camera-centre distances after alignment (metres).

    Raises:
        InsufficientPairs: fewer than two associated poses.
    """
    r = ate_residuals(pair, align)
    return float(np.sqrt(np.mean(r * r)))


def trajectory_length(poses: list[RigidPose]) -> float:
    c = np.array([p.translation for p in poses])
    return float(np.sum(np.linalg.norm(np.diff(c, axis=0), axis=1))) if len(c) > 1 else 0.0


@dataclass
class DepthAccuracyReport:
    per_keyframe: list[float] = field(default_factory=list)
    correct: list[int] = field(default_factory=list)
    evaluated: list[int] = field(default_factory=list)
    estimated: list[int] = field(default_factory=list)

    @property
    def fraction(self) -> float:
        n = sum(self.evaluated)
        return sum(self.correct) / n if n else 0.0

    @property
    def percent(self) -> float:
        n = sum(self.evaluated)
        return 100.0 * sum(self.correct) / n if n else 0.0

    @property
    def density(self) -> float:
        n = sum(self.evaluated)
        return sum(self.estimated) / n if n else 0.0


def _correct_mask(est, gt, valid, threshold):
    has_est = np.isfinite(est) & (est > 0)
    with np.errstate(invalid="ignore"):
        ok = has_est & (np.abs(est - gt) < threshold * gt)
    return ok & valid, has_est & valid


def depth_accuracy(est_maps, gt_maps, valid_masks=None, threshold: float = 0.1) -> DepthAccuracyReport:
    """Per-map and pooled fraction of GT-valid pixels estimated within ``threshold``.

    Raises:
        NoGroundTruth: no map has a single valid ground-truth pixel.
    """
    rep = DepthAccuracyReport()
    for k, (est, gt) in enumerate(zip(est_maps, gt_maps)):
        est = np.asarray(est, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        valid = np.isfinite(gt) & (gt > 0)
        if valid_masks is not None:
            valid &= np.asarray(valid_masks[k], dtype=bool)
        ok, has = _correct_mask(est, gt, valid, threshold)
        n = int(valid.sum())
        rep.correct.append(int(ok.sum()))
        rep.evaluated.append(n)
        rep.estimated.append(int(has.sum()))
        rep.per_keyframe.append(float(ok.sum()) / n if n else float("nan"))
    if sum(rep.evaluated) == 0:
        raise NoGroundTruth("no valid ground-truth depth pixels")
    return rep


def percent_correct_depth(est_maps, gt_maps, valid_masks=None, threshold: float = 0.1) -> float:
    """Percentage of GT-valid pixels with ``|est - gt| < threshold * gt``; missing estimates are wrong."""
    return depth_accuracy(est_maps, gt_maps, valid_masks, threshold).percent


# --- run artefacts ------------------------------------------------------------------------


@dataclass
class KeyframeDump:
    kf_id: int
    frame_id: str
    timestamp: float
    generation: int
    depth_png: Path
    depth_f32: Path
    uncertainty_f32: Path


def read_keyframe_index(run_dir) -> list[KeyframeDump]:
    """Parse ``keyframes/index.txt``: ``id frame_id timestamp generation depth.png depth.f32 unc.f32``."""
    kdir = Path(run_dir) / "keyframes"
    index = kdir / "index.txt"
    out = []
    for n, tok in dataset._data_lines(index):
        if len(tok) != 7:
            raise MalformedLine(n, f"{index}: expected 7 tokens")
        out.append(KeyframeDump(int(tok[0]), tok[1], float(tok[2]), int(tok[3]), kdir / tok[4], kdir / tok[5], kdir / tok[6]))
    return out


def write_keyframe_index(run_dir, dumps: list[KeyframeDump]) -> None:
    kdir = Path(run_dir) / "keyframes"
    lines = ["# id frame_id timestamp generation depth_png depth_f32 uncertainty_f32"]
    for d in dumps:
        lines.append(f"{d.kf_id} {d.frame_id} {d.timestamp:.6f} {d.generation} "
                     f"{d.depth_png.name} {d.depth_f32.name} {d.uncertainty_f32.name}")
    (kdir / "index.txt").write_text("\n".join(lines) + "\n", encoding="ascii")


def read_timings(run_dir) -> list[float]:
    path = Path(run_dir) / "timings.txt"
    if not path.is_file():
        return []
    return [float(tok[1]) for _, tok in dataset._data_lines(path)]


@dataclass
class RunMetrics:
    ate: float | None
    alignment: str
    percent_correct: float | None
    density: float | None
    keyframes: int
    frames: int
    mean_track_time: float | None
    per_keyframe: list[tuple[int, float]] = field(default_factory=list)
    trajectory: TrajectoryPair | None = None

    def rows(self) -> list[tuple[str, str]]:
        def fmt(v, spec):
            return UNAVAILABLE if v is None else format(v, spec)

        return [
            ("ate_m", fmt(self.ate, ".6f")),
            ("ate_alignment", self.alignment),
            ("percent_correct_depth", fmt(self.percent_correct, ".4f")),
            ("depth_density", fmt(self.density, ".4f")),
            ("keyframes", str(self.keyframes)),
            ("frames", str(self.frames)),
            ("mean_track_time_s", fmt(self.mean_track_time, ".6f")),
        ]


def write_report(metrics: RunMetrics, path) -> None:
    """Tab-delimited ``metric<TAB>value`` lines, then per-key-frame accuracy."""
    lines = ["metric\tvalue"]
    lines += [f"{k}\t{v}" for k, v in metrics.rows()]
    for kf_id, frac in metrics.per_keyframe:
        lines.append(f"keyframe_{kf_id}_percent_correct\t{UNAVAILABLE if np.isnan(frac) else format(100 * frac, '.4f')}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="ascii").splitlines()[1:]:
        k, v = line.split("\t")
        out[k] = v
    return out


def _gt_depth_lookup(gt_dir, associations: str):
    try:
        records = dataset.load_sequence(gt_dir, associations)
    except MissingFile:
        return None, []
    return records, [r.timestamp for r in records]


def evaluate_run(run_dir, gt_dir, align: str = "rigid", associations: str = "associations.txt") -> RunMetrics:
    """Compute metrics for a finished run against a TUM-layout ground-truth directory.

    Missing ground truth marks the affected metrics unavailable.
    """
    run_dir = Path(run_dir)
    traj_path = run_dir / "trajectory.txt"
    if not traj_path.is_file():
        raise MissingFile(f"{traj_path}: run has no trajectory")
    est = dataset.read_trajectory(traj_path)
    dumps = read_keyframe_index(run_dir)
    timings = read_timings(run_dir)

    ate = None
    pair = None
    gt_traj = Path(gt_dir) / "groundtruth.txt"
    if gt_traj.is_file():
        pair = TrajectoryPair.associate(est, dataset.read_trajectory(gt_traj))
        try:
            ate = absolute_trajectory_error(pair, align)
        except InsufficientPairs:
            logger.warning("too few associated poses for ATE")
            ate = None

    pct = dens = None
    per_kf = []
    records, stamps = _gt_depth_lookup(gt_dir, associations)
    if records:
        est_maps, gt_maps, ids = [], [], []
        for d in dumps:
            match = dataset.associate([d.timestamp], stamps)
            if 0 not in match or records[match[0]].gt_depth_path is None:
                continue
            gt_path = records[match[0]].gt_depth_path
            if not gt_path.is_file():
                continue
            gt = dataset.load_depth_png(gt_path)
            gt = dataset.resize_nearest(gt, dataset.WORKING_WIDTH, dataset.WORKING_HEIGHT)
            est_maps.append(dataset.read_f32(d.depth_f32))
            gt_maps.append(gt)
            ids.append(d.kf_id)
        if est_maps:
            try:
                rep = depth_accuracy(est_maps, gt_maps)
                pct, dens = rep.percent, rep.density
                per_kf = list(zip(ids, rep.per_keyframe))
            except NoGroundTruth:
                pass
    mean_t = float(np.mean(timings)) if timings else None
    return RunMetrics(ate, align, pct, dens, len(dumps), len(est), mean_t, per_kf, pair)
