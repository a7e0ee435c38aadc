"""End-to-end two-lane pipeline: run, evaluate and export.

The frame lane (the calling thread) tracks every frame against its nearest
key-frame and refines that key-frame with the frame. The key-frame lane, a
single worker thread, creates key-frames (prediction fetch, scale
adjustment, uncertainty initialisation, neighbour fusion), maintains the
pose graph and fuses finished key-frames into the global model.

Schedule, fixed so that runs are reproducible bit for bit:

* key-frame creation is handed to the key-frame lane and the frame lane
  waits for it, so every frame is tracked against fully published state;
* refinement with frame ``t`` is published before frame ``t + 1`` is tracked;
* global model integration receives immutable ``(depth state, pose)``
  snapshots and runs in the background in submission order.

A key-frame is integrated into the global model when its successor is
created (it is no longer refined by then in the common case), and the last
one when the run ends.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset
from .config import PipelineConfig, save_config
from .errors import MissingFile, NotConnected, SingularSystem, SlamError, TrackingLost
from .evaluation import KeyframeDump, RunMetrics, evaluate_run, write_keyframe_index, write_report
from .geometry import CameraIntrinsics, RigidPose, relative_pose
from .keyframes import (
    DepthState,
    KeyFrame,
    KeyframeStore,
    find_nearest_keyframe,
    fuse_new_keyframe,
    init_uncertainty,
    sample_neighbour,
    should_create_keyframe,
)
from .model import GlobalModel, export_ply
from .posegraph import PoseGraph, add_keyframe_edges, default_information, measured_relative, on_optimized
from .prediction import DegradedGroundTruthProvider, DirectoryProvider, adjust_scale
from .refinement import DEGENERATE, VALID, compute_observations, refine_keyframe
from .tracking import estimate_pose

logger = logging.getLogger(__name__)

TRAJECTORY_FILE = "trajectory.txt"
MODEL_FILE = "model.npz"
TIMINGS_FILE = "timings.txt"
LOG_FILE = "run.log"
GRAPH_FILE = "graph.g2o"
CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.txt"


@dataclass
class FrameTrace:
    """What happened to one input frame."""

    index: int
    timestamp: float
    keyframe_id: int
    relative_pose: RigidPose  # key-frame to frame
    created_keyframe: bool
    track_time: float = 0.0
    refine_time: float = 0.0
    status_counts: dict[int, int] = field(default_factory=dict)


@dataclass
class RunArtifacts:
    out_dir: Path
    frames: list[FrameTrace]
    keyframes: list[KeyFrame]
    poses: list[tuple[float, RigidPose]]  # world-to-camera per frame
    model: GlobalModel | None
    graph: PoseGraph

    @property
    def trajectory(self) -> Path:
        return self.out_dir / TRAJECTORY_FILE

    @property
    def keyframe_index(self) -> Path:
        return self.out_dir / "keyframes" / "index.txt"


def _with_frame(exc: SlamError, index: int) -> SlamError:
    """Same error class, message prefixed with the frame index."""
    try:
        new = type(exc)(f"frame {index}: {exc}")
    except TypeError:
        new = exc
    new.frame_index = index
    return new


# --- setup ----------------------------------------------------------------------------


def load_intrinsics(cfg: PipelineConfig) -> tuple[CameraIntrinsics, float | None]:
    path = Path(cfg.camera) if cfg.camera else Path(cfg.dataset) / "camera.txt"
    if not path.is_file():
        raise MissingFile(f"{path}: camera intrinsics not found")
    return dataset.load_camera(path)


def make_provider(cfg: PipelineConfig, records: list[dataset.FrameRecord], K: CameraIntrinsics,
                  camera_f_train: float | None = None):
    """Directory predictions when ``prediction_dir`` is set, else degraded ground truth."""
    if cfg.prediction_dir:
        f_train = cfg.f_train if cfg.f_train > 0 else camera_f_train
        return DirectoryProvider(cfg.prediction_dir, f_train)
    by_id = {r.frame_id: r for r in records}

    def gt_lookup(frame_id):
        rec = by_id.get(frame_id)
        if rec is None or rec.gt_depth_path is None or not rec.gt_depth_path.is_file():
            return None
        d = dataset.load_depth_png(rec.gt_depth_path)
        return dataset.resize_nearest(d, K.width, K.height)

    f_train = cfg.f_train if cfg.f_train > 0 else K.fx
    return DegradedGroundTruthProvider(gt_lookup, f_train, cfg.synth_blur, cfg.synth_bias, cfg.synth_noise, cfg.seed)


# --- the two lanes --------------------------------------------------------------------


class Pipeline:
    """Stateful runner; :meth:`process` handles one frame."""

    def __init__(self, cfg: PipelineConfig, K: CameraIntrinsics, provider):
        self.cfg = cfg
        self.K = K
        self.provider = provider
        self.tracking = cfg.tracking()
        self.stereo = cfg.stereo()
        self.store = KeyframeStore()
        self.graph = PoseGraph()
        self.model = GlobalModel(normal_angle_deg=cfg.normal_angle_deg) if cfg.build_model else None
        self.information = default_information(cfg.sigma_edge_translation, cfg.sigma_edge_rotation)
        self.traces: list[FrameTrace] = []
        self.generation_dumps: list[tuple[int, DepthState]] = []
        self._kf_lane = ThreadPoolExecutor(max_workers=1, thread_name_prefix="keyframe-lane")
        self._pending: list[Future] = []
        self._prev_world: RigidPose | None = None
        self._integrated: set[int] = set()

    # key-frame lane ---------------------------------------------------------------

    def _create_keyframe(self, index: int, rec: dataset.FrameRecord, intensity, color, pose: RigidPose,
                         neighbour: tuple[KeyFrame, RigidPose] | None) -> KeyFrame:
        cfg = self.cfg
        pred, labels = self.provider.fetch_prediction(rec.frame_id)
        D = adjust_scale(pred, self.K.fx)
        if D.shape != intensity.shape:
            D = dataset.resize_nearest(D, intensity.shape[1], intensity.shape[0])
        if neighbour is None:
            U = init_uncertainty(D, self.K, None, None, cfg.u_max)
        else:
            nb, nb_pose = neighbour
            st = nb.state
            T_i_to_j = relative_pose(pose, nb_pose)
            sample = sample_neighbour(D, self.K, st.depth, st.uncertainty, T_i_to_j)
            U = init_uncertainty(D, self.K, nb, T_i_to_j, cfg.u_max, sample)
            D, U = fuse_new_keyframe(D, U, self.K, nb, T_i_to_j, cfg.sigma_p2, cfg.propagation_exponent, sample)
        kf = KeyFrame(len(self.store), pose, intensity, D, U, self.K, labels, color, index, rec.timestamp, rec.frame_id)
        existing = [(k.id, p) for k, p in self.store.snapshot()]

        def measure(i: int, j: int) -> RigidPose | None:
            if not cfg.loop_alignment:
                return None
            old = self.store.by_id(i)
            W_i = dict(existing)[i]
            try:
                res = estimate_pose(old, kf.intensity, pose @ W_i.inverse(), self.tracking, keyframe_pose=W_i)
            except TrackingLost:
                logger.info("loop alignment %d-%d failed; edge skipped", i, j)
                return None
            return measured_relative(W_i, res.world_pose)

        self.store.add(kf)
        edges = add_keyframe_edges(self.graph, kf.id, pose, existing, cfg.fov_threshold, measure, self.information)
        if len(edges) > 1:
            try:
                res = self.graph.optimize()
                on_optimized(self.store, res.poses)
                logger.info("key-frame %d: %d edges, chi2 %.4g -> %.4g", kf.id, len(edges), res.initial_chi2, res.chi2)
            except (NotConnected, SingularSystem) as exc:
                logger.warning("pose graph optimisation skipped: %s", exc)
        logger.info("key-frame %d created at frame %d", kf.id, index)
        return kf

    def _integrate(self, kf: KeyFrame, state: DepthState, pose: RigidPose) -> None:
        lab = kf.labels
        self.model.integrate(
            state.depth, pose, kf.K,
            labels=None if lab is None else lab.labels,
            num_classes=None if lab is None else lab.num_classes,
            color=kf.color, intensity=kf.intensity, source=(kf.id, state.generation),
        )

    def _submit_integration(self, kf: KeyFrame) -> None:
        if self.model is None or kf.id in self._integrated:
            return
        self._integrated.add(kf.id)
        self._pending.append(self._kf_lane.submit(self._integrate, kf, kf.state, kf.pose))

    # frame lane -------------------------------------------------------------------

    def process(self, index: int, rec: dataset.FrameRecord) -> FrameTrace:
        intensity, color = dataset.load_intensity(rec.rgb_path)
        if not len(self.store):
            kf = self._kf_lane.submit(self._create_keyframe, index, rec, intensity, color,
                                      RigidPose.identity(), None).result()
            self._prev_world = kf.pose
            return self._record(FrameTrace(index, rec.timestamp, kf.id, RigidPose.identity(), True))

        snap = self.store.snapshot()
        nearest = find_nearest_keyframe(self._prev_world, snap)
        kf_pose = dict((k.id, p) for k, p in snap)[nearest.id]
        t0 = time.perf_counter()
        res = estimate_pose(nearest, intensity, self._prev_world @ kf_pose.inverse(), self.tracking,
                            keyframe_pose=kf_pose)
        track_time = time.perf_counter() - t0

        if should_create_keyframe(res.world_pose, kf_pose, self.cfg.policy_for(nearest)):
            previous = self.store[-1]
            kf = self._kf_lane.submit(self._create_keyframe, index, rec, intensity, color,
                                      res.world_pose, (nearest, kf_pose)).result()
            self._submit_integration(previous)
            self._prev_world = kf.pose
            return self._record(FrameTrace(index, rec.timestamp, kf.id, RigidPose.identity(), True, track_time))

        trace = FrameTrace(index, rec.timestamp, nearest.id, res.relative_pose, False, track_time)
        if self.cfg.refinement:
            t0 = time.perf_counter()
            st = nearest.state
            obs = compute_observations(nearest, intensity, res.relative_pose, self.stereo, state=st)
            codes, counts = np.unique(obs.status, return_counts=True)
            trace.status_counts = {int(c): int(n) for c, n in zip(codes, counts)}
            if trace.status_counts.get(VALID, 0):
                new = refine_keyframe(nearest, obs, state=st)
                if self.cfg.dump_generations:
                    self.generation_dumps.append((nearest.id, new))
            trace.refine_time = time.perf_counter() - t0
            logger.debug("frame %d: %d valid, %d degenerate", index, trace.status_counts.get(VALID, 0),
                         trace.status_counts.get(DEGENERATE, 0))
        self._prev_world = res.world_pose
        return self._record(trace)

    def _record(self, trace: FrameTrace) -> FrameTrace:
        self.traces.append(trace)
        return trace

    def finish(self) -> None:
        """Integrate the last key-frame and wait for the key-frame lane to drain."""
        if len(self.store):
            self._submit_integration(self.store[-1])
        try:
            for fut in self._pending:
                fut.result()
        finally:
            self._kf_lane.shutdown(wait=True)

    def world_poses(self) -> list[tuple[float, RigidPose]]:
        """Per-frame world-to-camera poses composed with the final key-frame poses."""
        kf_poses = {k.id: p for k, p in self.store.snapshot()}
        return [(t.timestamp, t.relative_pose @ kf_poses[t.keyframe_id]) for t in self.traces]


# --- artefacts ------------------------------------------------------------------------


def _write_artifacts(pipe: Pipeline, out: Path) -> None:
    dataset.write_trajectory([(ts, W.inverse()) for ts, W in pipe.world_poses()], out / TRAJECTORY_FILE)
    kdir = out / "keyframes"
    kdir.mkdir(exist_ok=True)
    dumps = []
    for kf in pipe.store.keyframes():
        st = kf.state
        stem = f"kf_{kf.id:04d}"
        d = KeyframeDump(kf.id, kf.frame_id, kf.timestamp, st.generation, kdir / f"{stem}_depth.png",
                         kdir / f"{stem}_depth.f32", kdir / f"{stem}_uncertainty.f32")
        dataset.write_depth_png(st.depth, d.depth_png)
        dataset.write_f32(st.depth, d.depth_f32)
        dataset.write_f32(st.uncertainty, d.uncertainty_f32)
        if kf.labels is not None:
            dataset.write_label_png(kf.labels.labels, kdir / f"{stem}_labels.png")
        dumps.append(d)
    write_keyframe_index(out, dumps)
    if pipe.generation_dumps:
        gdir = kdir / "generations"
        gdir.mkdir(exist_ok=True)
        for kf_id, st in pipe.generation_dumps:
            dataset.write_f32(st.depth, gdir / f"kf_{kf_id:04d}_g{st.generation:04d}_depth.f32")
            dataset.write_f32(st.uncertainty, gdir / f"kf_{kf_id:04d}_g{st.generation:04d}_uncertainty.f32")
    lines = ["# frame track_s refine_s keyframe valid_pixels"]
    for t in pipe.traces:
        if t.index == 0 and t.created_keyframe:
            continue
        lines.append(f"{t.index} {t.track_time:.6f} {t.refine_time:.6f} {int(t.created_keyframe)} "
                     f"{t.status_counts.get(VALID, 0)}")
    (out / TIMINGS_FILE).write_text("\n".join(lines) + "\n", encoding="ascii")
    pipe.graph.write_g2o(out / GRAPH_FILE)
    if pipe.model is not None:
        pipe.model.save(out / MODEL_FILE)


def run(cfg: PipelineConfig, records: list[dataset.FrameRecord] | None = None, provider=None,
        K: CameraIntrinsics | None = None) -> RunArtifacts:
    """Process a sequence and write all run artefacts to ``cfg.output``.

    Raises:
        SlamError: any module error, re-raised with the frame index in its
            message. On TrackingLost the artefacts for the frames processed so
            far are written before the error propagates.
    """
    if records is None:
        records = dataset.load_sequence(cfg.dataset, cfg.associations)
    if cfg.max_frames > 0:
        records = records[: cfg.max_frames]
    f_train = None
    if K is None:
        K, f_train = load_intrinsics(cfg)
    if provider is None:
        provider = make_provider(cfg, records, K, f_train)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / CONFIG_FILE)

    handler = logging.FileHandler(out / LOG_FILE, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg_logger = logging.getLogger("densemono")
    pkg_logger.addHandler(handler)
    old_level = pkg_logger.level
    pkg_logger.setLevel(logging.INFO)
    pipe = Pipeline(cfg, K, provider)
    try:
        logger.info("run: %d frames, output %s", len(records), out)
        try:
            for i, rec in enumerate(records):
                try:
                    pipe.process(i, rec)
                except SlamError as exc:
                    raise _with_frame(exc, i) from exc
        except TrackingLost as exc:
            logger.error("%s; writing partial artefacts", exc)
            pipe.finish()
            _write_artifacts(pipe, out)
            raise
        finally:
            pipe.finish()
        _write_artifacts(pipe, out)
        logger.info("run finished: %d key-frames", len(pipe.store))
    finally:
        pkg_logger.removeHandler(handler)
        pkg_logger.setLevel(old_level)
        handler.close()
    return RunArtifacts(out, pipe.traces, pipe.store.keyframes(), pipe.world_poses(), pipe.model, pipe.graph)


def evaluate(run_dir, gt_dir, align: str = "rigid", associations: str = "associations.txt",
             figures: bool = True) -> RunMetrics:
    """Score a finished run; writes ``metrics.txt`` and figures into the run directory."""
    run_dir = Path(run_dir)
    for required in (TRAJECTORY_FILE, "keyframes/index.txt"):
        if not (run_dir / required).is_file():
            raise MissingFile(f"{run_dir / required}: run directory is incomplete")
    metrics = evaluate_run(run_dir, gt_dir, align, associations)
    write_report(metrics, run_dir / METRICS_FILE)
    if figures:
        from .plotting import render_report_figures

        render_report_figures(metrics, run_dir)
    return metrics


def export(run_dir, mode: str = "rgb", path=None) -> Path:
    """Write the run's global model as PLY coloured by ``mode`` (``rgb`` or ``label``)."""
    run_dir = Path(run_dir)
    model = GlobalModel.load(run_dir / MODEL_FILE)
    path = Path(path) if path is not None else run_dir / f"model_{mode}.ply"
    export_ply(model, path, color_mode=mode)
    return path
