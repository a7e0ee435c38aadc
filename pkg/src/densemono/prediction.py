"""Per-key-frame depth and semantic predictions read from disk.

A prediction directory holds ``<frame_id>.png`` (16-bit, divisor 5000) or
``<frame_id>.f32`` depth maps, optional ``<frame_id>_labels.png`` label maps
and a ``manifest.txt`` declaring the focal length the predictor was trained
with (``f_train``, pixels at the working resolution) plus ``classes``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from . import dataset
from .errors import InvalidPrediction, MissingFile, MissingPrediction, NonPositiveFocal


@dataclass(frozen=True)
class PredictedDepthMap:
    depth: np.ndarray
    f_train: float

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if not np.all(np.isfinite(d)) or not np.all(d > 0):
            raise InvalidPrediction("predicted depth must be finite and positive everywhere")
        if not self.f_train > 0:
            raise NonPositiveFocal(f"f_train = {self.f_train}")
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)


@dataclass(frozen=True)
class SemanticLabelMap:
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise InvalidPrediction(f"label ids must lie in [0, {self.num_classes})")
        object.__setattr__(self, "labels", lab)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def adjust_scale(prediction: PredictedDepthMap, f_cur: float) -> np.ndarray:
    """Rescale raw predicted depth by the focal ratio ``f_cur / f_train``."""
    if not f_cur > 0:
        raise NonPositiveFocal(f"f_cur = {f_cur}")
    if f_cur == prediction.f_train:
        return prediction.depth.copy()
    return (f_cur / prediction.f_train) * prediction.depth


def inpaint_nearest(depth: np.ndarray) -> np.ndarray:
    """Fill non-finite or non-positive pixels with the nearest valid value."""
    invalid = ~(np.isfinite(depth) & (depth > 0))
    if not invalid.any():
        return depth.astype(np.float64, copy=True)
    if invalid.all():
        raise InvalidPrediction("depth map has no valid pixels")
    _, (iy, ix) = ndimage.distance_transform_edt(invalid, return_indices=True)
    return depth[iy, ix].astype(np.float64)


def synthesize_degraded(gt_depth, blur_radius: float, scale_bias: float, noise_sigma: float, seed: int) -> np.ndarray:
    """Stand-in prediction: blurred, globally biased, multiplicatively noisy GT.

    ``blur_radius`` is the Gaussian sigma in pixels. The result depends only
    on the arguments (the RNG is seeded locally).
    """
    d = inpaint_nearest(np.asarray(gt_depth, dtype=np.float64))
    if blur_radius > 0:
        d = ndimage.gaussian_filter(d, sigma=blur_radius, mode="nearest")
    d = d * scale_bias
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        d = d * np.clip(1.0 + noise_sigma * rng.standard_normal(d.shape), 0.05, None)
    return d


class DirectoryProvider:
    """Reads predictions written by an external inference script."""

    def __init__(self, pred_dir, f_train: float | None = None, width=dataset.WORKING_WIDTH, height=dataset.WORKING_HEIGHT):
        self.pred_dir = Path(pred_dir)
        self.width, self.height = width, height
        manifest = self.pred_dir / "manifest.txt"
        kv = dataset.read_key_value(manifest) if manifest.is_file() else {}
        if "f_train" in kv:
            f_train = float(kv["f_train"])
        if f_train is None:
            raise MissingFile(f"{manifest}: f_train not declared")
        if not f_train > 0:
            raise NonPositiveFocal(f"f_train = {f_train}")
        self.f_train = f_train
        self.depth_divisor = float(kv.get("depth_divisor", dataset.TUM_DEPTH_DIVISOR))
        names = kv.get("classes", "")
        self.class_names = tuple(n.strip() for n in names.split(",") if n.strip())

    def fetch_prediction(self, frame_id: str) -> tuple[PredictedDepthMap, SemanticLabelMap | None]:
        png = self.pred_dir / f"{frame_id}.png"
        f32 = self.pred_dir / f"{frame_id}.f32"
        if f32.is_file():
            raw = dataset.read_f32(f32)
        elif png.is_file():
            raw = dataset.load_depth_png(png, self.depth_divisor)
        else:
            raise MissingPrediction(f"no prediction for frame {frame_id} in {self.pred_dir}")
        raw = dataset.resize_nearest(raw, self.width, self.height)
        pred = PredictedDepthMap(raw, self.f_train)
        labels = None
        lab_path = self.pred_dir / f"{frame_id}_labels.png"
        if self.class_names and lab_path.is_file():
            lab = dataset.resize_nearest(dataset.load_label_png(lab_path), self.width, self.height)
            labels = SemanticLabelMap(lab, self.class_names)
        return pred, labels


class DegradedGroundTruthProvider:
    """Synthesises predictions from ground-truth depth for testing.

    ``gt_lookup(frame_id)`` returns the GT depth map (NaN for holes) or None.
    Seeds are derived from ``seed`` and the frame id so repeated fetches of
    one frame are identical.
    """

    def __init__(
        self,
        gt_lookup: Callable[[str], np.ndarray | None],
        f_train: float,
        blur_radius: float = 0.0,
        scale_bias: float = 1.0,
        noise_sigma: float = 0.0,
        seed: int = 0,
        label_lookup: Callable[[str], np.ndarray | None] | None = None,
        class_names: tuple[str, ...] = (),
    ):
        if not f_train > 0:
            raise NonPositiveFocal(f"f_train = {f_train}")
        self.gt_lookup = gt_lookup
        self.f_train = f_train
        self.blur_radius, self.scale_bias, self.noise_sigma = blur_radius, scale_bias, noise_sigma
        self.seed = seed
        self.label_lookup = label_lookup
        self.class_names = tuple(class_names)

    def _frame_seed(self, frame_id: str) -> int:
        h = 2166136261
        for ch in frame_id.encode():
            h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
        return (self.seed * 1000003 + h) & 0x7FFFFFFF

    def fetch_prediction(self, frame_id: str):
        gt = self.gt_lookup(frame_id)
        if gt is None:
            raise MissingPrediction(f"no ground-truth depth to synthesise a prediction for {frame_id}")
        d = synthesize_degraded(gt, self.blur_radius, self.scale_bias, self.noise_sigma, self._frame_seed(frame_id))
        labels = None
        if self.label_lookup is not None and self.class_names:
            lab = self.label_lookup(frame_id)
            if lab is not None:
                labels = SemanticLabelMap(lab, self.class_names)
        return PredictedDepthMap(d, self.f_train), labels
