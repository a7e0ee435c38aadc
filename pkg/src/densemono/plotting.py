"""Report figures rendered to image files with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import RunMetrics, TrajectoryPair, align_rigid  # noqa: E402


def plot_trajectory(pair: TrajectoryPair, path, align: str = "rigid") -> Path:
    """Top-down (x-z) view of ground truth and the aligned estimate."""
    est, gt = pair.positions()
    if align == "rigid" and len(est) >= 2:
        R, t = align_rigid(est, gt)
        est = est @ R.T + t
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(gt[:, 0], gt[:, 2], "-", color="0.3", label="ground truth")
    ax.plot(est[:, 0], est[:, 2], "-", color="tab:red", label=f"estimate ({align})")
    for a, b in zip(est, gt):
        ax.plot([a[0], b[0]], [a[2], b[2]], "-", color="tab:orange", lw=0.5, alpha=0.6)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    ax.set_title("Trajectory")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_depth_accuracy(metrics: RunMetrics, path) -> Path:
    """Per-key-frame percentage of pixels within 10% of ground truth."""
    ids = [k for k, _ in metrics.per_keyframe]
    vals = [100 * f if np.isfinite(f) else 0.0 for _, f in metrics.per_keyframe]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([str(k) for k in ids], vals, color="tab:blue")
    if metrics.percent_correct is not None:
        ax.axhline(metrics.percent_correct, color="k", ls="--", lw=1, label=f"all: {metrics.percent_correct:.1f}%")
        ax.legend(loc="best")
    ax.set_ylim(0, 100)
    ax.set_xlabel("key-frame")
    ax.set_ylabel("correct depth [%]")
    ax.set_title("Depth accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def render_report_figures(metrics: RunMetrics, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if metrics.trajectory is not None and len(metrics.trajectory) >= 2:
        written.append(plot_trajectory(metrics.trajectory, out / "trajectory.png", metrics.alignment))
    if metrics.per_keyframe:
        written.append(plot_depth_accuracy(metrics, out / "depth_accuracy.png"))
    return written
