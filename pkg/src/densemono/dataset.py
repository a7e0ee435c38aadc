"""Benchmark sequence loading, image conversion and sampling primitives.

Sequences follow the TUM RGB-D layout (``rgb/``, ``depth/``,
``groundtruth.txt`` and an association file). ICL-NUIM sequences converted to
that layout load the same way.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoError, MalformedLine, MissingFile, OutOfBounds, UnsupportedFormat
from .geometry import CameraIntrinsics, RigidPose

logger = logging.getLogger(__name__)

WORKING_WIDTH = 320
WORKING_HEIGHT = 240
ASSOCIATION_TOLERANCE = 0.02
TUM_DEPTH_DIVISOR = 5000.0


@dataclass(frozen=True)
class FrameRecord:
    timestamp: float
    rgb_path: Path
    gt_depth_path: Path | None = None
    gt_pose: RigidPose | None = None  # camera-to-world, as stored by TUM

    @property
    def frame_id(self) -> str:
        return self.rgb_path.stem


# --- text files ---------------------------------------------------------------


def _data_lines(path: Path):
    """Yield ``(line_number, tokens)`` for non-comment, non-blank lines."""
    if not path.is_file():
        raise MissingFile(str(path))
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield n, line.split()


def read_trajectory(path) -> list[tuple[float, RigidPose]]:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines."""
    poses = []
    for n, tok in _data_lines(Path(path)):
        if len(tok) != 8:
            raise MalformedLine(n, f"expected 8 tokens, got {len(tok)}")
        try:
            vals = [float(v) for v in tok]
        except ValueError as exc:
            raise MalformedLine(n, str(exc)) from None
        poses.append((vals[0], RigidPose.from_quaternion(vals[1:4], vals[4:8])))
    poses.sort(key=lambda p: p[0])
    return poses


def write_trajectory(poses, path) -> None:
    """Write poses in TUM format, one ASCII line per pose, 6 decimals."""
    lines = []
    for ts, T in poses:
        q = T.quaternion()
        vals = [*T.translation, *q]
        # avoid "-0.000000"
        vals = [0.0 if abs(v) < 5e-7 else v for v in vals]
        lines.append(f"{ts:.6f} " + " ".join(f"{v:.6f}" for v in vals))
    try:
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="ascii")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_file_list(path) -> list[tuple[float, str]]:
    """Read a TUM ``timestamp filename`` list such as ``rgb.txt``."""
    out = []
    for n, tok in _data_lines(Path(path)):
        if len(tok) < 2:
            raise MalformedLine(n, "expected 'timestamp filename'")
        try:
            out.append((float(tok[0]), tok[1]))
        except ValueError:
            raise MalformedLine(n, f"bad timestamp {tok[0]!r}") from None
    out.sort()
    return out


def associate(
    queries: list[float], references: list[float], tolerance: float = ASSOCIATION_TOLERANCE
) -> dict[int, int]:
    """One-to-one nearest-timestamp matching within ``tolerance``.

    Candidate pairs are accepted greedily by increasing time difference, as
    in the TUM ``associate.py`` tool. Returns ``{query_index: reference_index}``.
    """
    if not queries or not references:
        return {}
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(references, dtype=np.float64)
    order = np.argsort(r)
    rs = r[order]
    candidates = []
    for i, t in enumerate(q):
        lo = np.searchsorted(rs, t - tolerance, side="left")
        hi = np.searchsorted(rs, t + tolerance, side="right")
        for k in range(lo, hi):
            candidates.append((abs(rs[k] - t), i, int(order[k])))
    candidates.sort()
    used_q, used_r, pairs = set(), set(), {}
    for _, i, j in candidates:
        if i in used_q or j in used_r:
            continue
        used_q.add(i)
        used_r.add(j)
        pairs[i] = j
    return pairs


def load_sequence(root, associations) -> list[FrameRecord]:
    """Load a sequence described by an association file.

    Lines are ``ts_rgb rgb_file`` or ``ts_rgb rgb_file ts_depth depth_file``;
    the first data line fixes the expected token count. Ground-truth poses are
    attached from ``<root>/groundtruth.txt`` when that file exists.
    """
    root = Path(root)
    assoc_path = Path(associations)
    if not assoc_path.is_absolute() and not assoc_path.exists():
        assoc_path = root / assoc_path
    records = []
    expected = None
    for n, tok in _data_lines(assoc_path):
        if expected is None:
            if len(tok) not in (2, 4):
                raise MalformedLine(n, f"expected 2 or 4 tokens, got {len(tok)}")
            expected = len(tok)
        if len(tok) != expected:
            raise MalformedLine(n, f"expected {expected} tokens, got {len(tok)}")
        try:
            ts = float(tok[0])
        except ValueError:
            raise MalformedLine(n, f"bad timestamp {tok[0]!r}") from None
        depth = root / tok[3] if expected == 4 else None
        records.append(FrameRecord(ts, root / tok[1], depth))
    records.sort(key=lambda r: r.timestamp)
    for a, b in zip(records, records[1:]):
        if not b.timestamp > a.timestamp:
            raise MalformedLine(0, f"duplicate timestamp {b.timestamp}")

    gt_file = root / "groundtruth.txt"
    if gt_file.is_file():
        gt = read_trajectory(gt_file)
        pairs = associate([r.timestamp for r in records], [t for t, _ in gt])
        records = [
            FrameRecord(r.timestamp, r.rgb_path, r.gt_depth_path, gt[pairs[i]][1] if i in pairs else None)
            for i, r in enumerate(records)
        ]
    return records


def read_key_value(path) -> dict[str, str]:
    out = {}
    for n, tok in _data_lines(Path(path)):
        line = " ".join(tok)
        if "=" not in line:
            raise MalformedLine(n, "expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.split("#", 1)[0].strip()
    return out


def load_camera(path) -> tuple[CameraIntrinsics, float | None]:
    """Read a ``key=value`` camera file; returns intrinsics and ``f_train``.

    Intrinsics are rescaled to the working resolution.
    """
    kv = read_key_value(path)
    try:
        K = CameraIntrinsics(
            float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]),
            int(kv["width"]), int(kv["height"]),
        )
    except KeyError as exc:
        raise MalformedLine(0, f"camera file missing {exc.args[0]}") from None
    f_train = float(kv["f_train"]) if kv.get("f_train") else None
    return working_intrinsics(K), f_train


def working_intrinsics(K: CameraIntrinsics) -> CameraIntrinsics:
    if (K.width, K.height) == (WORKING_WIDTH, WORKING_HEIGHT):
        return K
    return K.resized(WORKING_WIDTH, WORKING_HEIGHT)


# --- images -------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Pixel-centre aligned bilinear resampling of a 2-D float image."""
    h, w = img.shape
    if (w, h) == (width, height):
        return img.astype(np.float64, copy=True)
    xs = np.clip((np.arange(width) + 0.5) * (w / width) - 0.5, 0, w - 1)
    ys = np.clip((np.arange(height) + 0.5) * (h / height) - 0.5, 0, h - 1)
    X, Y = np.meshgrid(xs, ys)
    return sample_bilinear_array(img.astype(np.float64), X, Y)


def resize_nearest(img: np.ndarray, width: int, height: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (w, h) == (width, height):
        return img.copy()
    xi = np.minimum(((np.arange(width) + 0.5) * (w / width)).astype(int), w - 1)
    yi = np.minimum(((np.arange(height) + 0.5) * (h / height)).astype(int), h - 1)
    return img[yi[:, None], xi[None, :]]


def to_intensity(rgb, width: int = WORKING_WIDTH, height: int = WORKING_HEIGHT) -> np.ndarray:
    """8-bit RGB to luminance in ``[0, 1]`` at the working resolution."""
    arr = np.asarray(rgb)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise UnsupportedFormat(f"expected 8-bit RGB, got {arr.dtype} {arr.shape}")
    rgbf = arr[..., :3].astype(np.float64)
    lum = (0.299 * rgbf[..., 0] + 0.587 * rgbf[..., 1] + 0.114 * rgbf[..., 2]) / 255.0
    return resize_bilinear(lum, width, height)


def load_rgb(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P"):
                raise UnsupportedFormat(f"{path}: image mode {im.mode}")
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc


def load_intensity(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(intensity, rgb)`` both at working resolution."""
    rgb = load_rgb(path)
    color = resize_nearest(rgb, WORKING_WIDTH, WORKING_HEIGHT)
    return to_intensity(rgb), color


def _read_png_u16(path: Path) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        with Image.open(path) as im:
            if im.mode not in ("I;16", "I;16B", "I", "L"):
                raise UnsupportedFormat(f"{path}: expected single-channel PNG, got {im.mode}")
            arr = np.asarray(im)
    except OSError as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    if arr.ndim != 2:
        raise UnsupportedFormat(f"{path}: expected one channel")
    return arr.astype(np.int64)


def load_depth_png(path, scale_divisor: float = TUM_DEPTH_DIVISOR) -> np.ndarray:
    """16-bit depth PNG to metres; raw 0 becomes NaN (no measurement)."""
    raw = _read_png_u16(Path(path))
    depth = raw.astype(np.float64) / float(scale_divisor)
    depth[raw == 0] = np.nan
    return depth


def write_depth_png(depth: np.ndarray, path, scale_divisor: float = TUM_DEPTH_DIVISOR) -> None:
    d = np.where(np.isfinite(depth) & (depth > 0), depth, 0.0)
    raw = np.clip(np.round(d * scale_divisor), 0, 65535).astype(np.uint16)
    try:
        Image.fromarray(raw).save(path)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_label_png(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise UnsupportedFormat(f"{path}: expected 8-bit indexed labels, got {im.mode}")
        return np.asarray(im).astype(np.int64)


def write_label_png(labels: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(labels).astype(np.uint8), mode="L").save(path)


def write_f32(array: np.ndarray, path) -> None:
    """Raw map: little-endian uint32 width, uint32 height, then float32 rows."""
    a = np.ascontiguousarray(array, dtype="<f4")
    h, w = a.shape
    try:
        with open(path, "wb") as fh:
            fh.write(np.array([w, h], dtype="<u4").tobytes())
            fh.write(a.tobytes())
    except OSError as exc:
        raise IoError(str(exc)) from exc


def read_f32(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    buf = path.read_bytes()
    if len(buf) < 8:
        raise UnsupportedFormat(f"{path}: truncated header")
    w, h = np.frombuffer(buf[:8], dtype="<u4")
    if len(buf) != 8 + 4 * int(w) * int(h):
        raise UnsupportedFormat(f"{path}: size does not match {w}x{h}")
    return np.frombuffer(buf[8:], dtype="<f4").reshape(int(h), int(w)).astype(np.float64)


# --- sampling -----------------------------------------------------------------


def sample_bilinear(img: np.ndarray, u) -> float:
    x, y = float(u[0]), float(u[1])
    h, w = img.shape
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise OutOfBounds(f"({x}, {y}) outside [0, {w - 1}] x [0, {h - 1}]")
    return float(sample_bilinear_array(img, np.array([x]), np.array([y]))[0])


def _cells(img, x, y):
    h, w = img.shape
    x0 = np.clip(np.floor(x).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.intp), 0, max(h - 2, 0))
    ax = x - x0
    ay = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1], ax, ay


def sample_bilinear_array(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorised bilinear lookup; coordinates must lie in ``[0, w-1] x [0, h-1]``."""
    a, b, c, d, ax, ay = _cells(img, x, y)
    top = a + ax * (b - a)
    bot = c + ax * (d - c)
    return top + ay * (bot - top)


def sample_bilinear_with_gradient(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Bilinear value and the exact partial derivatives of the interpolant."""
    a, b, c, d, ax, ay = _cells(img, x, y)
    top = a + ax * (b - a)
    bot = c + ax * (d - c)
    val = top + ay * (bot - top)
    gx = (1 - ay) * (b - a) + ay * (d - c)
    gy = bot - top
    return val, gx, gy


def image_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient; one-sided on the outermost rows/columns."""
    gy, gx = np.gradient(img)
    return gx, gy


@dataclass(frozen=True)
class GradientMap:
    gx: np.ndarray
    gy: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.gx, self.gy)


def compute_gradient(img: np.ndarray) -> GradientMap:
    return GradientMap(*image_gradient(img))


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    return compute_gradient(img).magnitude


def downsample(img: np.ndarray) -> np.ndarray:
    """2x2 box average (drops a trailing odd row/column)."""
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    v = img[: 2 * h2, : 2 * w2]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])
