"""Global labelled surfel model built from key-frames.

Each element stores a world position, unit normal, colour, footprint radius,
confidence weight and a per-class label histogram. Integrating a key-frame
projects the existing elements into it; a pixel whose back-projected point
lies within an element's radius and whose normal agrees to within 30
degrees updates that element by weighted running averages and adds one
vote to the histogram bin of its label. Unmatched pixels become new
elements. An element's label is the histogram argmax.
"""
from __future__ import annotations

import colorsys
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyModel, IoError, UnlabeledElement, UnsupportedFormat
from .geometry import CameraIntrinsics, RigidPose, vertex_map

# floor, vertical structure, large structure/furniture, small structure
PALETTE = np.array([[194, 160, 98], [98, 140, 194], [200, 80, 70], [90, 180, 90]], dtype=np.uint8)


def class_color(class_id: int) -> np.ndarray:
    """Fixed colour per class; ids past the base palette get golden-ratio hues."""
    if class_id < len(PALETTE):
        return PALETTE[class_id]
    h = (class_id * 0.618033988749895) % 1.0
    return np.round(255 * np.array(colorsys.hsv_to_rgb(h, 0.65, 0.9))).astype(np.uint8)


@dataclass
class ModelElement:
    position: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    radius: float
    confidence_weight: float
    label_histogram: np.ndarray


def element_label(e: ModelElement | np.ndarray) -> int:
    """Argmax of the label histogram, ties to the lowest class id.

    Raises:
        UnlabeledElement: the histogram is empty or all zeros.
    """
    hist = e.label_histogram if isinstance(e, ModelElement) else np.asarray(e)
    if hist.size == 0 or not np.any(hist > 0):
        raise UnlabeledElement("element has never received a semantic label")
    return int(np.argmax(hist))


def normal_map(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame unit normals from central differences of the vertex map, facing the camera."""
    V = vertex_map(depth, K)
    if min(depth.shape) < 2:
        # no neighbours to difference: fall back to the reversed viewing ray
        with np.errstate(invalid="ignore", divide="ignore"):
            return -V / np.linalg.norm(V, axis=-1, keepdims=True)
    dy, dx = np.gradient(V, axis=(0, 1))
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
    flip = np.sum(n * V, axis=-1) > 0
    n[flip] *= -1.0
    return n


@dataclass
class IntegrationResult:
    """Per-pixel element index (-1 where the pixel was not used)."""

    element_index: np.ndarray
    associated: int
    inserted: int


class GlobalModel:
    """Structure-of-arrays surfel store; a single writer, snapshot readers."""

    def __init__(self, num_classes: int = 0, normal_angle_deg: float = 30.0):
        self.num_classes = num_classes
        self.cos_normal = float(np.cos(np.deg2rad(normal_angle_deg)))
        self.position = np.zeros((0, 3))
        self.normal = np.zeros((0, 3))
        self.color = np.zeros((0, 3))
        self.radius = np.zeros(0)
        self.weight = np.zeros(0)
        self.histogram = np.zeros((0, num_classes))
        self.sources: list[tuple[int, int]] = []
        self._lock = threading.Lock()

    def __len__(self):
        return len(self.weight)

    def element(self, i: int) -> ModelElement:
        return ModelElement(self.position[i].copy(), self.normal[i].copy(), self.color[i].copy(),
                            float(self.radius[i]), float(self.weight[i]), self.histogram[i].copy())

    def labels(self) -> np.ndarray:
        """Label per element; raises UnlabeledElement if any element has no votes."""
        if self.histogram.shape[1] == 0 or np.any(~np.any(self.histogram > 0, axis=1)):
            raise UnlabeledElement("model contains elements without semantic labels")
        return np.argmax(self.histogram, axis=1)

    def _grow_classes(self, c: int) -> None:
        if c > self.num_classes:
            self.histogram = np.concatenate([self.histogram, np.zeros((len(self), c - self.num_classes))], axis=1)
            self.num_classes = c

    def integrate(self, depth: np.ndarray, pose: RigidPose, K: CameraIntrinsics, labels: np.ndarray | None = None,
                  num_classes: int | None = None, color: np.ndarray | None = None, intensity: np.ndarray | None = None,
                  source: tuple[int, int] = (-1, -1)) -> IntegrationResult:
        """Fuse one depth map taken from world-to-camera ``pose``."""
        H, W = depth.shape
        if labels is not None:
            self._grow_classes(int(num_classes if num_classes is not None else labels.max() + 1))
        n_cam = normal_map(depth, K)
        V_cam = vertex_map(depth, K)
        valid = np.isfinite(depth) & (depth > 0) & np.all(np.isfinite(n_cam), axis=-1)
        R_wc = pose.rotation.T
        c_w = -R_wc @ pose.translation
        P_w = V_cam @ R_wc.T + c_w
        N_w = n_cam @ R_wc.T
        rad = depth / K.fx
        if color is not None:
            col = np.asarray(color, dtype=np.float64).reshape(H, W, 3)
        elif intensity is not None:
            col = np.repeat(255.0 * np.asarray(intensity, dtype=np.float64)[..., None], 3, axis=-1)
        else:
            col = np.full((H, W, 3), 128.0)

        index = np.full((H, W), -1, dtype=np.int64)
        with self._lock:
            n_old = len(self)
            if n_old:
                Pc = self.position @ pose.rotation.T + pose.translation
                z = Pc[:, 2]
                front = z > 1e-9
                zs = np.where(front, z, 1.0)
                px = np.rint(K.fx * Pc[:, 0] / zs + K.cx)
                py = np.rint(K.fy * Pc[:, 1] / zs + K.cy)
                ok = front & (px >= 0) & (px <= W - 1) & (py >= 0) & (py <= H - 1)
                cand = np.nonzero(ok)[0]
                xi = px[cand].astype(np.int64)
                yi = py[cand].astype(np.int64)
                pv = valid[yi, xi]
                cand, xi, yi = cand[pv], xi[pv], yi[pv]
                dist = np.linalg.norm(self.position[cand] - P_w[yi, xi], axis=-1)
                cosn = np.sum(self.normal[cand] * N_w[yi, xi], axis=-1)
                match = (dist < self.radius[cand]) & (cosn > self.cos_normal)
                cand, xi, yi, dist = cand[match], xi[match], yi[match], dist[match]
                # one element per pixel: the closest, lowest index on ties
                order = np.lexsort((cand, dist, yi * W + xi))
                pix = (yi * W + xi)[order]
                first = np.ones(len(order), dtype=bool)
                first[1:] = pix[1:] != pix[:-1]
                sel = order[first]
                index[yi[sel], xi[sel]] = cand[sel]

            assoc = valid & (index >= 0)
            ys, xs = np.nonzero(assoc)
            ids = index[ys, xs]
            w_old = self.weight[ids]
            w_new = w_old + 1.0
            self.position[ids] = (w_old[:, None] * self.position[ids] + P_w[ys, xs]) / w_new[:, None]
            nsum = w_old[:, None] * self.normal[ids] + N_w[ys, xs]
            self.normal[ids] = nsum / np.linalg.norm(nsum, axis=-1, keepdims=True)
            self.color[ids] = (w_old[:, None] * self.color[ids] + col[ys, xs]) / w_new[:, None]
            self.radius[ids] = np.minimum(self.radius[ids], rad[ys, xs])
            self.weight[ids] = w_new
            if labels is not None:
                self.histogram[ids, labels[ys, xs]] += 1.0

            fresh = valid & (index < 0)
            ys, xs = np.nonzero(fresh)
            m = len(ys)
            index[ys, xs] = n_old + np.arange(m)
            hist = np.zeros((m, self.num_classes))
            if labels is not None:
                hist[np.arange(m), labels[ys, xs]] = 1.0
            self.position = np.concatenate([self.position, P_w[ys, xs]])
            self.normal = np.concatenate([self.normal, N_w[ys, xs]])
            self.color = np.concatenate([self.color, col[ys, xs]])
            self.radius = np.concatenate([self.radius, rad[ys, xs]])
            self.weight = np.concatenate([self.weight, np.ones(m)])
            self.histogram = np.concatenate([self.histogram, hist])
            self.sources.append(tuple(source))
        return IntegrationResult(index, int(assoc.sum()), m)

    def snapshot(self) -> dict[str, np.ndarray]:
        with self._lock:
            return {
                "position": self.position.copy(),
                "normal": self.normal.copy(),
                "color": self.color.copy(),
                "radius": self.radius.copy(),
                "weight": self.weight.copy(),
                "histogram": self.histogram.copy(),
                "sources": np.array(self.sources, dtype=np.int64).reshape(-1, 2),
            }

    def save(self, path) -> None:
        np.savez(path, **self.snapshot())

    @classmethod
    def load(cls, path) -> GlobalModel:
        p = Path(path)
        if not p.is_file():
            from .errors import MissingFile

            raise MissingFile(f"{p}: model dump not found")
        with np.load(p) as data:
            model = cls(num_classes=data["histogram"].shape[1])
            model.position = data["position"]
            model.normal = data["normal"]
            model.color = data["color"]
            model.radius = data["radius"]
            model.weight = data["weight"]
            model.histogram = data["histogram"]
            model.sources = [tuple(int(v) for v in row) for row in data["sources"]]
        return model


def integrate_keyframe(model: GlobalModel, kf, pose: RigidPose | None = None) -> IntegrationResult:
    """Fuse a key-frame's current depth at its (optimised) pose."""
    st = kf.state
    lab = kf.labels
    return model.integrate(
        st.depth,
        pose if pose is not None else kf.pose,
        kf.K,
        labels=None if lab is None else lab.labels,
        num_classes=None if lab is None else lab.num_classes,
        color=kf.color,
        intensity=kf.intensity,
        source=(kf.id, st.generation),
    )


# --- PLY -------------------------------------------------------------------------------

_PLY_PROPS = [("x", "f4"), ("y", "f4"), ("z", "f4"), ("nx", "f4"), ("ny", "f4"), ("nz", "f4"),
              ("red", "u1"), ("green", "u1"), ("blue", "u1")]
_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8", "uchar": "u1", "uint8": "u1",
              "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4", "short": "i2", "ushort": "u2", "char": "i1"}


def export_ply(model: GlobalModel, path, color_mode: str = "rgb", binary: bool = True) -> int:
    """Write the model as a PLY point cloud with normals and colours.

    ``color_mode`` is ``"rgb"`` (averaged colour) or ``"label"`` (class
    palette). Returns the vertex count.

    Raises:
        EmptyModel: nothing to export; no file is written.
        UnlabeledElement: label mode on a model without labels.
        IoError: the file cannot be written.
    """
    snap = model.snapshot()
    n = len(snap["weight"])
    if n == 0:
        raise EmptyModel("model has no elements")
    if color_mode == "rgb":
        rgb = np.clip(np.rint(snap["color"]), 0, 255).astype(np.uint8)
    elif color_mode == "label":
        hist = snap["histogram"]
        if hist.shape[1] == 0 or np.any(~np.any(hist > 0, axis=1)):
            raise UnlabeledElement("label export needs semantic labels for every element")
        lab = np.argmax(hist, axis=1)
        table = np.stack([class_color(c) for c in range(hist.shape[1])])
        rgb = table[lab]
    else:
        raise ValueError(f"unknown color mode {color_mode!r}")
    rec = np.empty(n, dtype=[(k, "<" + t) for k, t in _PLY_PROPS])
    for k, col in zip(("x", "y", "z"), snap["position"].T):
        rec[k] = col
    for k, col in zip(("nx", "ny", "nz"), snap["normal"].T):
        rec[k] = col
    for k, col in zip(("red", "green", "blue"), rgb.T):
        rec[k] = col
    names = {"f4": "float", "u1": "uchar"}
    header = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0",
              f"element vertex {n}"]
    header += [f"property {names[t]} {k}" for k, t in _PLY_PROPS]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(head)
            if binary:
                fh.write(rec.tobytes())
            else:
                for r in rec:
                    fh.write((" ".join(f"{r[k]:.7g}" if t == "f4" else str(int(r[k])) for k, t in _PLY_PROPS) + "\n").encode())
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return n


def read_ply(path) -> np.ndarray:
    """Read the vertex element of an ASCII or binary little-endian PLY as a structured array."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise UnsupportedFormat(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt = None
    count = 0
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise UnsupportedFormat("list properties on vertices are not supported")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt == "binary_little_endian":
        dtype = np.dtype([(k, "<" + t) for k, t in props])
        return np.frombuffer(data, dtype=dtype, count=count, offset=body_start).copy()
    if fmt == "ascii":
        dtype = np.dtype([(k, t) for k, t in props])
        rows = data[body_start:].decode("ascii").split("\n")[:count]
        out = np.empty(count, dtype=dtype)
        for i, row in enumerate(rows):
            out[i] = tuple(float(v) if dtype[k].kind == "f" else int(v) for (k, _), v in zip(props, row.split()))
        return out
    raise UnsupportedFormat(f"{path}: unsupported PLY format {fmt}")
