"""Key-frame pose graph with relative SE(3) constraints.

Nodes hold world-to-camera poses ``W_i``. An edge ``(i, j, Z_ij)`` measures
``W_i W_j^-1``, the transform taking camera ``j`` coordinates into camera
``i``; in camera-to-world terms ``C = W^-1`` this is the usual
``C_i^-1 C_j``, and the residual is ``e_ij = log(Z_ij^-1 C_i^-1 C_j)``.
The first node added is the gauge anchor and never moves.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import IoError, NotConnected, SingularSystem
from .geometry import RigidPose, adjoint, pose_distance, relative_pose, se3_exp, se3_log, skew

logger = logging.getLogger(__name__)

SIGMA_EDGE = 0.01
FOV_THRESHOLD = 0.3


def default_information(sigma_translation: float = SIGMA_EDGE, sigma_rotation: float = SIGMA_EDGE) -> np.ndarray:
    return np.diag([1.0 / sigma_translation**2] * 3 + [1.0 / sigma_rotation**2] * 3)


@dataclass(frozen=True)
class GraphEdge:
    i: int
    j: int
    measurement: RigidPose
    information: np.ndarray = field(default_factory=default_information)

    def __post_init__(self):
        info = np.array(self.information, dtype=np.float64)
        if info.shape != (6, 6) or not np.allclose(info, info.T):
            raise ValueError("edge information must be a symmetric 6x6 matrix")
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise ValueError("edge information must be positive definite") from None
        info.setflags(write=False)
        object.__setattr__(self, "information", info)


@dataclass
class OptimizeResult:
    poses: dict[int, RigidPose]
    initial_chi2: float
    chi2: float
    iterations: int


def edge_residual(edge: GraphEdge, W_i: RigidPose, W_j: RigidPose) -> np.ndarray:
    return se3_log(edge.measurement.inverse() @ W_i @ W_j.inverse())


def _ad(xi: np.ndarray) -> np.ndarray:
    A = np.zeros((6, 6))
    W = skew(xi[3:])
    A[:3, :3] = W
    A[:3, 3:] = skew(xi[:3])
    A[3:, 3:] = W
    return A


def _jr_inv(e: np.ndarray) -> np.ndarray:
    """Second-order series of the inverse right Jacobian of SE(3)."""
    A = _ad(e)
    return np.eye(6) + 0.5 * A + A @ A / 12.0


class PoseGraph:
    """Graph of key-frame poses; ids are arbitrary integers, insertion-ordered."""

    def __init__(self):
        self.nodes: dict[int, RigidPose] = {}
        self.edges: list[GraphEdge] = []

    @property
    def anchor(self) -> int | None:
        return next(iter(self.nodes), None)

    def add_node(self, node_id: int, pose: RigidPose) -> None:
        self.nodes[node_id] = pose

    def add_edge(self, edge: GraphEdge) -> None:
        if edge.i not in self.nodes or edge.j not in self.nodes:
            raise KeyError(f"edge ({edge.i}, {edge.j}) references an unknown node")
        self.edges.append(edge)

    def has_edge(self, i: int, j: int) -> bool:
        return any({e.i, e.j} == {i, j} for e in self.edges)

    def is_connected(self) -> bool:
        if len(self.nodes) <= 1:
            return True
        adj: dict[int, set[int]] = {k: set() for k in self.nodes}
        for e in self.edges:
            adj[e.i].add(e.j)
            adj[e.j].add(e.i)
        seen = {self.anchor}
        todo = deque(seen)
        while todo:
            for nb in adj[todo.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    todo.append(nb)
        return len(seen) == len(self.nodes)

    def chi2(self, poses: dict[int, RigidPose] | None = None) -> float:
        poses = poses if poses is not None else self.nodes
        total = 0.0
        for e in self.edges:
            r = edge_residual(e, poses[e.i], poses[e.j])
            total += float(r @ e.information @ r)
        return total

    def optimize(self, max_iterations: int = 50, rel_tol: float = 1e-8) -> OptimizeResult:
        """Levenberg-Marquardt on the manifold; the graph's poses are replaced on success.

        Raises:
            NotConnected: some node cannot be reached from the anchor.
            SingularSystem: the normal equations are rank deficient.
        """
        if not self.is_connected():
            raise NotConnected("pose graph is not connected to the anchor")
        poses = dict(self.nodes)
        chi2 = self.chi2(poses)
        initial = chi2
        free = [k for k in poses if k != self.anchor]
        if not free or not self.edges or chi2 == 0.0:
            return OptimizeResult(poses, initial, chi2, 0)
        index = {k: n for n, k in enumerate(free)}
        lam = 1e-6
        it = 0
        for it in range(1, max_iterations + 1):
            H, b = self._normal_equations(poses, index)
            if it == 1:
                try:
                    np.linalg.cholesky(H)
                except np.linalg.LinAlgError:
                    raise SingularSystem("pose graph normal equations are singular") from None
            D = np.diag(np.diag(H))
            try:
                delta = -np.linalg.solve(H + lam * D, b)
            except np.linalg.LinAlgError:
                raise SingularSystem("pose graph normal equations are singular") from None
            if not np.all(np.isfinite(delta)):
                raise SingularSystem("non-finite pose graph update")
            cand = dict(poses)
            for k, n in index.items():
                cand[k] = se3_exp(delta[6 * n : 6 * n + 6]) @ poses[k]
            new = self.chi2(cand)
            if new < chi2:
                change = (chi2 - new) / chi2
                poses, chi2 = cand, new
                lam = max(lam / 10.0, 1e-12)
                if change < rel_tol or chi2 == 0.0:
                    break
            else:
                lam *= 10.0
                if lam > 1e8:
                    break
        self.nodes = poses
        logger.debug("pose graph: chi2 %.6g -> %.6g in %d iterations", initial, chi2, it)
        return OptimizeResult(dict(poses), initial, chi2, it)

    def _normal_equations(self, poses, index):
        n = len(index)
        H = np.zeros((6 * n, 6 * n))
        b = np.zeros(6 * n)
        for e in self.edges:
            Wi, Wj = poses[e.i], poses[e.j]
            r = edge_residual(e, Wi, Wj)
            Jr = _jr_inv(r)
            blocks = {}
            if e.i in index:
                blocks[index[e.i]] = Jr @ adjoint(Wj @ Wi.inverse())
            if e.j in index:
                blocks[index[e.j]] = -Jr
            for a, Ja in blocks.items():
                b[6 * a : 6 * a + 6] += Ja.T @ e.information @ r
                for c, Jc in blocks.items():
                    H[6 * a : 6 * a + 6, 6 * c : 6 * c + 6] += Ja.T @ e.information @ Jc
        return H, b

    def write_g2o(self, path) -> None:
        """Dump as ``VERTEX_SE3:QUAT`` / ``EDGE_SE3:QUAT`` records (camera-to-world vertices)."""

        def fmt(T: RigidPose) -> str:
            return " ".join(f"{v:.9g}" for v in (*T.translation, *T.quaternion()))

        lines = []
        for k, W in self.nodes.items():
            lines.append(f"VERTEX_SE3:QUAT {k} {fmt(W.inverse())}")
        iu = np.triu_indices(6)
        for e in self.edges:
            info = " ".join(f"{v:.9g}" for v in e.information[iu])
            lines.append(f"EDGE_SE3:QUAT {e.i} {e.j} {fmt(e.measurement)} {info}")
        lines += [f"FIX {self.anchor}"] if self.anchor is not None else []
        try:
            Path(path).write_text("\n".join(lines) + "\n")
        except OSError as exc:
            raise IoError(str(exc)) from exc


def measured_relative(W_i: RigidPose, W_j: RigidPose) -> RigidPose:
    """Edge measurement implied by two world-to-camera poses."""
    return relative_pose(W_j, W_i)


def add_keyframe_edges(graph: PoseGraph, new_id: int, new_pose: RigidPose, existing: list[tuple[int, RigidPose]],
                       fov_threshold: float = FOV_THRESHOLD,
                       measure: Callable[[int, int], RigidPose | None] | None = None,
                       information: np.ndarray | None = None) -> list[GraphEdge]:
    """Insert a key-frame node with a sequential edge and proximity edges.

    ``existing`` lists ``(id, pose)`` in insertion order; the last entry is
    the previous key-frame. The sequential edge uses the current relative
    pose estimate. Other key-frames closer than ``fov_threshold`` (metres
    plus 1 m/rad) get an edge whose measurement comes from ``measure(i, j)``
    when given (e.g. direct alignment), else from the current estimate; a
    ``None`` from ``measure`` skips that edge.
    """
    info = default_information() if information is None else information
    graph.add_node(new_id, new_pose)
    added = []
    if not existing:
        return added
    prev_id, prev_pose = existing[-1]
    edge = GraphEdge(prev_id, new_id, measured_relative(prev_pose, new_pose), info)
    graph.add_edge(edge)
    added.append(edge)
    for kid, pose in existing[:-1]:
        if pose_distance(pose, new_pose) < fov_threshold:
            Z = measure(kid, new_id) if measure is not None else measured_relative(pose, new_pose)
            if Z is None:
                continue
            edge = GraphEdge(kid, new_id, Z, info)
            graph.add_edge(edge)
            added.append(edge)
    return added


def on_optimized(store, poses: dict[int, RigidPose]) -> None:
    """Publish optimised key-frame poses as one atomic batch."""
    store.apply_poses(poses)
