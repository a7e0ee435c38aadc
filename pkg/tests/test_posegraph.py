"""Key-frame pose graph: edges, chi-squared and Levenberg-Marquardt."""
from __future__ import annotations

import numpy as np
import pytest

from densemono.errors import NotConnected
from densemono.geometry import RigidPose, se3_exp
from densemono.keyframes import KeyframeStore
from densemono.posegraph import (
    GraphEdge,
    PoseGraph,
    add_keyframe_edges,
    default_information,
    edge_residual,
    measured_relative,
    on_optimized,
)


def _square(perturb=None):
    """Four poses on a 1 m square with exact edges; ``perturb`` replaces edge (1, 2)."""
    W = [se3_exp([x, 0.0, z, 0.0, yaw, 0.0]) for x, z, yaw in
         [(0, 0, 0), (1, 0, np.pi / 2), (1, 1, np.pi), (0, 1, -np.pi / 2)]]
    g = PoseGraph()
    for k, T in enumerate(W):
        g.add_node(k, T)
    for i, j in [(0, 1), (1, 2), (2, 3), (3, 0)]:
        Z = measured_relative(W[i], W[j])
        if perturb is not None and (i, j) == (1, 2):
            Z = perturb @ Z
        g.add_edge(GraphEdge(i, j, Z))
    return g, W


class TestEdges:
    def test_residual_zero_for_consistent_poses(self):
        A = se3_exp([0.1, 0.2, 0.3, 0.1, 0.0, 0.2])
        B = se3_exp([-0.3, 0.0, 0.5, 0.0, 0.3, 0.0])
        e = GraphEdge(0, 1, measured_relative(A, B))
        np.testing.assert_allclose(edge_residual(e, A, B), 0.0, atol=1e-12)

    def test_rejects_bad_information(self):
        with pytest.raises(ValueError):
            GraphEdge(0, 1, RigidPose.identity(), np.eye(5))
        with pytest.raises(ValueError):
            GraphEdge(0, 1, RigidPose.identity(), -np.eye(6))

    def test_unknown_node(self):
        g = PoseGraph()
        g.add_node(0, RigidPose.identity())
        with pytest.raises(KeyError):
            g.add_edge(GraphEdge(0, 5, RigidPose.identity()))

    def test_default_information(self):
        np.testing.assert_allclose(np.diag(default_information()), 1e4)


class TestOptimize:
    def test_single_node_noop(self):
        g = PoseGraph()
        g.add_node(0, se3_exp([1, 2, 3, 0, 0, 0]))
        res = g.optimize()
        assert res.chi2 == 0.0
        assert res.poses[0].allclose(g.nodes[0])

    def test_consistent_graph_is_fixed_point(self):
        g, W = _square()
        res = g.optimize()
        assert res.chi2 < 1e-18
        for k, T in enumerate(W):
            assert res.poses[k].allclose(T, atol=1e-9)

    def test_perturbed_edge_reduces_chi2(self):
        g, _ = _square(perturb=se3_exp([0.05, 0.0, 0.0, 0.0, 0.02, 0.0]))
        # dead-reckon along the odometry edges so the error piles up on the closure
        for e in g.edges[:3]:
            g.nodes[e.j] = e.measurement.inverse() @ g.nodes[e.i]
        before = g.chi2()
        closure = g.edges[3]
        r0 = np.linalg.norm(edge_residual(closure, g.nodes[3], g.nodes[0]))
        res = g.optimize()
        assert res.initial_chi2 == pytest.approx(before)
        assert res.chi2 < before
        # independent re-evaluation of the objective
        assert g.chi2(res.poses) == pytest.approx(res.chi2, rel=1e-9, abs=1e-12)
        assert np.linalg.norm(edge_residual(closure, res.poses[3], res.poses[0])) < 0.5 * r0

    def test_anchor_holds(self):
        g, W = _square()
        # start every non-anchor node from a rigidly moved guess
        M = se3_exp([0.3, -0.2, 0.1, 0.05, 0.1, 0.0])
        for k in (1, 2, 3):
            g.nodes[k] = W[k] @ M
        res = g.optimize()
        assert res.poses[0].allclose(W[0], atol=1e-12)
        for k in (1, 2, 3):
            assert res.poses[k].allclose(W[k], atol=1e-6)

    def test_disconnected(self):
        g = PoseGraph()
        for k in range(3):
            g.add_node(k, RigidPose.identity())
        g.add_edge(GraphEdge(0, 1, RigidPose.identity()))
        assert not g.is_connected()
        with pytest.raises(NotConnected):
            g.optimize()


class TestKeyframeEdges:
    def test_second_keyframe_gets_one_edge(self):
        g = PoseGraph()
        add_keyframe_edges(g, 0, RigidPose.identity(), [])
        edges = add_keyframe_edges(g, 1, se3_exp([0.5, 0, 0, 0, 0, 0]), [(0, RigidPose.identity())])
        assert [(e.i, e.j) for e in edges] == [(0, 1)]

    def test_loop_edge_when_close(self):
        g = PoseGraph()
        poses = [se3_exp([x, 0, 0, 0, 0, 0]) for x in (0.0, 1.0, 2.0)]
        existing = []
        for k, T in enumerate(poses):
            add_keyframe_edges(g, k, T, existing)
            existing.append((k, T))
        back = se3_exp([0.1, 0, 0, 0, 0, 0])
        edges = add_keyframe_edges(g, 3, back, existing)
        assert {(e.i, e.j) for e in edges} == {(2, 3), (0, 3)}

    def test_far_keyframes_only_sequential(self):
        g = PoseGraph()
        existing = []
        for k in range(4):
            T = se3_exp([float(k), 0, 0, 0, 0, 0])
            edges = add_keyframe_edges(g, k, T, existing)
            existing.append((k, T))
        assert len(edges) == 1 and len(g.edges) == 3

    def test_measure_none_skips(self):
        g = PoseGraph()
        existing = [(0, RigidPose.identity()), (1, se3_exp([1.0, 0, 0, 0, 0, 0]))]
        for k, T in existing:
            g.add_node(k, T)
        edges = add_keyframe_edges(g, 2, se3_exp([0.05, 0, 0, 0, 0, 0]), existing, measure=lambda i, j: None)
        assert [(e.i, e.j) for e in edges] == [(1, 2)]

    def test_publish_to_store(self):
        from conftest import make_keyframe
        from densemono.geometry import CameraIntrinsics

        K = CameraIntrinsics(10.0, 10.0, 1.5, 1.5, 4, 4)
        store = KeyframeStore()
        for k in range(2):
            store.add(make_keyframe(np.zeros((4, 4)), np.ones((4, 4)), K, kf_id=k))
        T = se3_exp([0.2, 0, 0, 0, 0, 0])
        on_optimized(store, {1: T})
        assert store.by_id(1).pose is T


def test_g2o_dump(tmp_path):
    g, _ = _square()
    g.write_g2o(tmp_path / "g.g2o")
    lines = (tmp_path / "g.g2o").read_text().splitlines()
    assert sum(line.startswith("VERTEX_SE3:QUAT") for line in lines) == 4
    assert sum(line.startswith("EDGE_SE3:QUAT") for line in lines) == 4
    assert lines[-1] == "FIX 0"
    # 2 ids + 7 pose values + 21 upper-triangle information entries
    assert len(lines[4].split()) == 1 + 2 + 7 + 21
