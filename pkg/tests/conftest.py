"""Shared fixtures: a procedural scene, camera, and cached synthetic sequences."""
from __future__ import annotations

import numpy as np
import pytest

from densemono.geometry import RigidPose
from densemono.keyframes import KeyFrame
from densemono.synthetic import Scene, default_intrinsics, loop_trajectory, pan_trajectory, write_tum_sequence


@pytest.fixture(scope="session")
def K():
    return default_intrinsics()


@pytest.fixture(scope="session")
def scene():
    return Scene()


@pytest.fixture(scope="session")
def reference_view(scene, K):
    """``(intensity, depth, labels)`` rendered at the identity pose."""
    return scene.render(K, RigidPose.identity())


def make_keyframe(intensity, depth, K, uncertainty=None, pose=None, kf_id=0, labels=None):
    U = np.full(depth.shape, 1e-4) if uncertainty is None else uncertainty
    return KeyFrame(kf_id, pose or RigidPose.identity(), intensity, depth, U, K, labels=labels)


@pytest.fixture(scope="session")
def loop_sequence(tmp_path_factory):
    """50-frame closed loop with blurred, correctly scaled predictions."""
    root = tmp_path_factory.mktemp("loop50")
    return write_tum_sequence(root, loop_trajectory(50), prediction_blur=3.0, prediction_bias=1.0)


@pytest.fixture(scope="session")
def short_sequence(tmp_path_factory):
    """First 16 frames of the loop; long enough to create a second key-frame."""
    root = tmp_path_factory.mktemp("short16")
    return write_tum_sequence(root, loop_trajectory(50)[:16], prediction_blur=3.0, prediction_bias=1.0)


@pytest.fixture(scope="session")
def pan_sequence(tmp_path_factory):
    """30 frames of pure rotation, 45 degrees in total."""
    root = tmp_path_factory.mktemp("pan30")
    return write_tum_sequence(root, pan_trajectory(30, 45.0), prediction_blur=3.0, prediction_bias=1.0)


@pytest.fixture(scope="session")
def tiny_sequence(tmp_path_factory):
    """Three frames a few millimetres apart, for fast pipeline plumbing tests."""
    root = tmp_path_factory.mktemp("tiny")
    return write_tum_sequence(root, loop_trajectory(200)[:3], prediction_blur=1.0, prediction_bias=1.0)
