"""Key-frame state, creation policy, uncertainty initialisation and fusion."""
from __future__ import annotations

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_keyframe
from densemono.geometry import CameraIntrinsics, RigidPose, se3_exp
from densemono.keyframes import (
    U_MAX,
    KeyframePolicy,
    KeyframeStore,
    find_nearest_keyframe,
    fuse_depth,
    fuse_new_keyframe,
    init_uncertainty,
    propagate_uncertainty,
    sample_neighbour,
    should_create_keyframe,
    uncertainty_from_depths,
)

K_SMALL = CameraIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)
pos = st.floats(0.1, 10.0)
var = st.floats(1e-6, 10.0)


def _flat_kf(depth=2.0, kf_id=0, pose=None, U=0.5):
    shape = (K_SMALL.height, K_SMALL.width)
    inten = np.random.default_rng(kf_id).uniform(0, 1, shape)
    return make_keyframe(inten, np.full(shape, depth), K_SMALL, uncertainty=np.full(shape, U), pose=pose, kf_id=kf_id)


class TestFuseDepth:
    def test_hand_computed(self):
        d, u = fuse_depth(2.0, 1.0, 4.0, 3.0)
        assert d == pytest.approx(2.5)
        assert u == pytest.approx(0.75)

    def test_equal_uncertainty_midpoint(self):
        d, u = fuse_depth(2.0, 0.4, 3.0, 0.4)
        assert d == pytest.approx(2.5)
        assert u == pytest.approx(0.2)

    def test_infinite_observation_keeps_prior(self):
        d, u = fuse_depth(2.0, 0.4, 7.0, np.inf)
        assert d == 2.0 and u == 0.4

    def test_both_zero_keeps_prior(self):
        d, u = fuse_depth(2.0, 0.0, 3.0, 0.0)
        assert d == 2.0 and u == 0.0

    @settings(max_examples=200, deadline=None)
    @given(pos, var, pos, var)
    def test_bounds(self, da, ua, db, ub):
        d, u = fuse_depth(da, ua, db, ub)
        assert min(da, db) <= d <= max(da, db)
        assert u <= min(ua, ub)

    @settings(max_examples=100, deadline=None)
    @given(pos, var, pos, var)
    def test_symmetric(self, da, ua, db, ub):
        d1, u1 = fuse_depth(da, ua, db, ub)
        d2, u2 = fuse_depth(db, ub, da, ua)
        assert d1 == pytest.approx(d2, rel=1e-12)
        assert u1 == pytest.approx(u2, rel=1e-12)


class TestUncertainty:
    def test_from_depths(self):
        assert uncertainty_from_depths(2.0, 2.5) == pytest.approx(0.25)

    def test_propagation_hand_computed(self):
        # 4 / 2 * 0.1 + 0.01
        assert propagate_uncertainty(4.0, 0.1, 2.0, 0.01) == pytest.approx(0.21)

    def test_propagation_floor(self):
        assert propagate_uncertainty(3.0, 0.0, 2.0, 0.01) == pytest.approx(0.01)

    def test_propagation_equal_depths(self):
        assert propagate_uncertainty(2.0, 0.3, 2.0, 0.0) == pytest.approx(0.3)

    def test_propagation_exponent_knob(self):
        assert propagate_uncertainty(4.0, 0.1, 2.0, 0.0, exponent=4.0) == pytest.approx(1.6)

    def test_first_keyframe_gets_u_max(self):
        U = init_uncertainty(np.full((3, 4), 2.0), K_SMALL, None, None)
        assert np.all(U == U_MAX)

    def test_identical_neighbour_gives_zero(self):
        nb = _flat_kf()
        U = init_uncertainty(np.full((24, 32), 2.0), K_SMALL, nb, RigidPose.identity())
        assert np.all(U == 0.0)

    def test_offset_neighbour(self):
        nb = _flat_kf(depth=2.5)
        U = init_uncertainty(np.full((24, 32), 2.0), K_SMALL, nb, RigidPose.identity())
        np.testing.assert_allclose(U, 0.25)

    def test_out_of_view_gets_u_max(self):
        nb = _flat_kf()
        # half a field of view to the side: the left columns fall outside the neighbour
        T = RigidPose(np.eye(3), [0.8, 0.0, 0.0])
        U = init_uncertainty(np.full((24, 32), 2.0), K_SMALL, nb, T)
        assert np.any(U == U_MAX)
        assert np.any(U < 1e-12)


class TestNeighbourSampling:
    def test_depth_re_expressed_in_own_frame(self):
        # neighbour sits 0.5 m further back; its depth 2.5 is 2.0 in our frame
        nb = _flat_kf(depth=2.5)
        T = RigidPose(np.eye(3), [0.0, 0.0, 0.5])
        s = sample_neighbour(np.full((24, 32), 2.0), K_SMALL, nb.depth, nb.uncertainty, T)
        assert s.valid.all()
        np.testing.assert_allclose(s.depth_j, 2.5)
        np.testing.assert_allclose(s.depth_j_in_i, 2.0, atol=1e-12)

    def test_fusion_only_where_valid(self):
        nb = _flat_kf(depth=3.0, U=1.0)
        T = RigidPose(np.eye(3), [0.8, 0.0, 0.0])
        D0 = np.full((24, 32), 2.0)
        U0 = np.full((24, 32), 1.0)
        D, U = fuse_new_keyframe(D0, U0, K_SMALL, nb, T, sigma_p2=0.0)
        s = sample_neighbour(D0, K_SMALL, nb.depth, nb.uncertainty, T)
        assert np.all(D[~s.valid] == 2.0) and np.all(U[~s.valid] == 1.0)
        # ratio 3/2 gives propagated U = 1.5; fused depth (1.5 * 2 + 1 * 3) / 2.5
        np.testing.assert_allclose(D[s.valid], 2.4)
        np.testing.assert_allclose(U[s.valid], 0.6)


class TestKeyframeState:
    def test_publish_bumps_generation(self):
        kf = _flat_kf()
        st0 = kf.state
        kf.publish(st0.depth * 2, st0.uncertainty, expected_generation=0)
        assert kf.generation == 1
        assert st0.generation == 0 and st0.depth[0, 0] == 2.0

    def test_stale_publish_rejected(self):
        kf = _flat_kf()
        kf.publish(kf.depth, kf.uncertainty)
        with pytest.raises(RuntimeError):
            kf.publish(kf.depth, kf.uncertainty, expected_generation=0)

    def test_state_is_read_only(self):
        kf = _flat_kf()
        with pytest.raises(ValueError):
            kf.depth[0, 0] = 1.0

    def test_rejects_holes(self):
        d = np.full((24, 32), 2.0)
        d[3, 3] = 0.0
        with pytest.raises(ValueError):
            make_keyframe(np.zeros_like(d), d, K_SMALL)

    def test_concurrent_readers_see_whole_generations(self):
        kf = _flat_kf()
        seen = []

        def reader():
            for _ in range(2000):
                st = kf.state
                seen.append(float(st.depth[0, 0]) == 2.0 + st.generation)

        t = threading.Thread(target=reader)
        t.start()
        for g in range(1, 200):
            kf.publish(np.full((24, 32), 2.0 + g), kf.uncertainty)
        t.join()
        assert all(seen)


class TestPolicy:
    def test_translation_threshold_from_mean_depth(self):
        pol = KeyframePolicy.for_keyframe(_flat_kf(depth=2.0))
        assert pol.max_translation == pytest.approx(0.3)

    def test_create_on_translation(self):
        pol = KeyframePolicy(0.3, np.deg2rad(10))
        assert not should_create_keyframe(se3_exp([0.29, 0, 0, 0, 0, 0]), RigidPose.identity(), pol)
        assert should_create_keyframe(se3_exp([0.31, 0, 0, 0, 0, 0]), RigidPose.identity(), pol)

    def test_create_on_rotation(self):
        pol = KeyframePolicy(0.3, np.deg2rad(10))
        assert should_create_keyframe(se3_exp([0, 0, 0, 0, np.deg2rad(11), 0]), RigidPose.identity(), pol)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            KeyframePolicy(0.0, 1.0)

    def test_nearest_and_ties(self):
        a = _flat_kf(kf_id=0)
        b = _flat_kf(kf_id=1, pose=se3_exp([1.0, 0, 0, 0, 0, 0]))
        c = _flat_kf(kf_id=2, pose=se3_exp([-1.0, 0, 0, 0, 0, 0]))
        q = se3_exp([0.9, 0, 0, 0, 0, 0])
        assert find_nearest_keyframe(q, [a, b, c]).id == 1
        assert find_nearest_keyframe(RigidPose.identity(), [b, c]).id == 1

    def test_store_batch_update(self):
        store = KeyframeStore()
        for i in range(3):
            store.add(_flat_kf(kf_id=i))
        new = se3_exp([0.1, 0, 0, 0, 0, 0])
        store.apply_poses({1: new})
        snap = store.snapshot()
        assert snap[1][1] is new and snap[0][1].allclose(RigidPose.identity())
        assert store.by_id(2).id == 2
        with pytest.raises(KeyError):
            store.by_id(9)
