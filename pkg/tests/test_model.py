"""Global surfel model: integration, label votes and PLY export."""
from __future__ import annotations

import numpy as np
import pytest

from conftest import make_keyframe
from densemono.errors import EmptyModel, UnlabeledElement
from densemono.geometry import CameraIntrinsics, RigidPose
from densemono.model import GlobalModel, class_color, element_label, export_ply, integrate_keyframe, normal_map, read_ply
from densemono.prediction import SemanticLabelMap

K = CameraIntrinsics(20.0, 20.0, 7.5, 5.5, 16, 12)


def _plane(depth=2.0):
    return np.full((K.height, K.width), depth)


class TestLabels:
    def test_majority(self):
        assert element_label(np.array([2, 1, 0, 0])) == 0
        assert element_label(np.array([0, 1, 3, 0])) == 2

    def test_tie_goes_to_lowest(self):
        assert element_label(np.array([1, 1, 0, 0])) == 0

    def test_all_zero(self):
        with pytest.raises(UnlabeledElement):
            element_label(np.zeros(4))

    def test_palette_is_fixed(self):
        assert class_color(0).tolist() == class_color(0).tolist()
        assert len({tuple(class_color(c)) for c in range(8)}) == 8


class TestIntegration:
    def test_normals_face_camera(self):
        n = normal_map(_plane(), K)
        np.testing.assert_allclose(n[2:-2, 2:-2], np.broadcast_to([0, 0, -1.0], (8, 12, 3)), atol=1e-12)

    def test_one_element_per_pixel(self):
        m = GlobalModel()
        res = m.integrate(_plane(), RigidPose.identity(), K)
        assert len(m) == K.width * K.height
        assert res.inserted == len(m) and res.associated == 0

    def test_same_view_twice_doubles_weights(self):
        m = GlobalModel()
        m.integrate(_plane(), RigidPose.identity(), K)
        res = m.integrate(_plane(), RigidPose.identity(), K)
        assert len(m) == K.width * K.height
        assert res.inserted == 0
        np.testing.assert_allclose(m.weight, 2.0)

    def test_positions_in_world_frame(self):
        # world-to-camera translation of -1 in x puts the camera centre at x = +1
        T = RigidPose(np.eye(3), [-1.0, 0.0, 0.0])
        m = GlobalModel()
        res = m.integrate(_plane(), T, K)
        i = res.element_index[5, 7]
        np.testing.assert_allclose(m.position[i], [1.0 + (7 - 7.5) / 20 * 2, (5 - 5.5) / 20 * 2, 2.0])

    def test_majority_vote_across_keyframes(self):
        m = GlobalModel()
        a = np.zeros((K.height, K.width), np.int64)
        b = np.ones_like(a)
        m.integrate(_plane(), RigidPose.identity(), K, labels=a, num_classes=4)
        m.integrate(_plane(), RigidPose.identity(), K, labels=a, num_classes=4)
        m.integrate(_plane(), RigidPose.identity(), K, labels=b, num_classes=4)
        assert np.all(m.labels() == 0)
        assert m.element(0).label_histogram.tolist() == [2.0, 1.0, 0.0, 0.0]

    def test_unlabelled_elements_reported(self):
        m = GlobalModel()
        m.integrate(_plane(), RigidPose.identity(), K)
        with pytest.raises(UnlabeledElement):
            m.labels()

    def test_integrate_keyframe_records_source(self):
        lab = SemanticLabelMap(np.full((K.height, K.width), 2), ("a", "b", "c"))
        kf = make_keyframe(np.full((K.height, K.width), 0.5), _plane(), K, labels=lab, kf_id=7)
        m = GlobalModel()
        integrate_keyframe(m, kf)
        assert m.sources == [(7, 0)]
        assert m.num_classes == 3
        assert np.all(m.labels() == 2)
        np.testing.assert_allclose(m.color, 127.5)

    def test_save_load(self, tmp_path):
        m = GlobalModel()
        m.integrate(_plane(), RigidPose.identity(), K, labels=np.zeros((K.height, K.width), np.int64), num_classes=2)
        m.save(tmp_path / "m.npz")
        back = GlobalModel.load(tmp_path / "m.npz")
        np.testing.assert_array_equal(back.position, m.position)
        np.testing.assert_array_equal(back.histogram, m.histogram)
        assert back.sources == m.sources


class TestPly:
    def _one(self, labelled=True):
        m = GlobalModel()
        d = np.full((1, 1), 2.0)
        K1 = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 1, 1)
        m.integrate(d, RigidPose.identity(), K1, labels=np.array([[1]]) if labelled else None,
                    num_classes=2 if labelled else None, color=np.array([[[10, 20, 30]]]))
        return m

    @pytest.mark.parametrize("binary", [True, False])
    def test_round_trip(self, tmp_path, binary):
        m = self._one()
        n = export_ply(m, tmp_path / "m.ply", binary=binary)
        v = read_ply(tmp_path / "m.ply")
        assert n == 1 and len(v) == 1
        assert (v["x"][0], v["y"][0], v["z"][0]) == (0.0, 0.0, 2.0)
        assert (v["red"][0], v["green"][0], v["blue"][0]) == (10, 20, 30)

    def test_label_colours(self, tmp_path):
        export_ply(self._one(), tmp_path / "m.ply", color_mode="label")
        v = read_ply(tmp_path / "m.ply")
        assert [v["red"][0], v["green"][0], v["blue"][0]] == class_color(1).tolist()

    def test_label_mode_without_labels(self, tmp_path):
        with pytest.raises(UnlabeledElement):
            export_ply(self._one(labelled=False), tmp_path / "m.ply", color_mode="label")

    def test_empty_model_writes_nothing(self, tmp_path):
        with pytest.raises(EmptyModel):
            export_ply(GlobalModel(), tmp_path / "m.ply")
        assert not (tmp_path / "m.ply").exists()
