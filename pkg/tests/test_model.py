"""Domain-type behavior: activations, validation, config, codebook state."""
import math

import numpy as np
import pytest

from oracles import quat_matrix_scalar
from splatbook.model import (
    STAGE_TOGGLES,
    BBox,
    CameraView,
    CodebookObject,
    DepthImage,
    GaussianScene,
    MaskInstance,
    ObjectCodebook,
    PipelineConfig,
    ToleranceMap,
    ViewMaskSet,
    config_defaults,
    config_from_dict,
    quaternion_to_matrix,
)


class TestQuaternion:
    def test_identity(self):
        np.testing.assert_array_equal(
            quaternion_to_matrix((1.0, 0.0, 0.0, 0.0)), np.eye(3)
        )

    def test_quarter_turn_about_z(self):
        h = math.sqrt(0.5)
        m = quaternion_to_matrix((h, 0.0, 0.0, h))
        # +90 degrees about z maps x to y
        np.testing.assert_allclose(m @ np.array([1.0, 0.0, 0.0]),
                                   [0.0, 1.0, 0.0], atol=1e-12)

    def test_matches_scalar_formula(self, rng):
        for _ in range(50):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            got = quaternion_to_matrix(q)
            want = np.array(quat_matrix_scalar(q))
            np.testing.assert_array_equal(got, want)

    def test_orthonormal_for_random_quats(self, rng):
        for _ in range(50):
            q = rng.normal(size=4)
            m = quaternion_to_matrix(q)  # normalizes internally
            np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-12)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            quaternion_to_matrix((0.0, 0.0, 0.0, 0.0))


class TestGaussianScene:
    def test_from_params_activation_round_trip(self, rng):
        n = 32
        centers = rng.normal(size=(n, 3))
        scales = rng.uniform(0.05, 2.0, (n, 3))
        quats = rng.normal(size=(n, 4))
        opacities = rng.uniform(0.01, 0.99, n)
        scene = GaussianScene.from_params(centers, scales, quats, opacities)
        assert len(scene) == n
        # float32 storage bounds the activation round-trip error
        np.testing.assert_allclose(scene.scales, scales, rtol=1e-6)
        np.testing.assert_allclose(scene.opacities, opacities, atol=1e-6)
        norms = np.linalg.norm(scene.rotations, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_raw_storage_conventions(self):
        scene = GaussianScene.from_params(
            [[0.0, 0.0, 1.0]], [[1.0, 1.0, 1.0]], [[1.0, 0.0, 0.0, 0.0]], [0.5]
        )
        raw_centers, raw_log_scales, _raw_rot, raw_logit_op = scene.raw_arrays
        assert raw_centers.dtype == np.float32
        assert raw_log_scales[0, 0] == 0.0   # log(1)
        assert raw_logit_op[0] == 0.0        # logit(0.5)

    def test_primitive_fields(self):
        scene = GaussianScene.from_params(
            [[1.0, 2.0, 3.0]], [[0.1, 0.2, 0.3]], [[0.0, 0.0, 0.0, 2.0]], [0.9]
        )
        g = scene.primitive(0)
        assert g.center == pytest.approx((1.0, 2.0, 3.0), abs=1e-6)
        assert g.rotation == pytest.approx((0.0, 0.0, 0.0, 1.0))
        assert g.opacity == pytest.approx(0.9, abs=1e-6)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            GaussianScene.from_params(
                [[0, 0, 1]], [[0.0, 1.0, 1.0]], [[1, 0, 0, 0]], [0.5]
            )
        with pytest.raises(ValueError):
            GaussianScene.from_params(
                [[0, 0, 1]], [[1.0, 1.0, 1.0]], [[1, 0, 0, 0]], [1.5]
            )


class TestCameraView:
    def test_rejects_bad_focal(self):
        with pytest.raises(ValueError):
            CameraView("v0", 10, 10, 0.0, 50.0, 4.5, 4.5,
                       (1, 0, 0, 0), (0, 0, 0))

    def test_normalizes_rotation(self):
        cam = CameraView("v0", 10, 10, 50.0, 50.0, 4.5, 4.5,
                         (2.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
        assert cam.rotation == (1.0, 0.0, 0.0, 0.0)
        np.testing.assert_array_equal(cam.rotation_matrix(), np.eye(3))


class TestMaskTypes:
    def test_confidence_is_product(self, rng):
        region = np.ones((4, 4), dtype=bool)
        for _ in range(100):
            d, s = rng.uniform(0, 1, 2)
            m = MaskInstance(0, "chair", float(d), float(s), region)
            assert abs(m.confidence - d * s) <= 1e-12

    def test_region_validation(self):
        with pytest.raises(ValueError):
            MaskInstance(0, "chair", 0.5, 0.5, np.zeros((4, 4), dtype=bool))
        with pytest.raises(ValueError):
            MaskInstance(0, "chair", 1.5, 0.5, np.ones((4, 4), dtype=bool))

    def test_view_set_rejects_duplicates_and_bad_shapes(self):
        region = np.ones((4, 4), dtype=bool)
        a = MaskInstance(0, "chair", 1.0, 1.0, region)
        b = MaskInstance(0, "table", 1.0, 1.0, region)
        with pytest.raises(ValueError):
            ViewMaskSet("v0", 4, 4, [a, b])
        with pytest.raises(ValueError):
            ViewMaskSet("v0", 5, 4, [a])

    def test_view_set_sorts_masks(self):
        region = np.ones((4, 4), dtype=bool)
        ms = ViewMaskSet(
            "v0", 4, 4,
            [MaskInstance(3, "a", 1, 1, region), MaskInstance(1, "b", 1, 1, region)],
        )
        assert [m.mask_id for m in ms.masks] == [1, 3]


class TestRasters:
    def test_depth_rejects_nonpositive_finite(self):
        with pytest.raises(ValueError):
            DepthImage(values=np.array([[1.0, -2.0]]))
        img = DepthImage(values=np.array([[1.0, np.inf]]))
        assert img.finite_mask().tolist() == [[True, False]]
        assert (img.height, img.width) == (1, 2)

    def test_tolerance_rejects_negative(self):
        with pytest.raises(ValueError):
            ToleranceMap(values=np.array([[-0.1]]))


class TestCodebookState:
    def test_new_object_ids_monotone(self):
        book = ObjectCodebook()
        ids = [book.new_object().object_id for _ in range(5)]
        assert ids == [0, 1, 2, 3, 4]
        assert book.next_id == 5
        book.check()

    def test_check_rejects_duplicate_ids(self):
        book = ObjectCodebook(objects=[CodebookObject(0), CodebookObject(0)],
                              next_id=1)
        with pytest.raises(ValueError):
            book.check()

    def test_check_rejects_stale_next_id(self):
        book = ObjectCodebook(objects=[CodebookObject(3)], next_id=3)
        with pytest.raises(ValueError):
            book.check()

    def test_best_vote_tie_is_lexicographic(self):
        obj = CodebookObject(0, label_votes={"b": 0.5, "a": 0.5})
        assert obj.best_vote() == "a"

    def test_object_check_requires_weight_key_match(self):
        obj = CodebookObject(0, gaussian_indices={1, 2},
                             gaussian_weights={1: 0.5})
        with pytest.raises(ValueError):
            obj.check()


class TestBBox:
    def test_rejects_inverted(self):
        with pytest.raises(ValueError):
            BBox("v0", "chair", 1.0, 5.0, 0.0, 4.0, 10.0)

    def test_area(self):
        assert BBox("v0", "chair", 1.0, 0.0, 0.0, 4.0, 5.0).area() == 20.0


class TestConfig:
    def test_defaults(self):
        cfg = config_defaults()
        assert cfg.tau_overlap == 0.2
        assert cfg.tau_filter1 == 0.4
        assert cfg.tau_spatial == 0.3
        assert cfg.tau_filter2 == 0.3
        assert cfg.tau_object == 0.8
        assert cfg.depth_bound == 0.5
        assert cfg.half_width == 3
        assert cfg.min_pts == 6
        assert cfg.postprocess_mode == "auto"
        for field in STAGE_TOGGLES.values():
            assert getattr(cfg, field) is True

    def test_threshold_bounds_enforced(self):
        with pytest.raises(ValueError):
            PipelineConfig(tau_overlap=0.0).validate()
        with pytest.raises(ValueError):
            PipelineConfig(tau_spatial=1.0).validate()
        with pytest.raises(ValueError):
            PipelineConfig(depth_bound=0.0).validate()
        with pytest.raises(ValueError):
            PipelineConfig(postprocess_mode="sometimes").validate()

    def test_disable_by_stage_name(self):
        cfg = config_defaults()
        for stage, field in STAGE_TOGGLES.items():
            off = cfg.disable(stage)
            assert getattr(off, field) is False
            assert getattr(cfg, field) is True  # original untouched
        with pytest.raises(ValueError):
            cfg.disable("warp-drive")

    def test_config_from_dict(self):
        cfg = config_from_dict({"tau_overlap": 0.5, "enable_filter1": False})
        assert cfg.tau_overlap == 0.5
        assert cfg.enable_filter1 is False
        with pytest.raises(ValueError):
            config_from_dict({"tau_nonsense": 0.5})
        with pytest.raises(ValueError):
            config_from_dict([1, 2])
