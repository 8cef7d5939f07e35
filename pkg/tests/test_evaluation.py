"""Mask agreement scoring, box generation, AP and miss-rate metrics."""
import numpy as np
import pytest

from conftest import identity_camera
from oracles import box_iou_scalar, oracle_best_assignment_total, oracle_class_ap
from splatbook.evaluation import (
    batch_f1,
    bbox_from_object,
    box_iou,
    boxes_for_view,
    detection_metrics,
    mask_metrics,
    match_objects,
)
from splatbook.model import (
    BBox,
    CodebookObject,
    DepthImage,
    GaussianScene,
    RelabeledMask,
    RelabeledMaskSet,
    config_defaults,
)


def rect(h, w, y0, y1, x0, x1):
    region = np.zeros((h, w), dtype=bool)
    region[y0:y1, x0:x1] = True
    return region


def mask_set(view_id, instances, h=32, w=32):
    """instances: list of (object_id, region)."""
    masks = [
        RelabeledMask(mask_id=i, object_id=oid, label="thing", region=r)
        for i, (oid, r) in enumerate(instances)
    ]
    return RelabeledMaskSet(view_id=view_id, width=w, height=h, masks=masks)


def square_regions():
    a = rect(32, 32, 2, 12, 2, 12)
    b = rect(32, 32, 18, 30, 18, 30)
    return a, b


class TestMatchObjects:
    def test_identity(self):
        a, b = square_regions()
        sets = {"v": mask_set("v", [(0, a), (1, b)])}
        assert match_objects(sets, sets) == {0: 0, 1: 1}

    def test_renamed_ids_follow_pixels(self):
        a, b = square_regions()
        pred = {"v": mask_set("v", [(7, a), (3, b)])}
        gt = {"v": mask_set("v", [(0, a), (1, b)])}
        assert match_objects(pred, gt) == {7: 0, 3: 1}

    def test_empty_sides(self):
        a, _ = square_regions()
        filled = {"v": mask_set("v", [(0, a)])}
        empty = {"v": mask_set("v", [])}
        assert match_objects(empty, filled) == {}
        assert match_objects(filled, empty) == {}

    def test_zero_intersection_pairs_dropped(self):
        a, b = square_regions()
        pred = {"v": mask_set("v", [(0, a)])}
        gt = {"v": mask_set("v", [(5, b)])}
        assert match_objects(pred, gt) == {}

    def test_total_intersection_is_optimal(self, rng):
        for _ in range(25):
            n_pred = int(rng.integers(1, 5))
            n_gt = int(rng.integers(1, 5))
            pred_inst, gt_inst = [], []
            for i in range(n_pred):
                y, x = rng.integers(0, 20, 2)
                pred_inst.append((i, rect(32, 32, y, y + 12, x, x + 12)))
            for g in range(n_gt):
                y, x = rng.integers(0, 20, 2)
                gt_inst.append((g, rect(32, 32, y, y + 12, x, x + 12)))
            pred = {"v": mask_set("v", pred_inst)}
            gt = {"v": mask_set("v", gt_inst)}
            got = match_objects(pred, gt)
            matrix = np.array([
                [np.count_nonzero(pr & gr) for _, gr in gt_inst]
                for _, pr in pred_inst
            ])
            total = sum(matrix[p, g] for p, g in got.items())
            assert total == oracle_best_assignment_total(matrix)
            assert all(matrix[p, g] > 0 for p, g in got.items())

    def test_split_prefers_larger_share(self):
        gt_region = rect(32, 32, 0, 16, 0, 16)
        big = rect(32, 32, 0, 16, 0, 12)
        small = rect(32, 32, 0, 16, 12, 16)
        pred = {"v": mask_set("v", [(0, small), (1, big)])}
        gt = {"v": mask_set("v", [(9, gt_region)])}
        assert match_objects(pred, gt) == {1: 9}


class TestMaskMetrics:
    def test_perfect_agreement(self):
        a, b = square_regions()
        sets = {
            "v0": mask_set("v0", [(0, a), (1, b)]),
            "v1": mask_set("v1", [(0, a), (1, b)]),
        }
        report = mask_metrics(sets, sets)
        assert report.precision == 100.0 and report.recall == 100.0
        assert report.f1 == 100.0 and report.miou == 100.0
        assert report.true_positives == 4
        assert report.false_positives == 0 and report.false_negatives == 0
        assert report.unique_pred_masks == 2 and report.unique_gt_masks == 2
        assert report.degenerate == ()

    def test_one_of_two_missed(self):
        a, b = square_regions()
        pred = {"v": mask_set("v", [(0, a)])}
        gt = {"v": mask_set("v", [(0, a), (1, b)])}
        report = mask_metrics(pred, gt)
        assert report.precision == 100.0
        assert report.recall == 50.0
        assert report.f1 == pytest.approx(2 * 100 * 50 / 150, rel=1e-12)

    def test_spurious_prediction_costs_precision(self):
        a, b = square_regions()
        pred = {"v": mask_set("v", [(0, a), (1, b)])}
        gt = {"v": mask_set("v", [(0, a)])}
        report = mask_metrics(pred, gt)
        assert report.recall == 100.0
        assert report.precision == 50.0

    def test_pred_id_bijection_invariance(self):
        a, b = square_regions()
        gt = {"v": mask_set("v", [(0, a), (1, b)])}
        base = mask_metrics({"v": mask_set("v", [(0, a), (1, b)])}, gt)
        renamed = mask_metrics({"v": mask_set("v", [(12, a), (4, b)])}, gt)
        assert base.to_dict() == renamed.to_dict()

    def test_iou_threshold_boundary(self):
        gt_region = rect(32, 32, 0, 16, 0, 16)
        half = rect(32, 32, 0, 16, 0, 8)  # IoU exactly 0.5
        under = rect(32, 32, 0, 16, 0, 7)
        gt = {"v": mask_set("v", [(0, gt_region)])}
        hit = mask_metrics({"v": mask_set("v", [(0, half)])}, gt)
        assert hit.true_positives == 1
        miss = mask_metrics({"v": mask_set("v", [(0, under)])}, gt)
        assert miss.true_positives == 0
        assert miss.false_negatives == 1 and miss.false_positives == 1

    def test_empty_predictions_degenerate(self):
        a, _ = square_regions()
        gt = {"v": mask_set("v", [(0, a)])}
        report = mask_metrics({"v": mask_set("v", [])}, gt)
        assert report.recall == 0.0
        assert set(report.degenerate) == {"precision", "f1", "miou"}

    def test_f1_is_harmonic_mean(self, rng):
        a, b = square_regions()
        noisy = a.copy()
        noisy[rng.random(a.shape) < 0.2] ^= True
        pred = {"v": mask_set("v", [(0, noisy), (1, b)])}
        gt = {"v": mask_set("v", [(0, a), (1, b)])}
        r = mask_metrics(pred, gt)
        if r.precision + r.recall > 0:
            want = 2 * r.precision * r.recall / (r.precision + r.recall)
            assert r.f1 == pytest.approx(want, abs=1e-9)

    def test_unassigned_masks_ignored(self):
        a, b = square_regions()
        pred = {"v": mask_set("v", [(0, a), (None, b)])}
        gt = {"v": mask_set("v", [(0, a)])}
        report = mask_metrics(pred, gt)
        assert report.f1 == 100.0 and report.false_positives == 0

    def test_batch_rows(self):
        a, b = square_regions()
        sets = {
            f"v{i}": mask_set(f"v{i}", [(0, a), (1, b)]) for i in range(4)
        }
        rows = batch_f1(sets, sets, batch_size=2)
        assert len(rows) == 2
        assert [r["batch_index"] for r in rows] == [0, 1]
        assert rows[0]["first_view"] == "v0" and rows[0]["last_view"] == "v1"
        assert all(r["f1"] == 100.0 for r in rows)
        assert all(r["batch_size"] == 2 for r in rows)


def point_scene(points, scale=1e-3):
    n = len(points)
    return GaussianScene.from_params(
        np.asarray(points, dtype=np.float64), np.full((n, 3), scale),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), np.full(n, 0.9),
    )


def object_over(indices, label="thing", conf=0.7):
    obj = CodebookObject(object_id=0)
    obj.gaussian_indices = set(indices)
    obj.gaussian_weights = {i: 1.0 for i in sorted(indices)}
    obj.label_votes = {label: 1.0}
    obj.final_label = label
    obj.object_confidence = conf
    obj.mask_refs = [("v0", 0, 0.9)]
    return obj


def world_at_pixel(cam, px, py, z):
    x = (px - cam.cx) / cam.fx * z
    y = (py - cam.cy) / cam.fy * z
    return [x, y, z]


class TestBBox:
    def test_encloses_projected_centers(self):
        cam = identity_camera(width=64, height=64, focal=50.0)
        scene = point_scene([
            world_at_pixel(cam, 10.0, 20.0, 2.0),
            world_at_pixel(cam, 30.0, 40.0, 2.0),
        ])
        depth = DepthImage(values=np.full((64, 64), np.inf))
        box = bbox_from_object(
            object_over({0, 1}), scene, cam, depth, config_defaults(),
            min_visible=1,
        )
        assert box is not None
        assert box.x_min == pytest.approx(10.0, abs=0.1)
        assert box.y_min == pytest.approx(20.0, abs=0.1)
        assert box.x_max == pytest.approx(30.0, abs=0.1)
        assert box.y_max == pytest.approx(40.0, abs=0.1)
        assert box.label == "thing"
        assert box.confidence == pytest.approx(0.7)
        assert box.object_id == 0

    def test_behind_camera_gives_none(self):
        cam = identity_camera()
        scene = point_scene([[0.0, 0.0, -2.0], [0.1, 0.0, -3.0]])
        depth = DepthImage(values=np.full((64, 64), np.inf))
        assert bbox_from_object(
            object_over({0, 1}), scene, cam, depth, config_defaults(),
            min_visible=1,
        ) is None

    def test_fully_occluded_gives_none(self):
        cam = identity_camera()
        scene = point_scene([world_at_pixel(cam, 31.0, 31.0, 3.0)])
        depth = DepthImage(values=np.full((64, 64), 0.5))
        # 3.0 > 0.5 + depth_bound 0.5: hidden behind the rendered surface
        assert bbox_from_object(
            object_over({0}), scene, cam, depth, config_defaults(),
            min_visible=1,
        ) is None

    def test_occlusion_slack_admits_near_surface(self):
        cam = identity_camera()
        scene = point_scene([world_at_pixel(cam, 31.0, 31.0, 3.0)])
        depth = DepthImage(values=np.full((64, 64), 2.6))
        box = bbox_from_object(
            object_over({0}), scene, cam, depth, config_defaults(),
            min_visible=1,
        )
        assert box is not None  # 3.0 <= 2.6 + 0.5

    def test_clipped_to_image_bounds(self):
        cam = identity_camera(width=64, height=64, focal=50.0)
        scene = point_scene([world_at_pixel(cam, 1.0, 1.0, 2.0)], scale=0.5)
        depth = DepthImage(values=np.full((64, 64), np.inf))
        box = bbox_from_object(
            object_over({0}), scene, cam, depth, config_defaults(),
            min_visible=1,
        )
        assert box is not None
        assert box.x_min == 0.0 and box.y_min == 0.0

    def test_min_visible_cutoff(self):
        cam = identity_camera()
        pts = [world_at_pixel(cam, 20.0 + i, 20.0, 2.0) for i in range(4)]
        scene = point_scene(pts)
        depth = DepthImage(values=np.full((64, 64), np.inf))
        obj = object_over(set(range(4)))
        cfg = config_defaults()
        assert bbox_from_object(obj, scene, cam, depth, cfg, min_visible=5) is None
        assert bbox_from_object(obj, scene, cam, depth, cfg, min_visible=4) is not None

    def test_boxes_for_view_ordered_by_id(self):
        from splatbook.model import ObjectCodebook

        cam = identity_camera()
        pts = [world_at_pixel(cam, 10.0, 10.0, 2.0),
               world_at_pixel(cam, 40.0, 40.0, 2.0)]
        scene = point_scene(pts)
        depth = DepthImage(values=np.full((64, 64), np.inf))
        cb = ObjectCodebook()
        hi = object_over({1}); hi.object_id = 5
        lo = object_over({0}); lo.object_id = 2
        cb.objects = [hi, lo]
        cb.next_id = 6
        boxes = boxes_for_view(cb, scene, cam, depth, config_defaults(),
                               min_visible=1)
        assert [b.object_id for b in boxes] == [2, 5]


def bb(view, label, conf, x0, y0, x1, y1):
    return BBox(view_id=view, label=label, confidence=conf,
                x_min=x0, y_min=y0, x_max=x1, y_max=y1)


class TestBoxIou:
    def test_identical(self):
        a = bb("v", "c", 1.0, 0, 0, 10, 10)
        assert box_iou(a, a) == 1.0

    def test_disjoint(self):
        assert box_iou(bb("v", "c", 1, 0, 0, 5, 5),
                       bb("v", "c", 1, 6, 6, 9, 9)) == 0.0

    def test_half_overlap(self):
        a = bb("v", "c", 1, 0, 0, 10, 10)
        b = bb("v", "c", 1, 5, 0, 15, 10)
        assert box_iou(a, b) == pytest.approx(50.0 / 150.0, rel=1e-12)

    def test_zero_area(self):
        a = bb("v", "c", 1, 5, 5, 5, 5)
        assert box_iou(a, a) == 0.0

    def test_matches_scalar_oracle(self, rng):
        for _ in range(100):
            c = rng.uniform(0, 50, 8)
            a = bb("v", "c", 1, c[0], c[1], c[0] + c[2], c[1] + c[3])
            b = bb("v", "c", 1, c[4], c[5], c[4] + c[6], c[5] + c[7])
            want = box_iou_scalar(
                (a.x_min, a.y_min, a.x_max, a.y_max),
                (b.x_min, b.y_min, b.x_max, b.y_max),
            )
            assert box_iou(a, b) == pytest.approx(want, abs=1e-12)


def random_detection_instance(rng, n_views=3, max_gt=4, max_pred=6):
    """One class; confidences drawn without ties."""
    gts, preds = [], []
    for v in range(n_views):
        view = f"v{v}"
        for _ in range(int(rng.integers(0, max_gt))):
            x, y = rng.uniform(0, 40, 2)
            w, h = rng.uniform(5, 20, 2)
            gts.append(bb(view, "c", 1.0, x, y, x + w, y + h))
    confs = rng.permutation(np.linspace(0.05, 0.95, max_pred * n_views))
    ci = 0
    for v in range(n_views):
        view = f"v{v}"
        for _ in range(int(rng.integers(1, max_pred))):
            if rng.random() < 0.6 and gts:
                base = gts[int(rng.integers(0, len(gts)))]
                if base.view_id != view:
                    continue
                jx, jy = rng.uniform(-3, 3, 2)
                preds.append(bb(view, "c", float(confs[ci]),
                                base.x_min + jx, base.y_min + jy,
                                base.x_max + jx, base.y_max + jy))
            else:
                x, y = rng.uniform(0, 40, 2)
                w, h = rng.uniform(5, 20, 2)
                preds.append(bb(view, "c", float(confs[ci]),
                                x, y, x + w, y + h))
            ci += 1
    return preds, gts


class TestDetectionMetrics:
    def test_hand_example(self):
        # 2 ground truths, three ranked predictions: hit, miss, hit
        gts = [bb("v", "c", 1.0, 0, 0, 10, 10),
               bb("v", "c", 1.0, 30, 30, 40, 40)]
        preds = [bb("v", "c", 0.9, 0, 0, 10, 10),
                 bb("v", "c", 0.8, 60, 60, 70, 70),
                 bb("v", "c", 0.7, 30, 30, 40, 40)]
        report = detection_metrics(preds, gts)
        assert report.per_class["c"]["ap"] == pytest.approx(83.33, abs=0.01)
        assert report.map == pytest.approx(83.33, abs=0.01)

    def test_matches_threshold_sweep_oracle(self, rng):
        for _ in range(40):
            preds, gts = random_detection_instance(rng)
            if not gts:
                continue
            report = detection_metrics(preds, gts)
            want = oracle_class_ap(
                [(b.view_id, b.confidence,
                  (b.x_min, b.y_min, b.x_max, b.y_max)) for b in preds],
                [(b.view_id, (b.x_min, b.y_min, b.x_max, b.y_max))
                 for b in gts],
            )
            assert report.per_class["c"]["ap"] / 100.0 == pytest.approx(
                want, abs=1e-9
            )

    def test_perfect_detection(self):
        gts = [bb("v0", "c", 1.0, 0, 0, 10, 10),
               bb("v1", "c", 1.0, 5, 5, 15, 15)]
        preds = [bb(g.view_id, "c", 0.9, g.x_min, g.y_min, g.x_max, g.y_max)
                 for g in gts]
        report = detection_metrics(preds, gts)
        assert report.map == 100.0
        assert report.mlamr <= 0.01  # clamp floor, not an exact zero
        assert report.n_images == 2

    def test_no_predictions(self):
        gts = [bb("v", "c", 1.0, 0, 0, 10, 10)]
        report = detection_metrics([], gts)
        assert report.map == 0.0
        assert report.mlamr == 100.0

    def test_pred_only_class_skipped(self):
        gts = [bb("v", "chair", 1.0, 0, 0, 10, 10)]
        preds = [bb("v", "chair", 0.9, 0, 0, 10, 10),
                 bb("v", "ghost", 0.8, 20, 20, 30, 30)]
        report = detection_metrics(preds, gts)
        assert report.skipped_classes == ("ghost",)
        assert set(report.per_class) == {"chair"}
        assert report.map == 100.0

    def test_duplicate_hits_count_once(self):
        gts = [bb("v", "c", 1.0, 0, 0, 10, 10)]
        preds = [bb("v", "c", 0.9, 0, 0, 10, 10),
                 bb("v", "c", 0.8, 0, 0, 10, 10)]
        report = detection_metrics(preds, gts)
        # second hit is a duplicate: counted as FP, AP stays at 100
        assert report.per_class["c"]["ap"] == pytest.approx(100.0)

    def test_explicit_image_count(self):
        gts = [bb("v", "c", 1.0, 0, 0, 10, 10)]
        report = detection_metrics([], gts, n_images=24)
        assert report.n_images == 24
