import numpy as np
import pytest

from oshot import boxgeom as bg
from oshot import diffcore as dc
from oshot.boxgeom import Detection
from oshot.diffcore import Graph, Tensor
from oshot.errors import ContractViolation


def dyadic_boxes(rng, n, w, h, grid=16):
    """Random valid boxes on a 1/grid lattice; exact under frame-flip
    subtractions, so rotation round-trips are bit-exact."""
    x1 = rng.integers(0, int(w * grid) - 1, size=n)
    y1 = rng.integers(0, int(h * grid) - 1, size=n)
    x2 = rng.integers(x1 + 1, int(w * grid), size=n, endpoint=True)
    y2 = rng.integers(y1 + 1, int(h * grid), size=n, endpoint=True)
    return np.stack([x1, y1, x2, y2], axis=1) / grid


class TestIou:
    def test_self_overlap(self):
        b = np.array([3.0, 4.0, 10.0, 12.0])
        assert bg.iou(b, b) == 1.0

    def test_disjoint(self):
        assert bg.iou([0, 0, 1, 1], [5, 5, 6, 6]) == 0.0

    def test_hand_third(self):
        assert bg.iou([0, 0, 2, 2], [1, 0, 3, 2]) == pytest.approx(1 / 3, abs=1e-12)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = dyadic_boxes(rng, 1, 20, 20)[0]
            b = dyadic_boxes(rng, 1, 20, 20)[0]
            v = bg.iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == bg.iou(b, a)

    def test_pairwise_matches_scalar(self):
        rng = np.random.default_rng(1)
        a = dyadic_boxes(rng, 6, 20, 20)
        b = dyadic_boxes(rng, 4, 20, 20)
        mat = bg.pairwise_iou(a, b)
        for i in range(6):
            for j in range(4):
                assert mat[i, j] == pytest.approx(bg.iou(a[i], b[j]), abs=1e-12)

    def test_invalid_box_rejected(self):
        with pytest.raises(ContractViolation):
            bg.iou([2, 0, 1, 1], [0, 0, 1, 1])


class TestRotateImage:
    def test_identity_q4(self):
        img = np.random.default_rng(0).random((3, 4, 6)).astype(np.float32)
        assert bg.rotate_image(img, 4) is img

    def test_inverse_composition(self):
        img = np.random.default_rng(1).random((3, 4, 6)).astype(np.float32)
        for q in (1, 2, 3):
            back = bg.rotate_image(bg.rotate_image(img, q), 4 - q)
            assert np.array_equal(back, img)

    def test_four_quarter_turns_bit_exact(self):
        img = np.random.default_rng(2).random((2, 8, 8)).astype(np.float32)
        out = img
        for _ in range(4):
            out = bg.rotate_image(out, 1)
        assert np.array_equal(out, img)

    def test_corner_mapping_q1(self):
        # pixel (x, y) -> (y, W-1-x): top-right pixel lands at the origin.
        img = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
        out = bg.rotate_image(img, 1)
        assert out.shape == (1, 3, 2)
        assert out[0, 0, 0] == img[0, 0, 2]
        for y in range(2):
            for x in range(3):
                assert out[0, 2 - x, y] == img[0, y, x]

    def test_dims_swap_for_odd_q(self):
        img = np.zeros((3, 4, 10), dtype=np.float32)
        assert bg.rotate_image(img, 1).shape == (3, 10, 4)
        assert bg.rotate_image(img, 2).shape == (3, 4, 10)
        assert bg.rotate_image(img, 3).shape == (3, 10, 4)

    def test_bad_q(self):
        with pytest.raises(ContractViolation):
            bg.rotate_image(np.zeros((1, 2, 2)), 0)


class TestRotateBox:
    def test_identity_q4(self):
        b = np.array([1.0, 2.0, 3.0, 4.0])
        assert np.array_equal(bg.rotate_box(b, 4, 10, 10), b)

    def test_centered_square_fixed(self):
        b = np.array([3.0, 3.0, 7.0, 7.0])
        for q in (1, 2, 3, 4):
            assert np.allclose(bg.rotate_box(b, q, 10, 10), b)

    def test_hand_example(self):
        out = bg.rotate_box(np.array([10.0, 5.0, 30.0, 25.0]), 1, 100, 50)
        assert np.array_equal(out, [5.0, 70.0, 25.0, 90.0])

    def test_round_trip_exact(self):
        rng = np.random.default_rng(3)
        w, h = 128.0, 96.0
        boxes = dyadic_boxes(rng, 200, w, h)
        for q in (1, 2, 3):
            rw, rh = bg.rotated_extents(q, w, h)
            fwd = bg.rotate_box(boxes, q, w, h)
            back = bg.rotate_box(fwd, 4 - q, rw, rh)
            assert np.array_equal(back, boxes)

    def test_stays_valid_in_rotated_frame(self):
        rng = np.random.default_rng(4)
        w, h = 100.0, 60.0
        boxes = dyadic_boxes(rng, 100, w, h)
        for q in (1, 2, 3, 4):
            rw, rh = bg.rotated_extents(q, w, h)
            out = bg.rotate_box(boxes, q, w, h)
            assert np.all(out[:, 0] < out[:, 2])
            assert np.all(out[:, 1] < out[:, 3])
            assert np.all(out[:, 0] >= 0) and np.all(out[:, 2] <= rw)
            assert np.all(out[:, 1] >= 0) and np.all(out[:, 3] <= rh)


class TestNms:
    def test_empty(self):
        assert bg.nms([], 0.5) == []

    def test_disjoint_kept(self):
        dets = [
            Detection(0, 0.8, np.array([0.0, 0.0, 2.0, 2.0])),
            Detection(0, 0.9, np.array([5.0, 5.0, 7.0, 7.0])),
        ]
        out = bg.nms(dets, 0.5)
        assert len(out) == 2
        assert out[0].score == 0.9  # sorted by score

    def test_greedy_suppression(self):
        a = Detection(0, 0.9, np.array([0.0, 0.0, 10.0, 10.0]))
        b = Detection(0, 0.8, np.array([0.0, 1.0, 10.0, 11.0]))  # IoU ~0.8
        out = bg.nms([a, b], 0.5)
        assert len(out) == 1 and out[0].score == 0.9

    def test_tie_breaks_by_earlier_index(self):
        a = Detection(0, 0.5, np.array([0.0, 0.0, 10.0, 10.0]))
        b = Detection(0, 0.5, np.array([0.0, 0.0, 10.0, 10.0]))
        out = bg.nms([a, b], 0.9)
        assert out[0] is a

    def test_survivors_below_threshold(self):
        rng = np.random.default_rng(5)
        boxes = dyadic_boxes(rng, 50, 40, 40)
        scores = rng.random(50)
        keep = bg.nms_indices(boxes, scores, 0.4)
        kept = boxes[keep]
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert bg.iou(kept[i], kept[j]) <= 0.4
        assert np.all(np.diff(scores[keep]) <= 0)
        assert set(keep).issubset(range(50))


class TestAnchors:
    def test_centers_on_stride_grid(self):
        grid = bg.gen_anchors(2, 2, 8, (10.0,), (1.0,))
        centers = (grid.boxes[:, :2] + grid.boxes[:, 2:]) / 2
        assert centers.tolist() == [[4, 4], [12, 4], [4, 12], [12, 12]]

    def test_unit_ratio_square(self):
        grid = bg.gen_anchors(3, 3, 8, (16.0, 32.0), (1.0,))
        w = grid.boxes[:, 2] - grid.boxes[:, 0]
        h = grid.boxes[:, 3] - grid.boxes[:, 1]
        assert np.allclose(w, h)

    def test_full_grid_count(self):
        grid = bg.gen_anchors(16, 16, 8, (16.0, 32.0, 64.0), (1.0, 0.5, 2.0))
        assert grid.boxes.shape == (2304, 4)

    def test_ratio_geometry(self):
        grid = bg.gen_anchors(1, 1, 8, (32.0,), (0.5, 2.0))
        w = grid.boxes[:, 2] - grid.boxes[:, 0]
        h = grid.boxes[:, 3] - grid.boxes[:, 1]
        assert w[0] == pytest.approx(32 * np.sqrt(0.5))
        assert h[0] == pytest.approx(32 / np.sqrt(0.5))
        assert w[0] * h[0] == pytest.approx(32 * 32)  # area preserved


class TestDeltas:
    def test_identity(self):
        b = np.array([0.0, 0.0, 10.0, 10.0])
        assert np.allclose(bg.encode_deltas(b, b), 0.0)

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            g = dyadic_boxes(rng, 1, 50, 50)[0]
            a = dyadic_boxes(rng, 1, 50, 50)[0]
            back = bg.decode_deltas(bg.encode_deltas(g, a), a)
            assert np.allclose(back, g, atol=1e-5)

    def test_hand_example(self):
        d = bg.encode_deltas(np.array([5.0, 0.0, 15.0, 10.0]), np.array([0.0, 0.0, 10.0, 10.0]))
        assert np.allclose(d, [0.5, 0.0, 0.0, 0.0])

    def test_degenerate_rejected(self):
        with pytest.raises(ContractViolation):
            bg.encode_deltas(np.array([0.0, 0.0, 0.0, 10.0]), np.array([0.0, 0.0, 10.0, 10.0]))


class TestAssignment:
    def test_perfect_anchor_is_foreground(self):
        gt = np.array([[8.0, 8.0, 24.0, 24.0]])
        anchors = np.array([[8.0, 8.0, 24.0, 24.0], [100.0, 100.0, 120.0, 120.0]])
        t = bg.assign_anchor_targets(anchors, gt, 0.7, 0.3)
        assert t.labels[0] == 1
        assert np.allclose(t.deltas[0], 0.0)

    def test_no_overlap_is_background(self):
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        anchors = np.array([[50.0, 50.0, 60.0, 60.0], [0.0, 0.0, 10.0, 10.0]])
        t = bg.assign_anchor_targets(anchors, gt, 0.7, 0.3)
        assert t.labels[0] == 0

    def test_between_thresholds_is_ignore(self):
        # IoU exactly 0.5 between pos 0.7 / neg 0.3, with a separate best
        # anchor so the coverage rule does not promote it.
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        anchors = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 5.0, 10.0, 15.0]])
        t = bg.assign_anchor_targets(anchors, gt, 0.7, 0.3)
        assert t.labels[1] == -1

    def test_coverage_guarantee(self):
        # Best anchor promoted to foreground even below pos threshold.
        gt = np.array([[0.0, 0.0, 8.0, 8.0]])
        anchors = np.array([[0.0, 0.0, 16.0, 16.0], [40.0, 40.0, 56.0, 56.0]])
        t = bg.assign_anchor_targets(anchors, gt, 0.7, 0.3)
        assert t.labels[0] == 1

    def test_deltas_only_for_foreground(self):
        rng = np.random.default_rng(7)
        gts = dyadic_boxes(rng, 3, 100, 100)
        anchors = dyadic_boxes(rng, 50, 100, 100)
        t = bg.assign_anchor_targets(anchors, gts, 0.7, 0.3)
        assert set(np.unique(t.labels)).issubset({-1, 0, 1})
        assert t.deltas.shape == (50, 4)

    def test_no_gts_all_background(self):
        anchors = dyadic_boxes(np.random.default_rng(8), 10, 50, 50)
        t = bg.assign_anchor_targets(anchors, np.zeros((0, 4)), 0.7, 0.3)
        assert np.all(t.labels == 0)

    def test_threshold_ordering_enforced(self):
        with pytest.raises(ContractViolation):
            bg.assign_anchor_targets(np.zeros((0, 4)), np.zeros((0, 4)), 0.3, 0.7)


class TestRoiPool:
    def test_constant_field(self):
        fmap = Tensor(np.full((3, 8, 8), 2.5, dtype=np.float32))
        out = bg.roi_pool(fmap, np.array([5.0, 9.0, 40.0, 30.0]), 8, (4, 4))
        assert np.all(out.data == 2.5)

    def test_full_box_single_bin_is_global_max(self):
        rng = np.random.default_rng(9)
        data = rng.normal(size=(4, 6, 6)).astype(np.float32)
        out = bg.roi_pool(Tensor(data), np.array([0.0, 0.0, 48.0, 48.0]), 8, (1, 1))
        assert np.allclose(out.data.reshape(4), data.reshape(4, -1).max(axis=1))

    def test_output_shape_contract(self):
        rng = np.random.default_rng(10)
        fmap = Tensor(rng.normal(size=(2, 16, 16)).astype(np.float32))
        for box in ([0.0, 0.0, 3.0, 3.0], [10.0, 20.0, 90.0, 100.0], [0.0, 0.0, 128.0, 128.0]):
            out = bg.roi_pool(fmap, np.array(box), 8, (4, 4))
            assert out.shape == (2, 4, 4)

    def test_outside_box_rejected(self):
        fmap = Tensor(np.zeros((1, 4, 4), dtype=np.float32))
        with pytest.raises(ContractViolation):
            bg.roi_pool(fmap, np.array([40.0, 0.0, 50.0, 10.0]), 8, (2, 2))

    def test_gradient_reaches_argmax_cells(self):
        rng = np.random.default_rng(11)
        fmap = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True, dtype=np.float64)
        err = dc.finite_diff_check(
            lambda f: dc.tsum(bg.roi_pool(f, np.array([0.0, 0.0, 32.0, 32.0]), 8, (2, 2))),
            [fmap],
        )
        assert err < 1e-4
