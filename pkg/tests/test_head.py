"""Detection head contracts: geometry, matching, loss, decoding."""

import io

import numpy as np
import pytest

import mdet.autodiff as ad
import mdet.fpn as fpn
import mdet.head as hd
from mdet.errors import AnnotationError, CapacityError, NumericError
from mdet.ptree import cast_params, named_parameters


def _shapely_giou(a, b):
    """Independent GIoU via polygon geometry."""
    from shapely.geometry import box as sbox

    def to_poly(c):
        cx, cy, w, h = c
        return sbox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    pa, pb = to_poly(a), to_poly(b)
    inter = pa.intersection(pb).area
    union = pa.union(pb).area
    hull = pa.union(pb).envelope.area
    return inter / union - (hull - union) / hull


@pytest.mark.parametrize("seed", range(10))
def test_giou_matches_geometry_oracle(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        a = [rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
             rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)]
        b = [rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8),
             rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)]
        assert np.isclose(hd.giou(a, b), _shapely_giou(a, b),
                          rtol=1e-9, atol=1e-12)


def test_giou_fixed_cases():
    a = [0.5, 0.5, 0.2, 0.2]
    assert hd.giou(a, a) == 1.0
    # Same center, prediction twice as wide: IoU 0.5 and the hull is
    # the union, so GIoU is exactly 0.5.
    wide = [0.5, 0.5, 0.4, 0.2]
    assert np.isclose(hd.giou(a, wide), 0.5)
    # Disjoint corners: hull 0.81, union 0.02.
    d = hd.giou([0.1, 0.1, 0.1, 0.1], [0.9, 0.9, 0.1, 0.1])
    assert np.isclose(d, -(0.81 - 0.02) / 0.81)
    assert -1.0 < d < 0.0


def test_box_loss_fixed_cases():
    a = [0.5, 0.5, 0.2, 0.2]
    assert hd.box_loss(a, a) == 0.0
    wide = [0.5, 0.5, 0.4, 0.2]
    # L1 = |dw| = 0.2, GIoU = 0.5: 5 * 0.2 + 2 * 0.5 = 2.0
    assert np.isclose(hd.box_loss(a, wide), 2.0)
    far = hd.box_loss([0.1, 0.1, 0.1, 0.1], [0.9, 0.9, 0.1, 0.1])
    assert np.isclose(far, 5 * 1.6 + 2 * (1 + (0.81 - 0.02) / 0.81))


def test_box_loss_gradients():
    rng = np.random.default_rng(0)
    a = ad.param(rng.uniform(0.3, 0.7, (5, 4)))
    b = ad.param(rng.uniform(0.3, 0.7, (5, 4)))
    rep = ad.grad_check(
        lambda: ad.sum_all(hd.box_loss_rows(a, b)), [a, b],
        step=1e-7, names=["a", "b"])
    assert rep.max_relative_error < 1e-3, rep.per_parameter


def test_box_unit_conversions_round_trip():
    rng = np.random.default_rng(1)
    px = np.stack([rng.uniform(0, 100, 6), rng.uniform(0, 60, 6),
                   rng.uniform(1, 50, 6), rng.uniform(1, 40, 6)], axis=1)
    norm = hd.boxes_px_to_norm(px, (128, 160))
    assert np.all(norm >= 0) and np.all(norm[:, 2:] <= 1)
    back = hd.boxes_norm_to_px(norm, (128, 160))
    assert np.allclose(back, px, atol=1e-9)
    with pytest.raises(AnnotationError):
        hd.boxes_px_to_norm([[0, 0, 0, 5]], (128, 160))


@pytest.mark.parametrize("seed", range(25))
def test_hungarian_matches_brute_force_random(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    m = int(rng.integers(n, 8))
    cost = rng.uniform(-3, 3, (n, m))
    got = hd.hungarian_match(cost)
    ref = hd.brute_force_match(cost)
    assert got.assignment == ref.assignment
    assert got.total_cost == ref.total_cost
    assert got.unmatched_queries == ref.unmatched_queries


def test_hungarian_tie_breaking_is_lexicographic():
    allsame = np.ones((3, 5))
    assert hd.hungarian_match(allsame).assignment == (0, 1, 2)
    # Two optima with equal total: (0,1) and (1,0); pick (0,1).
    two = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert hd.hungarian_match(two).assignment == (0, 1)
    # Integer costs with a forced crossing.
    cross = np.array([[1.0, 2.0], [2.0, 1.0]])
    m = hd.hungarian_match(cross)
    assert m.assignment == (0, 1) and m.total_cost == 2.0


def test_hungarian_rejects_overflow_and_nan():
    with pytest.raises(CapacityError):
        hd.hungarian_match(np.zeros((3, 2)))
    bad = np.zeros((2, 3))
    bad[0, 1] = np.nan
    with pytest.raises(NumericError):
        hd.hungarian_match(bad)


def test_hungarian_empty_targets():
    m = hd.hungarian_match(np.zeros((0, 4)))
    assert m.assignment == () and m.total_cost == 0.0
    assert m.unmatched_queries == (0, 1, 2, 3)


def _tiny_detections(rng, m=6, classes=3, dtype=np.float64):
    logits = ad.param(rng.standard_normal((m, classes + 1)).astype(dtype))
    boxes = ad.sigmoid(ad.param(
        rng.standard_normal((m, 4)).astype(dtype)))
    return hd.DetectionSet(class_logits=logits, boxes=boxes)


def test_match_cost_matrix_agrees_with_scalar_op():
    rng = np.random.default_rng(5)
    det = _tiny_detections(rng)
    gt_classes = [0, 2]
    gt_boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.6, 0.1, 0.3]])
    mat = hd.match_cost_matrix(det, gt_classes, gt_boxes)
    probs = det.probabilities()
    for i in range(2):
        for q in range(det.query_count):
            ref = hd.match_cost(probs[q], det.boxes.data[q],
                                gt_classes[i], gt_boxes[i])
            assert np.isclose(mat[i, q], ref, rtol=1e-9)


def test_hungarian_loss_zero_targets_is_pure_no_object():
    rng = np.random.default_rng(6)
    det = _tiny_detections(rng)
    loss, match = hd.hungarian_loss(det, [], np.zeros((0, 4)))
    probs = det.probabilities()
    ref = -0.1 * np.sum(np.log(np.clip(probs[:, -1], 1e-7, 1.0)))
    assert np.isclose(loss.item(), ref, rtol=1e-7)
    assert match.assignment == ()


def test_hungarian_loss_perfect_predictions_small():
    # Perfectly confident correct classes and exact boxes: only the
    # (also perfect) no-object term remains, which log-clamps to ~0.
    gt_boxes = np.array([[0.3, 0.4, 0.2, 0.1], [0.6, 0.7, 0.1, 0.2]])
    logits = np.full((4, 4), -30.0)
    logits[0, 1] = 30.0   # query 0 -> class 1
    logits[1, 0] = 30.0   # query 1 -> class 0
    logits[2, 3] = 30.0
    logits[3, 3] = 30.0
    boxes = np.full((4, 4), 0.5)
    boxes[0] = gt_boxes[1]  # note: swapped on purpose, matcher sorts it out
    boxes[1] = gt_boxes[0]
    det = hd.DetectionSet(class_logits=ad.tensor(logits),
                          boxes=ad.tensor(boxes))
    loss, match = hd.hungarian_loss(det, [0, 1], gt_boxes)
    assert match.assignment == (1, 0)
    assert loss.item() < 1e-5


def test_hungarian_loss_gradients():
    rng = np.random.default_rng(7)
    logits = ad.param(rng.standard_normal((5, 4)))
    raw_boxes = ad.param(rng.standard_normal((5, 4)))
    gt_boxes = np.array([[0.4, 0.4, 0.3, 0.2], [0.7, 0.3, 0.2, 0.2]])

    def f():
        det = hd.DetectionSet(class_logits=ad.identity(logits),
                              boxes=ad.sigmoid(raw_boxes))
        loss, _ = hd.hungarian_loss(det, [1, 2], gt_boxes)
        return loss

    rep = ad.grad_check(f, [logits, raw_boxes], step=1e-6,
                        names=["logits", "boxes"])
    assert rep.max_relative_error < 1e-3, rep.per_parameter


def _tiny_pyramid(rng, width=8):
    p = fpn.init_fpn(width, 4, rng, levels=2)
    feat = ad.tensor(rng.standard_normal((width, 8, 8)).astype(np.float32))
    return fpn.run_fpn(feat, p)


def test_decode_shapes_and_ranges():
    rng = np.random.default_rng(8)
    pyr = _tiny_pyramid(rng)
    head = hd.init_head(8, 3, 10, 2, rng)
    det = hd.decode(pyr, head)
    assert det.class_logits.data.shape == (10, 4)
    assert det.boxes.data.shape == (10, 4)
    assert np.all(det.boxes.data > 0) and np.all(det.boxes.data < 1)
    probs = det.probabilities()
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    # Fresh head leans toward "no object" by construction.
    assert probs[:, -1].mean() > 0.5


def test_decode_deterministic():
    rng = np.random.default_rng(9)
    pyr = _tiny_pyramid(rng)
    head = hd.init_head(8, 3, 6, 2, rng)
    a = hd.decode(pyr, head)
    b = hd.decode(pyr, head)
    assert np.array_equal(a.class_logits.data, b.class_logits.data)
    assert np.array_equal(a.boxes.data, b.boxes.data)


def test_decode_gradients_reach_head_parameters():
    rng = np.random.default_rng(10)
    width = 4
    p = fpn.init_fpn(width, 3, rng, levels=2)
    cast_params(p, np.float64)
    feat = rng.standard_normal((width, 4, 4))
    head = hd.init_head(width, 2, 3, 2, rng)
    cast_params(head, np.float64)
    named = named_parameters(head)
    gt = np.array([[0.5, 0.5, 0.3, 0.3]])

    def f():
        pyr = fpn.run_fpn(ad.tensor(feat), p)
        det = hd.decode(pyr, head)
        loss, _ = hd.hungarian_loss(det, [1], gt)
        return loss

    rep = ad.grad_check(f, list(named.values()), step=1e-6,
                        names=list(named), samples=8)
    assert rep.max_relative_error < 1e-3, rep.per_parameter


def test_detection_records_and_jsonl_round_trip():
    rng = np.random.default_rng(11)
    det = _tiny_detections(rng)
    recs = hd.detection_records(det, image_id=7, image_size=(64, 96))
    assert len(recs) == det.query_count
    probs = det.probabilities()
    for q, rec in enumerate(recs):
        assert rec["image_id"] == 7
        assert 0 <= rec["category_id"] < 3
        assert np.isclose(rec["score"], probs[q, :-1].max())
    buf = io.StringIO()
    hd.dump_detections_jsonl(buf, recs)
    back = hd.load_detections_jsonl(io.StringIO(buf.getvalue()))
    assert back == recs
    # Threshold filters.
    top = hd.detection_records(det, 7, (64, 96), score_threshold=0.9)
    assert all(r["score"] >= 0.9 for r in top)
