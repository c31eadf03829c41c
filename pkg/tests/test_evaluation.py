import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamdet import (
    BoundingBox,
    Detection,
    average_precision,
    evaluate_detections,
    iou,
    nms,
    omega_map,
    read_curve_alphas,
    write_curves,
)
from streamdet.evaluation import EvalReport

from conftest import make_annotation


def nms_oracle(dets, thresh):
    """Reference greedy suppression built the slow way, class by class."""
    out = []
    for class_id in sorted({d.class_id for d in dets}):
        pool = sorted(
            [d for d in dets if d.class_id == class_id],
            key=lambda d: (-d.score, d.box.as_tuple()),
        )
        while pool:
            top = pool.pop(0)
            out.append(top)
            pool = [d for d in pool if iou(top.box, d.box) <= thresh]
    out.sort(key=lambda d: (-d.score, d.box.as_tuple(), d.class_id))
    return out


def random_dets(rng, n, classes=(1, 2)):
    dets = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, 60, 2)
        w, h = rng.uniform(4, 30, 2)
        dets.append(
            Detection(
                BoundingBox(x1, y1, x1 + w, y1 + h),
                int(rng.choice(classes)),
                float(np.round(rng.uniform(0, 1), 2)),  # rounding forces ties
            )
        )
    return dets


def test_nms_matches_oracle_randomized():
    rng = np.random.default_rng(0)
    for case in range(1000):
        dets = random_dets(rng, int(rng.integers(0, 11)))
        got = nms(dets, iou_thresh=0.3)
        want = nms_oracle(dets, 0.3)
        assert got == want, f"case {case}"


def test_nms_result_invariants():
    rng = np.random.default_rng(1)
    for _ in range(200):
        dets = random_dets(rng, 10)
        kept = nms(dets, iou_thresh=0.3)
        by_class = {}
        for d in kept:
            for other in by_class.get(d.class_id, []):
                assert iou(d.box, other.box) <= 0.3
            by_class.setdefault(d.class_id, []).append(d)
        # every dropped detection conflicts with something kept at equal or better rank
        for d in dets:
            if d in kept:
                continue
            rank = (-d.score, d.box.as_tuple())
            assert any(
                k.class_id == d.class_id
                and iou(k.box, d.box) > 0.3
                and (-k.score, k.box.as_tuple()) <= rank
                for k in kept
            )


def test_nms_input_order_invariance():
    rng = np.random.default_rng(2)
    dets = random_dets(rng, 10)
    base = nms(dets)
    for _ in range(20):
        perm = list(dets)
        rng.shuffle(perm)
        assert nms(perm) == base


def test_nms_cross_class_no_suppression():
    a = Detection(BoundingBox(0, 0, 10, 10), 1, 0.9)
    b = Detection(BoundingBox(0, 0, 10, 10), 2, 0.8)
    assert nms([a, b]) == [a, b]


def test_nms_truncates_globally():
    dets = [
        Detection(BoundingBox(100 * i, 0, 100 * i + 10, 10), 1, 1.0 - i * 1e-3)
        for i in range(150)
    ]
    kept = nms(dets)
    assert len(kept) == 128
    assert kept[0].score == 1.0


def test_ap_fixture_five_sixths():
    # two gt boxes, detections ranked tp, fp, tp: all-point AP = 5/6
    gt = {"img": [BoundingBox(0, 0, 10, 10), BoundingBox(50, 50, 60, 60)]}
    dets = [
        ("img", BoundingBox(0, 0, 10, 10), 0.9),
        ("img", BoundingBox(80, 80, 90, 90), 0.8),
        ("img", BoundingBox(50, 50, 60, 60), 0.7),
    ]
    assert average_precision(dets, gt) == pytest.approx(5 / 6, abs=1e-9)


def test_ap_perfect_and_empty():
    gt = {"img": [BoundingBox(0, 0, 10, 10)]}
    assert average_precision([("img", BoundingBox(0, 0, 10, 10), 1.0)], gt) == 1.0
    assert average_precision([], gt) == 0.0


def test_ap_zero_gt_raises():
    with pytest.raises(ValueError):
        average_precision([("img", BoundingBox(0, 0, 10, 10), 1.0)], {"img": []})


def test_ap_duplicate_detections_count_once():
    gt = {"img": [BoundingBox(0, 0, 10, 10)]}
    dets = [
        ("img", BoundingBox(0, 0, 10, 10), 0.9),
        ("img", BoundingBox(0, 0, 10, 10), 0.8),  # same gt already matched
    ]
    ap = average_precision(dets, gt)
    assert ap == 1.0  # second one is a fp after full recall, area unchanged


def test_ap_matches_highest_iou_unmatched_gt():
    gt = {"img": [BoundingBox(0, 0, 10, 10), BoundingBox(2, 2, 12, 12)]}
    # one detection overlapping both, closer to the second box
    dets = [("img", BoundingBox(2, 2, 12, 12), 0.9), ("img", BoundingBox(0, 0, 10, 10), 0.8)]
    assert average_precision(dets, gt) == 1.0


def test_ap_order_of_input_irrelevant():
    rng = np.random.default_rng(3)
    gt = {
        "a": [BoundingBox(0, 0, 10, 10), BoundingBox(30, 30, 45, 45)],
        "b": [BoundingBox(5, 5, 20, 20)],
    }
    dets = []
    for img, boxes in gt.items():
        for bx in boxes:
            dets.append((img, BoundingBox(bx.x1 + 1, bx.y1, bx.x2 + 1, bx.y2), rng.uniform(0.3, 1)))
        dets.append((img, BoundingBox(70, 70, 80, 80), rng.uniform(0, 1)))
    base = average_precision(dets, gt)
    for _ in range(10):
        perm = list(dets)
        rng.shuffle(perm)
        assert average_precision(perm, gt) == base


def test_ap_eleven_point_differs_but_close():
    rng = np.random.default_rng(4)
    gt = {"img": [BoundingBox(10 * i, 0, 10 * i + 8, 8) for i in range(10)]}
    dets = []
    for i in range(10):
        if rng.uniform() < 0.7:
            dets.append(("img", gt["img"][i], rng.uniform(0.5, 1.0)))
        dets.append(("img", BoundingBox(10 * i, 50, 10 * i + 8, 58), rng.uniform(0, 0.6)))
    full = average_precision(dets, gt)
    eleven = average_precision(dets, gt, eleven_point=True)
    assert full != eleven
    assert abs(full - eleven) < 0.15


def test_evaluate_detections_report():
    ann1 = make_annotation("a", boxes=((0, 0, 10, 10, 1),), w=64, h=64)
    ann2 = make_annotation("b", boxes=((5, 5, 25, 25, 2),), w=64, h=64)
    dets = {
        "a": [Detection(BoundingBox(0, 0, 10, 10), 1, 0.9)],
        "b": [Detection(BoundingBox(5, 5, 25, 25), 2, 0.8)],
    }
    report = evaluate_detections(dets, {"a": ann1, "b": ann2}, classes=[1, 2, 3], t=2)
    assert report.t == 2
    assert report.per_class_ap == {1: 1.0, 2: 1.0}
    assert report.undefined_classes == frozenset({3})
    assert report.classes_evaluated == frozenset({1, 2})
    assert report.map == 1.0
    js = report.to_json()
    assert js["undefined_classes"] == [3]


def test_evaluate_detections_rejects_unknown_gt_class():
    ann = make_annotation("a", boxes=((0, 0, 10, 10, 5),), w=64, h=64)
    with pytest.raises(ValueError):
        evaluate_detections({}, {"a": ann}, classes=[1, 2])


def test_evaluate_detections_all_undefined():
    ann = make_annotation("a", boxes=((0, 0, 10, 10, 1),), w=64, h=64)
    report = evaluate_detections({}, {"a": ann.restrict({2})}, classes=[2], t=0)
    assert report.map == 0.0
    assert report.undefined_classes == frozenset({2})


def test_omega_constant_denominator():
    assert omega_map([0.2, 0.3, 0.4], 0.4) == pytest.approx((0.5 + 0.75 + 1.0) / 3)


def test_omega_per_step_denominators():
    value = omega_map([0.2, 0.3], [0.4, 0.5])
    assert value == pytest.approx((0.2 / 0.4 + 0.3 / 0.5) / 2)


def test_omega_can_exceed_one():
    assert omega_map([0.5], 0.4) > 1.0


def test_omega_validation():
    with pytest.raises(ValueError):
        omega_map([], 0.4)
    with pytest.raises(ValueError):
        omega_map([0.2], 0.0)
    with pytest.raises(ValueError):
        omega_map([0.2, 0.3], [0.4])
    with pytest.raises(ValueError):
        omega_map([0.2], [-1.0])


def test_curves_roundtrip(tmp_path):
    reports = [
        EvalReport(
            t=2,
            per_class_ap={1: 0.5, 2: 0.25},
            classes_evaluated=frozenset({1, 2}),
            undefined_classes=frozenset(),
            map=0.375,
        ),
        EvalReport(
            t=3,
            per_class_ap={1: 0.5, 2: 0.25, 3: 0.75},
            classes_evaluated=frozenset({1, 2, 3}),
            undefined_classes=frozenset(),
            map=0.5,
        ),
    ]
    path = tmp_path / "curves.csv"
    write_curves(path, reports)
    assert read_curve_alphas(path) == [0.375, 0.5]
    text = path.read_text()
    assert text.splitlines()[0].startswith("t,map")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), st.floats(0.01, 1.0))
def test_omega_scaling_property(alphas, offline):
    # scaling every alpha and the denominator together leaves omega fixed
    v1 = omega_map(alphas, offline)
    v2 = omega_map([a * 0.5 for a in alphas], offline * 0.5)
    assert v1 == pytest.approx(v2, rel=1e-9, abs=1e-12)
