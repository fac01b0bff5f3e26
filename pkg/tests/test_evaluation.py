import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import box_iou, brute_force_frame_ap, random_instance
from cofinetune.data import BoxAnnotation, Keyframe
from cofinetune.errors import DataFormatError
from cofinetune.evaluation import (AVA_TRAIN_LABEL_FREQUENCY, Detection, average_precision, build_report, frame_map,
                                   group_classes, iou, load_predictions_csv, match_detections, read_report_summary,
                                   render_report, write_predictions_csv, write_report_csv)


def _to_package(gt, preds):
    kfs = [Keyframe(k[0], k[1], tuple(BoxAnnotation(b, frozenset(labels)) for b, labels in boxes))
           for k, boxes in gt.items()]
    dets = [Detection(k[0], k[1], box, c, s) for k, box, c, s in preds]
    return kfs, dets


def test_iou_basic():
    assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert iou((0, 0, 0.5, 1), (0.5, 0, 1, 1)) == 0.0
    assert iou((0, 0, 0.5, 0.5), (0.25, 0.25, 0.75, 0.75)) == pytest.approx(0.0625 / 0.4375)


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_frame_map_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    k, gt, preds = random_instance(rng)
    kfs, dets = _to_package(gt, preds)
    report = frame_map(kfs, dets, k)
    ref = brute_force_frame_ap(gt, preds, k)
    for c in range(k):
        if ref[c] is None:
            assert report.per_class_ap[c] is None
        else:
            assert abs(report.per_class_ap[c] - ref[c]) < 1e-9


def test_perfect_detections_give_ap_one():
    kf = Keyframe("v", 0, (BoxAnnotation((0.1, 0.1, 0.4, 0.4), frozenset({0, 1})),))
    dets = [Detection("v", 0, (0.1, 0.1, 0.4, 0.4), 0, 0.9), Detection("v", 0, (0.1, 0.1, 0.4, 0.4), 1, 0.8)]
    r = frame_map([kf], dets, 3)
    assert r.per_class_ap == {0: 1.0, 1: 1.0, 2: None}
    assert r.mean_ap == 1.0


def test_duplicate_detection_is_false_positive():
    flags = match_detections([(0.9, (0, 0, 0.5, 0.5)), (0.8, (0, 0, 0.5, 0.5))], [(0, 0, 0.5, 0.5)])
    assert flags == [True, False]
    # two GT boxes: second detection takes the remaining one even though its best IoU is with the taken box
    flags = match_detections([(0.9, (0, 0, 0.5, 0.5)), (0.8, (0.02, 0, 0.52, 0.5))],
                             [(0, 0, 0.5, 0.5), (0.1, 0, 0.6, 0.5)])
    assert flags == [True, True]


def test_iou_threshold_is_inclusive():
    gt = (0.0, 0.0, 1.0, 1.0)
    half = (0.0, 0.0, 0.5, 1.0)
    assert box_iou(gt, half) == 0.5
    assert match_detections([(1.0, half)], [gt]) == [True]


def test_average_precision_hand_values():
    assert average_precision([0.9, 0.8, 0.7], [True, False, True], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert average_precision([], [], 3) == 0.0
    assert average_precision([0.5], [True], 0) is None


def test_unknown_keyframe_in_predictions_raises():
    kf = Keyframe("v", 0, ())
    with pytest.raises(DataFormatError, match="not in ground truth"):
        frame_map([kf], [Detection("w", 1.0, (0, 0, 0.5, 0.5), 0, 0.5)], 2)


def test_ava_partition():
    freq = {i: n for i, (_, n) in enumerate(AVA_TRAIN_LABEL_FREQUENCY)}
    groups = group_classes(freq)
    values = list(groups.values())
    assert (values.count("Head"), values.count("Mid"), values.count("Tail")) == (8, 23, 29)
    names = {name: groups[i] for i, (name, _) in enumerate(AVA_TRAIN_LABEL_FREQUENCY)}
    assert names["stand"] == "Head"
    assert names["bend/bow (at the waist)"] == "Mid"
    assert names["swim"] == "Tail"


def test_group_boundaries():
    assert group_classes({0: 10_001, 1: 10_000, 2: 1_000, 3: 999}) == {0: "Head", 1: "Mid", 2: "Mid", 3: "Tail"}
    with pytest.raises(ValueError):
        group_classes({0: -1})


def test_group_means_exclude_missing_classes():
    r = build_report({0: 0.5, 1: None, 2: 1.0}, {0: 3, 1: 0, 2: 1}, {0: 20_000, 1: 5, 2: 5})
    assert r.group_map == {"Head": 0.5, "Mid": None, "Tail": 1.0}
    assert r.mean_ap == 0.75


def test_prediction_csv_roundtrip(tmp_path):
    dets = [Detection("v", 1.5, (0.1, 0.2, 0.3, 0.4), 0, 0.25, 3), Detection("a", 0.0, (0.1, 0.2, 0.3, 0.4), 4, 1.0)]
    path = tmp_path / "p.csv"
    write_predictions_csv(dets, path)
    back = load_predictions_csv(path, 5)
    assert sorted(back, key=lambda d: d.clip_id) == sorted(dets, key=lambda d: d.clip_id)
    write_predictions_csv(back, tmp_path / "q.csv")
    assert path.read_bytes() == (tmp_path / "q.csv").read_bytes()
    path.write_text("v,1.0,0.1,0.1,0.2,0.2,9,,0.5\n")
    with pytest.raises(DataFormatError, match="row 1"):
        load_predictions_csv(path, 5)


def test_report_csv_layout(tmp_path):
    r = build_report({0: 0.5, 1: None, 2: 1.0}, {0: 3, 1: 0, 2: 1}, {0: 20_000, 1: 5, 2: 5},
                     class_names={0: "stand"})
    path = tmp_path / "report.csv"
    paths = render_report(r, path, tmp_path / "report.png")
    lines = path.read_text().splitlines()
    assert lines[0] == "kind,name,class,label_frequency,group,num_gt,ap"
    assert lines[1] == "class,stand,0,20000,Head,3,0.50000000"
    assert lines[2] == "class,class_1,1,5,Tail,0,n/a"
    assert lines[-1] == "overall,mAP,,20010,,4,0.75000000"
    assert read_report_summary(path) == {"Head": 0.5, "Mid": None, "Tail": 1.0, "overall": 0.75}
    assert paths[1].stat().st_size > 0
    empty = build_report({}, {})
    write_report_csv(empty, tmp_path / "empty.csv")
    assert (tmp_path / "empty.csv").read_text().splitlines()[1:] == ["overall,mAP,,0,,0,n/a"]


def test_random_scores_near_chance():
    """Monte Carlo chance level: a model with random scores on a balanced set."""
    rng = np.random.default_rng(0)
    k = 4
    kfs, dets = [], []
    for i in range(200):
        c = int(rng.integers(k))
        box = (0.1, 0.1, 0.5, 0.5)
        kfs.append(Keyframe("v", float(i), (BoxAnnotation(box, frozenset({c})),)))
        dets += [Detection("v", float(i), box, j, float(rng.random())) for j in range(k)]
    r = frame_map(kfs, dets, k)
    # with perfect localisation and random scores, AP tends to the class prior
    assert abs(r.mean_ap - 1 / k) < 0.08
