import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cofinetune.data import (BoxAnnotation, ClassificationDataset, DatasetSpec, Keyframe, VideoClip,
                             classification_spec, detection_label_frequency, detection_spec, filter_proposals,
                             load_ava_csv, load_classification_manifest, write_ava_csv,
                             write_classification_manifest)
from cofinetune.errors import DataFormatError


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


FIVE_ROWS = [
    "vidA,0902,0.1,0.2,0.5,0.6,3,0",
    "vidA,0902,0.1,0.2,0.5,0.6,7,0",
    "vidA,0902,0.6,0.1,0.9,0.5,1,1",
    "vidB,1000,0.2,0.2,0.4,0.8,2,0",
    "vidB,1000,0.5,0.3,0.7,0.9,60,4",
]


def test_videoclip_rejects_out_of_range_values():
    with pytest.raises(ValueError):
        VideoClip("c", np.full((2, 4, 4, 3), 1.5))
    with pytest.raises(ValueError):
        VideoClip("c", np.zeros((0, 4, 4, 3)))
    clip = VideoClip("c", np.zeros((2, 4, 4, 3)))
    assert clip.shape == (2, 4, 4, 3)


@pytest.mark.parametrize("box", [(0.9, 0.1, 0.2, 0.5), (0.1, 0.5, 0.3, 0.5), (-0.1, 0.0, 0.5, 0.5),
                                 (0.0, 0.0, 1.2, 0.5)])
def test_box_invariants(box):
    with pytest.raises(ValueError):
        BoxAnnotation(box, frozenset({0}))


def test_merge_two_actions_into_one_box(tmp_path):
    path = _write(tmp_path / "gt.csv", ["v,1.0,0.1,0.1,0.4,0.4,11,0", "v,1.0,0.1,0.1,0.4,0.4,12,0"])
    kfs = load_ava_csv(path, 60)
    assert len(kfs) == 1 and len(kfs[0].boxes) == 1
    # action ids are 1-based on disk, 0-based in memory
    assert kfs[0].boxes[0].labels == {10, 11}


def test_inverted_box_is_a_parse_error_with_row(tmp_path):
    path = _write(tmp_path / "gt.csv", ["v,1.0,0.1,0.1,0.4,0.4,1,0", "v,1.0,0.9,0.1,0.2,0.4,1,0"])
    with pytest.raises(DataFormatError) as info:
        load_ava_csv(path, 60)
    assert info.value.row == 2


@pytest.mark.parametrize("row, fragment", [
    ("v,1.0,0.1,0.1,0.4,0.4,0,0", "not in [1, 60]"),
    ("v,1.0,0.1,0.1,0.4,0.4,61,0", "not in [1, 60]"),
    ("v,1.0,0.1,abc,0.4,0.4,1,0", "cannot parse"),
    ("v,1.0,0.1,0.1,0.4,0.4,1", "expected 8 or 9"),
    ("v,1.0,0.1,0.1,0.4,0.4,,0", "missing action_id"),
    ("v,1.0,0.1,0.1,0.4,0.4,1,0,1.5", "score outside"),
    ("v,nan,0.1,0.1,0.4,0.4,1,0", "non-finite"),
])
def test_malformed_rows(tmp_path, row, fragment):
    path = _write(tmp_path / "bad.csv", [row])
    with pytest.raises(DataFormatError, match="row 1") as info:
        load_ava_csv(path, 60)
    assert fragment in str(info.value)


def test_five_row_fixture_keyframe_count(tmp_path):
    path = _write(tmp_path / "gt.csv", FIVE_ROWS)
    # oracle: distinct (video, timestamp) prefixes by plain string splitting
    expected = len({tuple(line.split(",")[:2]) for line in FIVE_ROWS})
    assert expected == 2
    kfs = load_ava_csv(path, 60)
    assert len(kfs) == expected
    assert [len(k.boxes) for k in kfs] == [2, 2]
    assert kfs[1].boxes[1].labels == {59}


def test_proposal_rows_with_blank_action(tmp_path):
    path = _write(tmp_path / "props.csv", ["v,2,0.1,0.1,0.4,0.4,,,0.93", "v,2,0.1,0.1,0.4,0.4,,,0.97"])
    (kf,) = load_ava_csv(path, 5)
    (b,) = kf.boxes
    assert b.labels == frozenset() and b.score == 0.97 and b.person_id is None


def test_csv_roundtrip(tmp_path):
    path = _write(tmp_path / "gt.csv", FIVE_ROWS)
    kfs = load_ava_csv(path, 60)
    out = tmp_path / "again.csv"
    write_ava_csv(kfs, out)
    assert load_ava_csv(out, 60) == kfs
    # canonical writer is a fixed point
    out2 = tmp_path / "again2.csv"
    write_ava_csv(load_ava_csv(out, 60), out2)
    assert out.read_bytes() == out2.read_bytes()


def test_filter_proposals_threshold():
    kf = Keyframe("v", 1.0, (BoxAnnotation((0.1, 0.1, 0.3, 0.3), score=0.9),
                             BoxAnnotation((0.5, 0.5, 0.7, 0.7), score=0.5)))
    (out,) = filter_proposals([kf], 0.8)
    assert [b.score for b in out.boxes] == [0.9]


def test_filter_keeps_emptied_keyframes_and_requires_scores():
    kf = Keyframe("v", 1.0, (BoxAnnotation((0.1, 0.1, 0.3, 0.3), score=0.2),))
    (out,) = filter_proposals([kf], 0.8)
    assert out.boxes == () and out.key == ("v", 1.0)
    with pytest.raises(DataFormatError):
        filter_proposals([Keyframe("v", 1.0, (BoxAnnotation((0.1, 0.1, 0.3, 0.3), frozenset({1})),))], 0.5)


scores = st.floats(0.0, 1.0, allow_nan=False)


@given(st.lists(st.lists(scores, max_size=6), max_size=6), scores)
@settings(max_examples=100, deadline=None)
def test_filter_proposals_properties(per_frame, threshold):
    kfs = [Keyframe(f"v{i}", float(i), tuple(BoxAnnotation((0.1, 0.1, 0.5, 0.5), score=s) for s in ss))
           for i, ss in enumerate(per_frame)]
    out = filter_proposals(kfs, threshold)
    assert len(out) == len(kfs)
    for before, after in zip(kfs, out):
        assert all(b.score >= threshold for b in after.boxes)
        assert len(after.boxes) == sum(b.score >= threshold for b in before.boxes)


def test_dataset_spec_sizes_and_frequencies():
    kfs = [Keyframe("a", 0, (BoxAnnotation((0, 0, 0.5, 0.5), frozenset({0, 2})),)),
           Keyframe("b", 0, (BoxAnnotation((0, 0, 0.5, 0.5), frozenset({2})),
                             BoxAnnotation((0.5, 0.5, 1, 1), frozenset({1}))))]
    spec = detection_spec("det", kfs, 4)
    assert spec.size == 2
    assert spec.label_frequency == {0: 1, 1: 1, 2: 2, 3: 0}
    # multi-label: instances >= examples
    assert sum(spec.label_frequency.values()) >= spec.size
    assert DatasetSpec.from_dict(spec.to_dict()) == spec
    assert detection_label_frequency([], 2) == {0: 0, 1: 0}


def test_classification_dataset_alignment():
    labels = np.array([0, 1, 1])
    spec = classification_spec("cls", labels, 3)
    assert spec.label_frequency == {0: 1, 1: 2, 2: 0}
    ds = ClassificationDataset(spec, np.zeros((3, 2, 4, 4, 3), np.float32), labels)
    assert len(ds) == 3
    with pytest.raises(ValueError):
        ClassificationDataset(spec, np.zeros((2, 2, 4, 4, 3), np.float32), labels)


def test_manifest_roundtrip_and_errors(tmp_path):
    rows = [("clips/a.npy", 0), ("clips/b.npy", 4)]
    path = tmp_path / "m.csv"
    write_classification_manifest(rows, path)
    assert load_classification_manifest(path, 5) == rows
    bad = tmp_path / "bad.csv"
    with bad.open("w", newline="") as fh:
        csv.writer(fh).writerows([["clip_path", "label"], ["x.npy", "5"]])
    with pytest.raises(DataFormatError, match="row 2"):
        load_classification_manifest(bad, 5)
    with pytest.raises(FileNotFoundError):
        load_classification_manifest(tmp_path / "missing.csv", 5)
