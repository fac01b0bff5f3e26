"""Dataset types, AVA-style CSV ingestion and proposal filtering.

Class indices are 0-based everywhere inside the package. AVA files use
1-based ``action_id`` values; the conversion happens only in this module.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError

CLASSIFICATION = "classification"
DETECTION = "detection"
TASKS = (CLASSIFICATION, DETECTION)

# Merge key precision for boxes that repeat once per action.
BOX_KEY_DECIMALS = 6


@dataclass(frozen=True)
class VideoClip:
    id: str
    frames: np.ndarray
    frame_stride: int = 1

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4 or min(frames.shape) <= 0:
            raise ValueError(f"clip {self.id}: frames must be T x H x W x C with positive dims, got {frames.shape}")
        if not np.all(np.isfinite(frames)) or frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError(f"clip {self.id}: frame values must be finite and in [0, 1]")
        if self.frame_stride < 1:
            raise ValueError(f"clip {self.id}: frame_stride must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class BoxAnnotation:
    box: tuple[float, float, float, float]
    labels: frozenset[int] = frozenset()
    score: float | None = None
    person_id: int | None = None

    def __post_init__(self):
        box = tuple(float(v) for v in self.box)
        if len(box) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(box)}")
        x1, y1, x2, y2 = box
        if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in box):
            raise ValueError(f"box coordinates must lie in [0, 1]: {box}")
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"box must satisfy x1 < x2 and y1 < y2: {box}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1]: {self.score}")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "labels", frozenset(int(c) for c in self.labels))

    def sort_key(self):
        return (self.box, -1 if self.person_id is None else self.person_id)


@dataclass(frozen=True)
class Keyframe:
    clip_id: str
    timestamp: float
    boxes: tuple[BoxAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "boxes", tuple(self.boxes))

    @property
    def key(self):
        return keyframe_key(self.clip_id, self.timestamp)


def keyframe_key(clip_id, timestamp):
    return (str(clip_id), round(float(timestamp), 6))


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    task: str
    size: int
    num_classes: int
    label_frequency: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.size < 0 or self.num_classes < 1:
            raise ValueError("size must be >= 0 and num_classes >= 1")
        for c in self.label_frequency:
            if not 0 <= c < self.num_classes:
                raise ValueError(f"label_frequency has out-of-range class {c}")

    def to_dict(self):
        return {
            "name": self.name,
            "task": self.task,
            "size": self.size,
            "num_classes": self.num_classes,
            "label_frequency": {str(k): v for k, v in sorted(self.label_frequency.items())},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            task=d["task"],
            size=int(d["size"]),
            num_classes=int(d["num_classes"]),
            label_frequency={int(k): int(v) for k, v in d.get("label_frequency", {}).items()},
        )


def detection_label_frequency(keyframes: Iterable[Keyframe], num_classes: int) -> dict[int, int]:
    counts = Counter(c for kf in keyframes for b in kf.boxes for c in b.labels)
    return {c: counts.get(c, 0) for c in range(num_classes)}


def detection_spec(name, keyframes: Sequence[Keyframe], num_classes) -> DatasetSpec:
    # size counts keyframes, not boxes
    return DatasetSpec(name, DETECTION, len(keyframes), num_classes,
                       detection_label_frequency(keyframes, num_classes))


def classification_spec(name, labels: Sequence[int], num_classes) -> DatasetSpec:
    counts = Counter(int(c) for c in labels)
    return DatasetSpec(name, CLASSIFICATION, len(labels), num_classes,
                       {c: counts.get(c, 0) for c in range(num_classes)})


@dataclass(frozen=True)
class DetectionDataset:
    """Clips aligned one-to-one with keyframes (keyframe = centre frame)."""

    spec: DatasetSpec
    clips: np.ndarray
    keyframes: tuple[Keyframe, ...]
    proposals: tuple[Keyframe, ...] | None = None

    def __post_init__(self):
        if len(self.clips) != len(self.keyframes):
            raise ValueError("clips and keyframes must align")
        if self.spec.size != len(self.keyframes):
            raise ValueError("spec.size must equal the number of keyframes")
        self.clips.setflags(write=False)

    def __len__(self):
        return len(self.keyframes)


@dataclass(frozen=True)
class ClassificationDataset:
    spec: DatasetSpec
    clips: np.ndarray
    labels: np.ndarray
    clip_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.clips) != len(self.labels):
            raise ValueError("clips and labels must align")
        if self.spec.size != len(self.labels):
            raise ValueError("spec.size must equal the number of examples")
        self.clips.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------------------
# AVA-style CSV

def _parse_float(text, what, row, path):
    try:
        v = float(text)
    except ValueError:
        raise DataFormatError(f"cannot parse {what} {text!r}", row=row, path=path) from None
    if not math.isfinite(v):
        raise DataFormatError(f"non-finite {what}", row=row, path=path)
    return v


def load_ava_csv(path, num_classes: int) -> list[Keyframe]:
    """Load an AVA-layout CSV, merging the one-row-per-action repetition.

    Rows are ``video_id,timestamp,x1,y1,x2,y2,action_id,person_id`` with an
    optional trailing ``score``. ``action_id`` may be blank only in scored
    rows (unlabelled proposals). Keyframes come back sorted by
    ``(video_id, timestamp)``; boxes by ``(box, person_id)``.
    """
    path = Path(path)
    merged: dict[tuple, dict] = {}
    with path.open(newline="") as fh:
        for rownum, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) not in (8, 9):
                raise DataFormatError(f"expected 8 or 9 columns, got {len(row)}", row=rownum, path=path)
            video_id = row[0].strip()
            ts = _parse_float(row[1], "timestamp", rownum, path)
            box = tuple(_parse_float(row[i], "coordinate", rownum, path) for i in range(2, 6))
            x1, y1, x2, y2 = box
            if not all(0.0 <= v <= 1.0 for v in box):
                raise DataFormatError(f"coordinates outside [0, 1]: {box}", row=rownum, path=path)
            if not (x1 < x2 and y1 < y2):
                raise DataFormatError(f"degenerate box (need x1<x2, y1<y2): {box}", row=rownum, path=path)
            score = None
            if len(row) == 9:
                score = _parse_float(row[8], "score", rownum, path)
                if not 0.0 <= score <= 1.0:
                    raise DataFormatError(f"score outside [0, 1]: {score}", row=rownum, path=path)
            action = row[6].strip()
            label = None
            if action:
                try:
                    action_id = int(action)
                except ValueError:
                    raise DataFormatError(f"cannot parse action_id {action!r}", row=rownum, path=path) from None
                if not 1 <= action_id <= num_classes:
                    raise DataFormatError(f"action_id {action_id} not in [1, {num_classes}]", row=rownum, path=path)
                label = action_id - 1
            elif score is None:
                raise DataFormatError("missing action_id in ground-truth row", row=rownum, path=path)
            pid_text = row[7].strip()
            try:
                person_id = int(pid_text) if pid_text else None
            except ValueError:
                raise DataFormatError(f"cannot parse person_id {pid_text!r}", row=rownum, path=path) from None

            key = (video_id, round(ts, 6), tuple(round(v, BOX_KEY_DECIMALS) for v in box), person_id)
            entry = merged.setdefault(key, {"ts": ts, "box": box, "labels": set(), "score": None})
            if label is not None:
                entry["labels"].add(label)
            if score is not None:
                entry["score"] = score if entry["score"] is None else max(entry["score"], score)

    frames: dict[tuple, list[BoxAnnotation]] = {}
    stamps = {}
    for (video_id, ts_key, _, person_id), e in merged.items():
        fkey = (video_id, ts_key)
        stamps[fkey] = e["ts"]
        frames.setdefault(fkey, []).append(
            BoxAnnotation(e["box"], frozenset(e["labels"]), e["score"], person_id))
    return [
        Keyframe(video_id, stamps[(video_id, ts)], tuple(sorted(boxes, key=BoxAnnotation.sort_key)))
        for (video_id, ts), boxes in sorted(frames.items())
    ]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_ava_csv(keyframes: Iterable[Keyframe], path) -> None:
    """Inverse of :func:`load_ava_csv` (one row per label, canonical order).

    Keyframes without boxes cannot be represented in the format and are
    skipped.
    """
    rows = []
    for kf in keyframes:
        for b in kf.boxes:
            coords = [_fmt(v) for v in b.box]
            pid = "" if b.person_id is None else str(b.person_id)
            tail = [] if b.score is None else [_fmt(b.score)]
            labels = sorted(b.labels) or [None]
            for c in labels:
                action = "" if c is None else str(c + 1)
                rows.append((kf.clip_id, kf.timestamp, b.sort_key(), c if c is not None else -1,
                             [kf.clip_id, _fmt(kf.timestamp), *coords, action, pid, *tail]))
    rows.sort(key=lambda r: r[:4])
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for r in rows:
            writer.writerow(r[4])


def filter_proposals(keyframes: Iterable[Keyframe], threshold: float) -> list[Keyframe]:
    """Drop proposals scoring below ``threshold``; emptied keyframes are kept."""
    out = []
    for kf in keyframes:
        for b in kf.boxes:
            if b.score is None:
                raise DataFormatError(f"proposal without score in {kf.clip_id}@{kf.timestamp}")
        out.append(Keyframe(kf.clip_id, kf.timestamp, tuple(b for b in kf.boxes if b.score >= threshold)))
    return out


# ---------------------------------------------------------------------------
# classification manifest

def load_classification_manifest(path, num_classes: int) -> list[tuple[str, int]]:
    """Read ``clip_path,label`` rows (0-based labels). A literal header row is skipped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    examples = []
    with path.open(newline="") as fh:
        for rownum, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if rownum == 1 and [c.strip() for c in row] == ["clip_path", "label"]:
                continue
            if len(row) != 2:
                raise DataFormatError(f"expected 2 columns, got {len(row)}", row=rownum, path=path)
            try:
                label = int(row[1])
            except ValueError:
                raise DataFormatError(f"cannot parse label {row[1]!r}", row=rownum, path=path) from None
            if not 0 <= label < num_classes:
                raise DataFormatError(f"label {label} not in [0, {num_classes})", row=rownum, path=path)
            examples.append((row[0].strip(), label))
    return examples


def write_classification_manifest(examples: Iterable[tuple[str, int]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for clip, label in examples:
            writer.writerow([clip, int(label)])
