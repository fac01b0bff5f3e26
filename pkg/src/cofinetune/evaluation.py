"""Frame-AP evaluation at IoU 0.5 and the Head/Mid/Tail long-tail breakdown."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .data import Keyframe, keyframe_key
from .errors import DataFormatError

IOU_THRESHOLD = 0.5
HEAD, MID, TAIL = "Head", "Mid", "Tail"
GROUPS = (HEAD, MID, TAIL)
HEAD_THRESHOLD = 10_000
TAIL_THRESHOLD = 1_000

# AVA v2.2 training-set label frequencies for the 60 evaluated classes.
AVA_TRAIN_LABEL_FREQUENCY: tuple[tuple[str, int], ...] = (
    ("watch (a person)", 168148), ("stand", 166357), ("talk to (e.g., self, a person, a group)", 110267),
    ("listen to (a person)", 106816), ("sit", 100323), ("carry/hold (an object)", 80451),
    ("walk", 40771), ("touch (an object)", 17133),
    ("bend/bow (at the waist)", 8349), ("lie/sleep", 5356), ("ride (e.g., a bike, a car, a horse)", 4808),
    ("run/jog", 3337), ("answer phone", 3279), ("dance", 3267),
    ("eat", 3025), ("smoke", 2991), ("fight/hit (a person)", 2695),
    ("drink", 2335), ("crouch/kneel", 2321), ("read", 2146),
    ("martial art", 2117), ("grab (a person)", 2003), ("watch (e.g., TV)", 1993),
    ("sing to (e.g., self, a person, a group)", 1643), ("play musical instrument", 1297),
    ("open (e.g., a window, a car door)", 1251),
    ("drive (e.g., a car, a truck)", 1188), ("hand clap", 1187), ("get up", 1124),
    ("hug (a person)", 1103), ("give/serve (an object) to (a person)", 1073),
    ("close (e.g., a door, a box)", 786), ("write", 777), ("sail boat", 719),
    ("kiss (a person)", 714), ("listen (e.g., to music)", 668), ("hand shake", 619),
    ("take (an object) from (a person)", 608), ("put down", 533), ("lift/pick up", 519),
    ("text on/look at a cellphone", 415), ("lift (a person)", 400), ("push (an object)", 387),
    ("push (another person)", 355), ("hand wave", 351), ("pull (an object)", 344),
    ("dress/put on clothing", 342), ("fall down", 291), ("climb (e.g., a mountain)", 268),
    ("throw", 249), ("jump/leap", 245), ("enter", 225),
    ("shoot", 222), ("cut", 184), ("take a photo", 181),
    ("hit (an object)", 177), ("work on a computer", 176), ("turn (e.g., a screwdriver)", 137),
    ("swim", 111), ("point to (an object)", 97),
)


@dataclass(frozen=True)
class Detection:
    clip_id: str
    timestamp: float
    box: tuple[float, float, float, float]
    class_index: int
    score: float
    person_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")

    @property
    def key(self):
        return keyframe_key(self.clip_id, self.timestamp)


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def match_detections(detections: Sequence[tuple[float, tuple]], gt_boxes: Sequence[tuple],
                     threshold: float = IOU_THRESHOLD) -> list[bool]:
    """Greedy one-to-one matching of ``(score, box)`` detections on one keyframe.

    Detections are visited by descending score (ties: box lexicographic).
    Each takes the unmatched ground-truth box of highest IoU if that IoU is
    at least ``threshold``. Returns TP flags in the input order.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][0], tuple(detections[i][1])))
    taken = [False] * len(gt_boxes)
    flags = [False] * len(detections)
    for i in order:
        box = detections[i][1]
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            o = iou(box, g)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= threshold:
            taken[best_j] = True
            flags[i] = True
    return flags


def average_precision(scores: Sequence[float], flags: Sequence[bool], num_gt: int) -> float | None:
    """All-point interpolated AP; ``None`` when ``num_gt`` is 0.

    Ties in ``scores`` keep the input order, so callers fix tie-breaking by
    ordering their input.
    """
    if num_gt <= 0:
        return None
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    tp = fp = 0
    recall, precision = [0.0], [1.0]
    for i in order:
        if flags[i]:
            tp += 1
        else:
            fp += 1
        recall.append(tp / num_gt)
        precision.append(tp / (tp + fp))
    for k in range(len(precision) - 2, -1, -1):
        precision[k] = max(precision[k], precision[k + 1])
    return sum((recall[k] - recall[k - 1]) * precision[k] for k in range(1, len(recall)))


def group_classes(label_frequency: Mapping[int, int], head_threshold: int = HEAD_THRESHOLD,
                  tail_threshold: int = TAIL_THRESHOLD) -> dict[int, str]:
    """``count > head_threshold`` is Head, ``count < tail_threshold`` is Tail, else Mid."""
    out = {}
    for c, n in label_frequency.items():
        if n < 0:
            raise ValueError(f"negative count for class {c}")
        out[c] = HEAD if n > head_threshold else TAIL if n < tail_threshold else MID
    return out


@dataclass
class APReport:
    per_class_ap: dict[int, float | None]
    gt_counts: dict[int, int]
    label_frequency: dict[int, int]
    groups: dict[int, str]
    group_map: dict[str, float | None]
    mean_ap: float | None
    class_names: dict[int, str] = field(default_factory=dict)

    @property
    def evaluated_classes(self):
        return [c for c, ap in sorted(self.per_class_ap.items()) if ap is not None]


def _mean(values):
    values = list(values)
    return sum(values) / len(values) if values else None


def build_report(per_class_ap, gt_counts, label_frequency=None, head_threshold=HEAD_THRESHOLD,
                 tail_threshold=TAIL_THRESHOLD, class_names=None) -> APReport:
    freq = dict(label_frequency) if label_frequency is not None else dict(gt_counts)
    freq = {c: freq.get(c, 0) for c in per_class_ap}
    groups = group_classes(freq, head_threshold, tail_threshold)
    group_map = {
        g: _mean(ap for c, ap in sorted(per_class_ap.items()) if ap is not None and groups[c] == g) for g in GROUPS
    }
    mean_ap = _mean(ap for _, ap in sorted(per_class_ap.items()) if ap is not None)
    return APReport(dict(per_class_ap), dict(gt_counts), freq, groups, group_map, mean_ap, dict(class_names or {}))


def frame_map(ground_truth: Iterable[Keyframe], predictions: Iterable[Detection], num_classes: int,
              classes: Sequence[int] | None = None, label_frequency: Mapping[int, int] | None = None,
              head_threshold: int = HEAD_THRESHOLD, tail_threshold: int = TAIL_THRESHOLD,
              class_names: Mapping[int, str] | None = None) -> APReport:
    """Per-class frame AP pooled over keyframes, plus group and overall means.

    Multi-label ground-truth boxes count once per label. Classes without
    ground truth are reported as ``None`` and excluded from every mean.
    """
    classes = list(range(num_classes)) if classes is None else list(classes)
    gt = defaultdict(list)  # (class, key) -> boxes
    keys = set()
    for kf in ground_truth:
        keys.add(kf.key)
        for b in kf.boxes:
            for c in b.labels:
                gt[(c, kf.key)].append(b.box)
    preds = defaultdict(list)
    offenders = []
    for d in predictions:
        if d.key not in keys:
            offenders.append(d.key)
            continue
        preds[(d.class_index, d.key)].append(d)
    if offenders:
        shown = ", ".join(f"{cid}@{ts}" for cid, ts in sorted(set(offenders))[:10])
        raise DataFormatError(f"{len(set(offenders))} prediction keyframe(s) not in ground truth: {shown}")

    per_class, counts = {}, {}
    for c in classes:
        scored = []  # (sort key, score, flag)
        num_gt = 0
        for key in sorted(keys):
            g = gt.get((c, key), [])
            num_gt += len(g)
            dets = preds.get((c, key), [])
            if not dets:
                continue
            flags = match_detections([(d.score, d.box) for d in dets], g)
            for d, f in zip(dets, flags):
                scored.append(((-d.score, key, d.box), d.score, f))
        scored.sort(key=lambda s: s[0])
        counts[c] = num_gt
        per_class[c] = average_precision([s[1] for s in scored], [s[2] for s in scored], num_gt)
    return build_report(per_class, counts, label_frequency, head_threshold, tail_threshold, class_names)


# ---------------------------------------------------------------------------
# prediction CSV: AVA layout + trailing score, one row per (box, class)

def write_predictions_csv(detections: Iterable[Detection], path) -> None:
    rows = sorted(detections, key=lambda d: (d.key, d.box, d.class_index))
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for d in rows:
            writer.writerow([d.clip_id, repr(float(d.timestamp)), *(repr(v) for v in d.box), d.class_index + 1,
                             "" if d.person_id is None else d.person_id, repr(float(d.score))])


def load_predictions_csv(path, num_classes: int) -> list[Detection]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        for rownum, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 9:
                raise DataFormatError(f"expected 9 columns, got {len(row)}", row=rownum, path=path)
            try:
                ts = float(row[1])
                box = tuple(float(v) for v in row[2:6])
                action = int(row[6])
                score = float(row[8])
                pid = int(row[7]) if row[7].strip() else None
            except ValueError as exc:
                raise DataFormatError(str(exc), row=rownum, path=path) from None
            if not 1 <= action <= num_classes:
                raise DataFormatError(f"action_id {action} not in [1, {num_classes}]", row=rownum, path=path)
            if not (box[0] < box[2] and box[1] < box[3]):
                raise DataFormatError(f"degenerate box {box}", row=rownum, path=path)
            if not math.isfinite(score):
                raise DataFormatError("non-finite score", row=rownum, path=path)
            out.append(Detection(row[0].strip(), ts, box, action - 1, score, pid))
    return out


# ---------------------------------------------------------------------------
# report CSV

REPORT_HEADER = ["kind", "name", "class", "label_frequency", "group", "num_gt", "ap"]


def _fmt_ap(v):
    return "n/a" if v is None else f"{v:.8f}"


def write_report_csv(report: APReport, path) -> None:
    """Per-class rows, then one row per group, then the overall row.

    A report without classes has only the overall row.
    """
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        classes = sorted(report.per_class_ap)
        for c in classes:
            writer.writerow(["class", report.class_names.get(c, f"class_{c}"), c, report.label_frequency.get(c, 0),
                             report.groups.get(c, ""), report.gt_counts.get(c, 0), _fmt_ap(report.per_class_ap[c])])
        if classes:
            for g in GROUPS:
                members = [c for c in classes if report.groups.get(c) == g]
                writer.writerow(["group", g, "", sum(report.label_frequency.get(c, 0) for c in members), g,
                                 sum(report.gt_counts.get(c, 0) for c in members), _fmt_ap(report.group_map.get(g))])
        writer.writerow(["overall", "mAP", "", sum(report.label_frequency.values()), "",
                         sum(report.gt_counts.values()), _fmt_ap(report.mean_ap)])


def read_report_summary(path) -> dict[str, float | None]:
    """Group and overall rows of a report CSV as ``{Head, Mid, Tail, overall}``."""
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            if row["kind"] in ("group", "overall"):
                key = row["name"] if row["kind"] == "group" else "overall"
                out[key] = None if row["ap"] == "n/a" else float(row["ap"])
    return out


def render_report(report: APReport, csv_path, image_path=None) -> list[Path]:
    """Write the report CSV and, if ``image_path`` is given, the per-class bar chart."""
    from .plotting import plot_per_class_ap

    written = [Path(csv_path)]
    write_report_csv(report, csv_path)
    if image_path is not None:
        plot_per_class_ap(report, image_path)
        written.append(Path(image_path))
    return written
