"""Desk-scale synthetic detection and classification datasets.

Both dataset kinds render the same bank of motifs: a textured rectangle with
a colour pair, a stripe pattern and a motion direction. A class is one
(palette, pattern, direction) combination. No single cue separates the
classes, so a backbone trained on either dataset learns features that are
useful for the other.

* Detection clips hold a few small moving motifs. Each box is labelled with
  its motif's class. Class frequencies follow a configurable power law.
* Classification clips show a single motif filling most of the frame.

On disk a suite is a directory::

    index.json              format tag, seed, config, one entry per dataset
    <name>/clips.npy        float32 N x T x H x W x C, values in [0, 1]
    <name>/annotations.csv  detection ground truth (AVA layout, 1-based ids)
    <name>/proposals.csv    detection proposals (AVA layout + score, blank ids)
    <name>/manifest.csv     classification ``clip_id,label`` rows

Detection entries list their keyframes as ``[video_id, timestamp]`` in clip
order, so keyframes without boxes survive the round trip.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    BoxAnnotation,
    ClassificationDataset,
    DatasetSpec,
    DetectionDataset,
    Keyframe,
    classification_spec,
    detection_spec,
    load_ava_csv,
    load_classification_manifest,
    write_ava_csv,
    write_classification_manifest,
)
from .errors import ConfigError, DataFormatError

SUITE_FORMAT = "cofinetune-synthetic-suite/1"

PATTERNS = ("horizontal", "vertical", "diagonal", "checker")
DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1))


@dataclass(frozen=True)
class ClassificationSource:
    name: str = "cls"
    size: int = 512


@dataclass(frozen=True)
class SyntheticConfig:
    clip_shape: tuple[int, int, int, int] = (8, 32, 32, 3)
    num_classes: int = 12
    num_palettes: int = 4
    num_patterns: int = 4
    num_directions: int = 4
    detection_name: str = "det"
    detection_train_clips: int = 256
    detection_val_clips: int = 128
    boxes_per_clip: tuple[int, int] = (1, 3)
    long_tail_exponent: float = 1.5
    val_long_tail_exponent: float = 0.0
    classification: tuple[ClassificationSource, ...] = (ClassificationSource(),)
    detection_motif_size: tuple[float, float] = (0.28, 0.4)
    classification_motif_size: tuple[float, float] = (0.55, 0.8)
    speed: float = 1.5
    stripe_period: int = 4
    noise_std: float = 0.06
    color_jitter: float = 0.08
    proposal_jitter: float = 0.05
    proposal_score_range: tuple[float, float] = (0.85, 1.0)
    distractor_proposals: int = 0

    def __post_init__(self):
        object.__setattr__(self, "clip_shape", tuple(int(v) for v in self.clip_shape))
        object.__setattr__(self, "boxes_per_clip", tuple(int(v) for v in self.boxes_per_clip))
        object.__setattr__(self, "classification", tuple(
            c if isinstance(c, ClassificationSource) else ClassificationSource(**c) for c in self.classification))
        for k in ("detection_motif_size", "classification_motif_size", "proposal_score_range"):
            object.__setattr__(self, k, tuple(float(v) for v in getattr(self, k)))
        T, H, W, C = self.clip_shape if len(self.clip_shape) == 4 else (0, 0, 0, 0)
        if len(self.clip_shape) != 4 or min(self.clip_shape) < 1:
            raise ConfigError("must be four positive ints", "synthetic.clip_shape")
        if C != 3:
            raise ConfigError("only 3-channel clips are supported", "synthetic.clip_shape")
        if min(H, W) < 8:
            raise ConfigError("frames must be at least 8x8", "synthetic.clip_shape")
        if self.num_classes < 1:
            raise ConfigError("must be >= 1", "synthetic.num_classes")
        if not 1 <= self.num_patterns <= len(PATTERNS):
            raise ConfigError(f"must be in [1, {len(PATTERNS)}]", "synthetic.num_patterns")
        if not 1 <= self.num_directions <= len(DIRECTIONS):
            raise ConfigError(f"must be in [1, {len(DIRECTIONS)}]", "synthetic.num_directions")
        if self.num_palettes < 1:
            raise ConfigError("must be >= 1", "synthetic.num_palettes")
        if self.num_classes > self.num_palettes * self.num_patterns * self.num_directions:
            raise ConfigError("more classes than palette x pattern x direction combinations", "synthetic.num_classes")
        lo, hi = self.boxes_per_clip
        if not 1 <= lo <= hi:
            raise ConfigError("need 1 <= min <= max", "synthetic.boxes_per_clip")
        if self.detection_train_clips < 1 or self.detection_val_clips < 0:
            raise ConfigError("clip counts must be positive", "synthetic.detection_train_clips")
        if self.long_tail_exponent < 0 or self.val_long_tail_exponent < 0:
            raise ConfigError("must be >= 0", "synthetic.long_tail_exponent")
        for k in ("detection_motif_size", "classification_motif_size"):
            a, b = getattr(self, k)
            if not 0 < a <= b < 1:
                raise ConfigError("need 0 < min <= max < 1", f"synthetic.{k}")
        names = [self.detection_name, *(c.name for c in self.classification)]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique", "synthetic.classification")
        if any(c.size < 1 for c in self.classification):
            raise ConfigError("classification sizes must be positive", "synthetic.classification")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["classification"] = [asdict(c) for c in self.classification]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "classification" in d:
            d["classification"] = tuple(ClassificationSource(**c) for c in d["classification"])
        return cls(**d)


@dataclass(frozen=True)
class Motif:
    colors: tuple[tuple[float, float, float], tuple[float, float, float]]
    pattern: str
    direction: tuple[int, int]


@dataclass(frozen=True)
class SyntheticSuite:
    config: SyntheticConfig
    seed: int
    motifs: tuple[Motif, ...]
    detection: DetectionDataset
    detection_val: DetectionDataset
    classification: tuple[ClassificationDataset, ...] = field(default_factory=tuple)

    def datasets(self):
        return {d.spec.name: d for d in (self.detection, self.detection_val, *self.classification)}


# ---------------------------------------------------------------------------
# label distribution

def power_law_probabilities(num_classes: int, exponent: float) -> np.ndarray:
    """``p_k`` proportional to ``(k + 1) ** -exponent``; class 0 is the most frequent."""
    w = np.arange(1, num_classes + 1, dtype=np.float64) ** -float(exponent)
    return w / w.sum()


def power_law_counts(num_classes: int, exponent: float, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``total * p``. Every class gets at least one when ``total`` allows."""
    p = power_law_probabilities(num_classes, exponent)
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    rem = total - counts.sum()
    order = np.lexsort((np.arange(num_classes), -(raw - counts)))
    counts[order[:rem]] += 1
    if total >= num_classes:
        for k in np.flatnonzero(counts == 0):
            counts[k] += 1
            counts[int(np.argmax(counts))] -= 1
    return counts


def _label_sequence(rng, num_classes, exponent, total):
    counts = power_law_counts(num_classes, exponent, total)
    labels = np.repeat(np.arange(num_classes), counts)
    return rng.permutation(labels)


# ---------------------------------------------------------------------------
# rendering

def make_motif_bank(config: SyntheticConfig, rng: np.random.Generator) -> tuple[Motif, ...]:
    palettes = []
    for _ in range(config.num_palettes):
        a = rng.uniform(0.05, 0.95, size=3)
        b = rng.uniform(0.05, 0.95, size=3)
        palettes.append((tuple(float(v) for v in a), tuple(float(v) for v in b)))
    combos = [(p, q, m) for p in range(config.num_palettes) for q in range(config.num_patterns)
              for m in range(config.num_directions)]
    chosen = rng.choice(len(combos), size=config.num_classes, replace=False)
    return tuple(Motif(palettes[combos[i][0]], PATTERNS[combos[i][1]], DIRECTIONS[combos[i][2]])
                 for i in sorted(int(i) for i in chosen))


def _texture(pattern: str, h: int, w: int, period: int) -> np.ndarray:
    half = max(1, period // 2)
    r = np.arange(h)[:, None]
    c = np.arange(w)[None, :]
    if pattern == "horizontal":
        m = (r // half) % 2 + 0 * c
    elif pattern == "vertical":
        m = (c // half) % 2 + 0 * r
    elif pattern == "diagonal":
        m = ((r + c) // half) % 2
    else:
        m = (r // half + c // half) % 2
    return m.astype(bool)


def _background(config, rng):
    T, H, W, C = config.clip_shape
    base = rng.uniform(0.25, 0.6, size=(1, 1, 1, C))
    frames = base + rng.normal(0.0, config.noise_std, size=(T, H, W, C))
    return frames


def _trajectory(config, rng, size_frac, direction):
    """Integer top-left positions per frame that keep the motif inside the canvas."""
    T, H, W, _ = config.clip_shape
    h = max(2, int(round(rng.uniform(*size_frac) * H)))
    w = max(2, int(round(rng.uniform(*size_frac) * W)))
    dx, dy = direction
    travel = config.speed * (T - 1)
    span_x = W - w - abs(dx) * travel
    span_y = H - h - abs(dy) * travel
    x0 = rng.uniform(0, max(span_x, 0)) + (travel if dx < 0 else 0)
    y0 = rng.uniform(0, max(span_y, 0)) + (travel if dy < 0 else 0)
    ts = np.arange(T)
    xs = np.clip(np.round(x0 + dx * config.speed * ts), 0, W - w).astype(int)
    ys = np.clip(np.round(y0 + dy * config.speed * ts), 0, H - h).astype(int)
    return xs, ys, h, w


def _paint(frames, motif: Motif, xs, ys, h, w, config, rng):
    tex = _texture(motif.pattern, h, w, config.stripe_period)
    jitter = rng.uniform(-config.color_jitter, config.color_jitter, size=(2, 3))
    ca = np.asarray(motif.colors[0]) + jitter[0]
    cb = np.asarray(motif.colors[1]) + jitter[1]
    patch = np.where(tex[..., None], ca, cb)
    noise_std = config.noise_std
    for t in range(frames.shape[0]):
        frames[t, ys[t]:ys[t] + h, xs[t]:xs[t] + w] = patch + rng.normal(0.0, noise_std, size=patch.shape)


def _finish(frames):
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def _keyframe_box(config, xs, ys, h, w):
    T, H, W, _ = config.clip_shape
    k = T // 2
    return (xs[k] / W, ys[k] / H, (xs[k] + w) / W, (ys[k] + h) / H)


def _box_iou(a, b):
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def render_detection_clip(config, motifs, labels, rng):
    """Render motifs with the given class labels; returns ``(frames, boxes)``."""
    frames = _background(config, rng)
    boxes = []
    for c in labels:
        for _attempt in range(20):
            xs, ys, h, w = _trajectory(config, rng, config.detection_motif_size, motifs[c].direction)
            box = _keyframe_box(config, xs, ys, h, w)
            if all(_box_iou(box, b) < 0.1 for b, _ in boxes):
                break
        _paint(frames, motifs[c], xs, ys, h, w, config, rng)
        boxes.append((box, int(c)))
    return _finish(frames), boxes


def render_classification_clip(config, motif, rng):
    frames = _background(config, rng)
    xs, ys, h, w = _trajectory(config, rng, config.classification_motif_size, motif.direction)
    _paint(frames, motif, xs, ys, h, w, config, rng)
    return _finish(frames)


def _make_proposals(config, keyframe: Keyframe, rng) -> Keyframe:
    lo, hi = config.proposal_score_range
    props = []
    for b in keyframe.boxes:
        x1, y1, x2, y2 = b.box
        w, h = x2 - x1, y2 - y1
        d = rng.uniform(-config.proposal_jitter, config.proposal_jitter, size=4) * np.array([w, h, w, h])
        box = np.clip(np.array(b.box) + d, 0.0, 1.0)
        if not (box[0] < box[2] and box[1] < box[3]):
            box = np.array(b.box)
        props.append(BoxAnnotation(tuple(float(v) for v in box), frozenset(), float(rng.uniform(lo, hi)), b.person_id))
    for _ in range(config.distractor_proposals):
        x1, y1 = rng.uniform(0, 0.7, size=2)
        s = rng.uniform(0.15, 0.3)
        props.append(BoxAnnotation((x1, y1, min(1.0, x1 + s), min(1.0, y1 + s)), frozenset(),
                                   float(rng.uniform(0.0, 1.0)), None))
    return Keyframe(keyframe.clip_id, keyframe.timestamp, tuple(sorted(props, key=BoxAnnotation.sort_key)))


def _detection_split(config, motifs, name, num_clips, exponent, rng, with_proposals):
    lo, hi = config.boxes_per_clip
    per_clip = rng.integers(lo, hi + 1, size=num_clips)
    labels = _label_sequence(rng, config.num_classes, exponent, int(per_clip.sum()))
    clips, keyframes = [], []
    start = 0
    for i, n in enumerate(per_clip):
        frames, boxes = render_detection_clip(config, motifs, labels[start:start + n], rng)
        start += n
        video_id = f"{name}_v{i // 8:04d}"
        timestamp = float(902 + i % 8)
        anns = tuple(sorted((BoxAnnotation(box, frozenset({c}), None, pid) for pid, (box, c) in enumerate(boxes)),
                            key=BoxAnnotation.sort_key))
        clips.append(frames)
        keyframes.append(Keyframe(video_id, timestamp, anns))
    clips = np.stack(clips) if clips else np.zeros((0, *config.clip_shape), np.float32)
    proposals = tuple(_make_proposals(config, kf, rng) for kf in keyframes) if with_proposals else None
    spec = detection_spec(name, keyframes, config.num_classes)
    return DetectionDataset(spec, clips, tuple(keyframes), proposals)


def generate_synthetic_suite(seed: int, config: SyntheticConfig | None = None) -> SyntheticSuite:
    """Deterministic in ``(seed, config)``."""
    config = config or SyntheticConfig()
    root = np.random.SeedSequence([int(seed), 7])
    bank_ss, train_ss, val_ss, *cls_ss = root.spawn(3 + len(config.classification))
    motifs = make_motif_bank(config, np.random.default_rng(bank_ss))
    det = _detection_split(config, motifs, config.detection_name, config.detection_train_clips,
                           config.long_tail_exponent, np.random.default_rng(train_ss), with_proposals=True)
    val = _detection_split(config, motifs, f"{config.detection_name}_val", config.detection_val_clips,
                           config.val_long_tail_exponent, np.random.default_rng(val_ss), with_proposals=True)
    cls_sets = []
    for src, ss in zip(config.classification, cls_ss):
        rng = np.random.default_rng(ss)
        labels = _label_sequence(rng, config.num_classes, 0.0, src.size)
        clips = np.stack([render_classification_clip(config, motifs[c], rng) for c in labels])
        spec = classification_spec(src.name, labels, config.num_classes)
        ids = tuple(f"{src.name}_{i:05d}" for i in range(src.size))
        cls_sets.append(ClassificationDataset(spec, clips, labels.astype(np.int64), ids))
    return SyntheticSuite(config, int(seed), motifs, det, val, tuple(cls_sets))


# ---------------------------------------------------------------------------
# persistence

def save_suite(suite: SyntheticSuite, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, ds in (("train", suite.detection), ("val", suite.detection_val)):
        name = ds.spec.name
        (root / name).mkdir(exist_ok=True)
        np.save(root / name / "clips.npy", np.ascontiguousarray(ds.clips))
        write_ava_csv(ds.keyframes, root / name / "annotations.csv")
        entry = {"name": name, "task": "detection", "split": split, "spec": ds.spec.to_dict(),
                 "clips": f"{name}/clips.npy", "annotations": f"{name}/annotations.csv",
                 "keyframes": [[kf.clip_id, kf.timestamp] for kf in ds.keyframes]}
        if ds.proposals is not None:
            write_ava_csv(ds.proposals, root / name / "proposals.csv")
            entry["proposals"] = f"{name}/proposals.csv"
        entries.append(entry)
    for ds in suite.classification:
        name = ds.spec.name
        (root / name).mkdir(exist_ok=True)
        np.save(root / name / "clips.npy", np.ascontiguousarray(ds.clips))
        write_classification_manifest(zip(ds.clip_ids, ds.labels.tolist()), root / name / "manifest.csv")
        entries.append({"name": name, "task": "classification", "split": "train", "spec": ds.spec.to_dict(),
                        "clips": f"{name}/clips.npy", "manifest": f"{name}/manifest.csv",
                        "clip_ids": list(ds.clip_ids)})
    index = {
        "format": SUITE_FORMAT,
        "seed": suite.seed,
        "config": suite.config.to_dict(),
        "motifs": [{"colors": [list(c) for c in m.colors], "pattern": m.pattern, "direction": list(m.direction)}
                   for m in suite.motifs],
        "datasets": entries,
    }
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return root


def align_keyframes(loaded: Sequence[Keyframe], order, path) -> tuple[Keyframe, ...]:
    by_key = {kf.key: kf for kf in loaded}
    out = []
    for clip_id, ts in order:
        kf = Keyframe(clip_id, ts)
        out.append(by_key.pop(kf.key, kf))
    if by_key:
        raise DataFormatError(f"{len(by_key)} annotated keyframe(s) not listed in the index", path=path)
    return tuple(out)


def load_dataset_entry(root: Path, entry: dict):
    spec = DatasetSpec.from_dict(entry["spec"])
    clips = np.load(root / entry["clips"])
    if entry["task"] == "detection":
        order = entry["keyframes"]
        keyframes = align_keyframes(load_ava_csv(root / entry["annotations"], spec.num_classes), order,
                                     root / entry["annotations"])
        proposals = None
        if "proposals" in entry:
            proposals = align_keyframes(load_ava_csv(root / entry["proposals"], spec.num_classes), order,
                                         root / entry["proposals"])
        ds = DetectionDataset(detection_spec(spec.name, keyframes, spec.num_classes), clips, keyframes, proposals)
    else:
        rows = load_classification_manifest(root / entry["manifest"], spec.num_classes)
        if [r[0] for r in rows] != list(entry["clip_ids"]):
            raise DataFormatError("manifest clip ids do not match the index", path=root / entry["manifest"])
        labels = np.asarray([r[1] for r in rows], dtype=np.int64)
        ds = ClassificationDataset(classification_spec(spec.name, labels, spec.num_classes), clips, labels,
                                   tuple(entry["clip_ids"]))
    if ds.spec != spec:
        raise DataFormatError(f"stored spec for {spec.name!r} does not match its contents", path=root / "index.json")
    return ds


def load_suite(directory) -> dict:
    """Load every dataset of a saved suite, keyed by name."""
    root = Path(directory)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise FileNotFoundError(f"no suite index at {index_path}")
    index = json.loads(index_path.read_text())
    if index.get("format") != SUITE_FORMAT:
        raise DataFormatError(f"unsupported suite format {index.get('format')!r}", path=index_path)
    return {e["name"]: load_dataset_entry(root, e) for e in index["datasets"]}


def dataset_fingerprint(dataset) -> str:
    """SHA-256 over clip bytes, labels/annotations and the dataset's DatasetSpec."""
    h = hashlib.sha256()
    h.update(json.dumps(dataset.spec.to_dict(), sort_keys=True).encode())
    h.update(np.ascontiguousarray(dataset.clips).tobytes())
    if isinstance(dataset, ClassificationDataset):
        h.update(np.ascontiguousarray(dataset.labels, dtype=np.int64).tobytes())
    else:
        for kf in dataset.keyframes:
            h.update(repr((kf.clip_id, kf.timestamp, [(b.box, sorted(b.labels), b.score, b.person_id)
                                                       for b in kf.boxes])).encode())
    return h.hexdigest()
