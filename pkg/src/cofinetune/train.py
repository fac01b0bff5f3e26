"""Losses, optimiser, schedule, augmentation and the training drivers.

Three drivers share one step function:

* :func:`finetune` trains on a single dataset.
* :func:`cofinetune` trains on several datasets at once, one dataset per
  minibatch, with a single optimiser state for the whole run.
* :func:`sequential_finetune` is the transfer-learning baseline: stages run
  one after another, the backbone carries over, and the head, optimiser
  state and schedule are reset at every stage.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import BoxAnnotation, ClassificationDataset, DetectionDataset
from .errors import ConfigError, NumericalError
from .model import CofinetuneModel, derive_seed
from .sampler import IndexStream, MinibatchSampler, SamplerConfig, steps_per_epoch

log = logging.getLogger(__name__)

# per-step RNG stream tags
_AUGMENT_STREAM = 10
_DROP_PATH_STREAM = 11
_STAGE_STREAM = 12

# boxes narrower than this (normalised) after jitter are dropped
MIN_BOX_SIZE = 1e-3


@dataclass(frozen=True)
class LossConfig:
    label_smoothing: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("must be in [0, 1)", "loss.label_smoothing")


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 0.2
    warmup_epochs: float = 2.5
    total_epochs: float = 15.0
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if not 0 < self.warmup_epochs < self.total_epochs:
            raise ConfigError("need 0 < warmup_epochs < total_epochs", "schedule.warmup_epochs")
        if self.base_lr <= 0:
            raise ConfigError("must be positive", "schedule.base_lr")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("must be positive", "schedule.steps_per_epoch")

    def with_steps(self, n: int) -> "ScheduleConfig":
        return replace(self, steps_per_epoch=int(n))

    def _spe(self):
        if self.steps_per_epoch is None:
            raise ConfigError("steps_per_epoch not resolved", "schedule.steps_per_epoch")
        return self.steps_per_epoch

    @property
    def warmup_steps(self) -> float:
        return self.warmup_epochs * self._spe()

    @property
    def total_steps(self) -> int:
        return int(round(self.total_epochs * self._spe()))


@dataclass(frozen=True)
class AugmentConfig:
    scale_jitter_range: tuple[float, float] = (0.65, 1.1)
    box_jitter_ratio: float = 0.15

    def __post_init__(self):
        lo, hi = self.scale_jitter_range
        object.__setattr__(self, "scale_jitter_range", (float(lo), float(hi)))
        if not 0 < lo <= hi:
            raise ConfigError("need 0 < low <= high", "augment.scale_jitter_range")
        if self.box_jitter_ratio < 0:
            raise ConfigError("must be >= 0", "augment.box_jitter_ratio")


NO_AUGMENT = AugmentConfig((1.0, 1.0), 0.0)


# ---------------------------------------------------------------------------
# losses

def _check_finite(logits: torch.Tensor):
    if not torch.isfinite(logits).all():
        raise NumericalError("non-finite logits")


def classification_loss(logits: torch.Tensor, labels: torch.Tensor, smoothing: float = 0.0) -> torch.Tensor:
    """Softmax cross-entropy against ``(1 - eps) * onehot + eps / K``, batch mean."""
    _check_finite(logits)
    K = logits.shape[-1]
    logp = F.log_softmax(logits, dim=-1)
    target = F.one_hot(labels.long(), K).to(logits.dtype) * (1.0 - smoothing) + smoothing / K
    return -(target * logp).sum(dim=-1).mean()


def detection_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-class sigmoid BCE, mean over proposals and classes. No proposals -> 0."""
    _check_finite(logits)
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="mean")


def multi_hot(label_sets: Sequence[frozenset[int]], num_classes: int) -> torch.Tensor:
    out = torch.zeros(len(label_sets), num_classes)
    for j, labels in enumerate(label_sets):
        for c in labels:
            out[j, c] = 1.0
    return out


# ---------------------------------------------------------------------------
# schedule and optimiser

def learning_rate(step: float, schedule: ScheduleConfig) -> float:
    """Linear warm-up from 0, then half-cosine decay to 0 at ``total_steps``."""
    warm = schedule.warmup_steps
    total = schedule.total_steps
    step = min(max(step, 0), total)
    if step < warm:
        return schedule.base_lr * step / warm
    progress = (step - warm) / (total - warm)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    momentum: float = 0.9
    buffers: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    clip_norm: float | None = None


def sgd_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: OptimizerState, lr: float):
    """Heavy-ball SGD: ``buf = mu * buf + g; p = p - lr * buf``. Updates in place.

    With ``state.clip_norm`` set, the gradients are first rescaled so their
    global L2 norm is at most that value.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}")
    if state.clip_norm is not None and grads:
        norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values())).item()
        if norm > state.clip_norm:
            factor = state.clip_norm / norm
            grads = {n: g * factor for n, g in grads.items()}
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            buf = state.buffers.get(name)
            if buf is None:
                buf = state.buffers[name] = torch.zeros_like(p)
            buf.mul_(state.momentum).add_(g)
            p.sub_(lr * buf)
    state.step += 1
    return params, state


# ---------------------------------------------------------------------------
# augmentation

def rescale_frames(frames: np.ndarray, scale: float) -> np.ndarray:
    """Resize by ``scale``, anchor at the top-left corner, zero-pad or crop to the input canvas."""
    if scale == 1.0:
        return frames.copy()
    T, H, W, C = frames.shape
    nh, nw = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    x = torch.from_numpy(np.array(frames, dtype=np.float32)).permute(0, 3, 1, 2)
    x = F.interpolate(x, size=(nh, nw), mode="bilinear", align_corners=False)
    x = x.permute(0, 2, 3, 1).clamp(0.0, 1.0).numpy()
    out = np.zeros_like(frames, dtype=np.float32)
    h, w = min(nh, H), min(nw, W)
    out[:, :h, :w] = x[:, :h, :w]
    return out


def jitter_box(box, ratio: float, rng: np.random.Generator):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    d = rng.uniform(-ratio, ratio, size=4) if ratio > 0 else np.zeros(4)
    return (x1 + d[0] * w, y1 + d[1] * h, x2 + d[2] * w, y2 + d[3] * h)


def augment(frames: np.ndarray, boxes: Sequence[BoxAnnotation], config: AugmentConfig, rng: np.random.Generator,
            jitter_boxes: bool = True, scale: float | None = None):
    """Scale-jitter a clip and its boxes, then perturb each box edge.

    Returns ``(frames', kept_boxes)``. Boxes that collapse after clipping are
    dropped with a warning. ``scale`` overrides the sampled scale.
    """
    if scale is None:
        lo, hi = config.scale_jitter_range
        scale = lo if lo == hi else float(rng.uniform(lo, hi))
    out = rescale_frames(frames, scale)
    kept = []
    for b in boxes:
        box = tuple(v * scale for v in b.box)
        if jitter_boxes and config.box_jitter_ratio > 0:
            box = jitter_box(box, config.box_jitter_ratio, rng)
        box = tuple(min(max(v, 0.0), 1.0) for v in box)
        if box[2] - box[0] < MIN_BOX_SIZE or box[3] - box[1] < MIN_BOX_SIZE:
            log.warning("dropping box %s: degenerate after augmentation", b.box)
            continue
        kept.append(BoxAnnotation(box, b.labels, b.score, b.person_id))
    return out, kept


# ---------------------------------------------------------------------------
# batches

@dataclass
class Batch:
    clips: torch.Tensor
    labels: torch.Tensor | None = None
    boxes: torch.Tensor | None = None
    batch_index: torch.Tensor | None = None
    targets: torch.Tensor | None = None


def make_batch(dataset, indices: Sequence[int], augment_cfg: AugmentConfig, rng: np.random.Generator,
               dtype=torch.float64) -> Batch:
    clips, all_boxes, bidx, label_sets = [], [], [], []
    for j, i in enumerate(indices):
        frames = dataset.clips[i]
        if isinstance(dataset, DetectionDataset):
            frames, boxes = augment(frames, dataset.keyframes[i].boxes, augment_cfg, rng)
            for b in boxes:
                all_boxes.append(b.box)
                bidx.append(j)
                label_sets.append(b.labels)
        else:
            frames, _ = augment(frames, (), augment_cfg, rng)
        clips.append(frames)
    batch = Batch(torch.from_numpy(np.stack(clips)).to(dtype))
    if isinstance(dataset, ClassificationDataset):
        batch.labels = torch.as_tensor([int(dataset.labels[i]) for i in indices], dtype=torch.long)
    else:
        batch.boxes = torch.as_tensor(all_boxes, dtype=dtype).reshape(-1, 4)
        batch.batch_index = torch.as_tensor(bidx, dtype=torch.long)
        batch.targets = multi_hot(label_sets, dataset.spec.num_classes).to(dtype)
    return batch


def batch_loss(model: CofinetuneModel, head_index: int, batch: Batch, loss_cfg: LossConfig,
               training: bool = True, generator: torch.Generator | None = None) -> torch.Tensor:
    if batch.labels is not None:
        logits = model(batch.clips, head_index, training=training, generator=generator)
        return classification_loss(logits, batch.labels, loss_cfg.label_smoothing)
    logits = model(batch.clips, head_index, batch.boxes, batch.batch_index, training=training, generator=generator)
    return detection_loss(logits, batch.targets)


# ---------------------------------------------------------------------------
# drivers

@dataclass(frozen=True)
class LogEntry:
    step: int
    dataset: str
    loss: float
    lr: float


def write_log_csv(entries: Sequence[LogEntry], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "dataset", "loss", "lr"])
        for e in entries:
            writer.writerow([e.step, e.dataset, repr(e.loss), repr(e.lr)])


def read_log_csv(path) -> list[LogEntry]:
    with Path(path).open(newline="") as fh:
        return [LogEntry(int(r["step"]), r["dataset"], float(r["loss"]), float(r["lr"])) for r in csv.DictReader(fh)]


def train_step(model: CofinetuneModel, opt: OptimizerState, head_index: int, batch: Batch, lr: float,
               loss_cfg: LossConfig, generator: torch.Generator | None) -> float:
    """One update of the backbone and the selected head; other heads are untouched."""
    params = {**model.backbone_parameters(), **model.head_parameters(head_index)}
    for p in params.values():
        p.grad = None
    loss = batch_loss(model, head_index, batch, loss_cfg, training=True, generator=generator)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {float(loss)}")
    if loss.requires_grad:
        loss.backward()
    grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
    sgd_step(params, grads, opt, lr)
    for p in params.values():
        p.grad = None
    return loss.item()


StepCallback = Callable[[int, CofinetuneModel], None]


def _run_step(model, opt, dataset, head_index, indices, step, global_step, lr, seed,
              loss_cfg, augment_cfg) -> LogEntry:
    rng = np.random.default_rng([seed, _AUGMENT_STREAM, step])
    gen = torch.Generator().manual_seed(derive_seed(seed, _DROP_PATH_STREAM, step))
    batch = make_batch(dataset, indices, augment_cfg, rng, model.config.torch_dtype)
    try:
        loss = train_step(model, opt, head_index, batch, lr, loss_cfg, gen)
    except NumericalError as exc:
        raise NumericalError(f"step {global_step} on {dataset.spec.name!r} (lr={lr:.6g}): {exc}") from exc
    return LogEntry(global_step, dataset.spec.name, loss, lr)


def finetune(model: CofinetuneModel, dataset, batch_size: int, schedule: ScheduleConfig, loss_cfg: LossConfig,
             augment_cfg: AugmentConfig, seed: int, momentum: float = 0.9, step_offset: int = 0,
             callback: StepCallback | None = None, clip_norm: float | None = None
             ) -> tuple[CofinetuneModel, list[LogEntry]]:
    """Plain training on one dataset through its own head."""
    head_index = model.config.head_index(dataset.spec.name)
    spe = steps_per_epoch(SamplerConfig("weighted", batch_size, (len(dataset),), seed))
    schedule = schedule.with_steps(spe)
    stream = IndexStream(len(dataset), seed, 0)
    opt = OptimizerState(momentum, clip_norm=clip_norm)
    entries = []
    for step in range(schedule.total_steps):
        lr = learning_rate(step, schedule)
        entries.append(_run_step(model, opt, dataset, head_index, stream.take(batch_size), step,
                                 step_offset + step, lr, seed, loss_cfg, augment_cfg))
        if callback:
            callback(step_offset + step, model)
    return model, entries


def cofinetune(model: CofinetuneModel, datasets: Sequence, sampler_cfg: SamplerConfig, schedule: ScheduleConfig,
               loss_cfg: LossConfig, augment_cfg: AugmentConfig, momentum: float = 0.9,
               callback: StepCallback | None = None, clip_norm: float | None = None
               ) -> tuple[CofinetuneModel, list[LogEntry]]:
    """Train one shared backbone on every dataset, one dataset per minibatch."""
    sizes = tuple(len(d) for d in datasets)
    if sampler_cfg.dataset_sizes != sizes:
        raise ConfigError(f"sampler sizes {sampler_cfg.dataset_sizes} != dataset sizes {sizes}", "sampler.dataset_sizes")
    head_of = [model.config.head_index(d.spec.name) for d in datasets]
    schedule = schedule.with_steps(steps_per_epoch(sampler_cfg))
    sampler = MinibatchSampler(sampler_cfg)
    opt = OptimizerState(momentum, clip_norm=clip_norm)
    seed = sampler_cfg.seed
    entries = []
    for step in range(schedule.total_steps):
        ticket = sampler.next_batch()
        lr = learning_rate(step, schedule)
        ds = datasets[ticket.dataset_index]
        entries.append(_run_step(model, opt, ds, head_of[ticket.dataset_index], ticket.example_indices,
                                 step, step, lr, seed, loss_cfg, augment_cfg))
        if callback:
            callback(step, model)
    return model, entries


@dataclass(frozen=True)
class Stage:
    dataset: object
    schedule: ScheduleConfig


def stage_seed(seed: int, stage: int) -> int:
    return seed if stage == 0 else derive_seed(seed, _STAGE_STREAM, stage)


def sequential_finetune(model: CofinetuneModel, stages: Sequence[Stage], batch_size: int, loss_cfg: LossConfig,
                        augment_cfg: AugmentConfig, seed: int, momentum: float = 0.9,
                        callback: StepCallback | None = None, clip_norm: float | None = None
                        ) -> tuple[CofinetuneModel, list[list[LogEntry]]]:
    """Transfer-learning baseline: backbone carries over, head/optimiser/schedule reset per stage."""
    if not stages:
        raise ConfigError("need at least one stage", "stages")
    logs, offset = [], 0
    for k, stage in enumerate(stages):
        model.reset_head(model.config.head_index(stage.dataset.spec.name), seed)
        _, entries = finetune(model, stage.dataset, batch_size, stage.schedule, loss_cfg, augment_cfg,
                              stage_seed(seed, k), momentum, step_offset=offset, callback=callback,
                              clip_norm=clip_norm)
        logs.append(entries)
        offset += len(entries)
    return model, logs
