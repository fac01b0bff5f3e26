"""Run orchestration shared by the CLI and the acceptance experiments.

A run directory holds::

    config.yaml         resolved experiment config
    fingerprints.json   SHA-256 of every dataset the run touched
    train_log.csv       step,dataset,loss,lr
    train_log.png
    model.ckpt          final checkpoint (see ``model.save_checkpoint``)
    checkpoints/        periodic checkpoints when ``checkpoint_every > 0``
    predictions.csv     written by evaluate
    report.csv          written by evaluate
    report.png
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import COFINETUNE, ExperimentConfig, dump_config, load_config
from .data import DetectionDataset, filter_proposals, load_ava_csv
from .errors import ConfigError, DataFormatError
from .evaluation import APReport, Detection, frame_map, read_report_summary, render_report, write_predictions_csv
from .model import CofinetuneModel, HeadSpec, ModelConfig, load_checkpoint, save_checkpoint
from .plotting import plot_comparison, plot_training_log
from .sampler import SamplerConfig
from .synthetic import align_keyframes, dataset_fingerprint, generate_synthetic_suite, load_suite
from .train import LogEntry, Stage, cofinetune, sequential_finetune, write_log_csv

log = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"
FINGERPRINT_FILE = "fingerprints.json"
LOG_FILE = "train_log.csv"
CHECKPOINT_FILE = "model.ckpt"
PREDICTIONS_FILE = "predictions.csv"
REPORT_FILE = "report.csv"


def load_datasets(cfg: ExperimentConfig) -> dict:
    if cfg.data.suite is not None:
        return load_suite(cfg.data.suite)
    seed = cfg.seed if cfg.data.synthetic_seed is None else cfg.data.synthetic_seed
    return generate_synthetic_suite(seed, cfg.data.synthetic).datasets()


def _require(datasets: dict, name: str, field: str):
    if name not in datasets:
        raise ConfigError(f"unknown dataset {name!r}; available: {sorted(datasets)}", field)
    return datasets[name]


def build_model(cfg: ExperimentConfig, datasets: dict) -> CofinetuneModel:
    names = cfg.training_datasets()
    heads, shapes = [], set()
    for n in names:
        ds = _require(datasets, n, "datasets")
        heads.append(HeadSpec(n, ds.spec.task, ds.spec.num_classes))
        shapes.add(tuple(ds.clips.shape[1:]))
    if len(shapes) != 1:
        raise ConfigError(f"training datasets disagree on clip shape: {sorted(shapes)}", "datasets")
    b = cfg.model
    mcfg = ModelConfig(input_shape=shapes.pop(), tubelet=b.tubelet, hidden_dim=b.hidden_dim, num_layers=b.num_layers,
                       num_attention_heads=b.num_attention_heads, mlp_dim=b.mlp_dim,
                       stochastic_depth_rate=b.stochastic_depth_rate, roi_grid=b.roi_grid, heads=tuple(heads),
                       dtype=b.dtype)
    return CofinetuneModel(mcfg, seed=cfg.seed)


def sampler_config(cfg: ExperimentConfig, datasets: dict) -> SamplerConfig:
    sizes = tuple(len(_require(datasets, n, "datasets")) for n in cfg.datasets)
    return SamplerConfig(cfg.strategy, cfg.batch_size, sizes, cfg.seed)


def train(cfg: ExperimentConfig, datasets: dict | None = None, callback=None):
    """Run the configured driver; returns ``(model, flat log)``."""
    torch.set_num_threads(1)
    datasets = load_datasets(cfg) if datasets is None else datasets
    model = build_model(cfg, datasets)
    if cfg.mode == COFINETUNE:
        ds = [datasets[n] for n in cfg.datasets]
        model, entries = cofinetune(model, ds, sampler_config(cfg, datasets), cfg.schedule, cfg.loss, cfg.augment,
                                    cfg.momentum, callback, cfg.clip_norm)
        return model, entries
    stages = []
    for s in cfg.stages:
        warm = cfg.schedule.warmup_epochs if s.warmup_epochs is None else s.warmup_epochs
        sched = replace(cfg.schedule, warmup_epochs=warm, total_epochs=s.epochs, steps_per_epoch=None)
        stages.append(Stage(datasets[s.dataset], sched))
    model, logs = sequential_finetune(model, stages, cfg.batch_size, cfg.loss, cfg.augment, cfg.seed,
                                      cfg.momentum, callback, cfg.clip_norm)
    return model, [e for stage in logs for e in stage]


def predict_detections(model: CofinetuneModel, dataset: DetectionDataset, head_name: str,
                       proposals: Sequence | None = None, batch_size: int = 32) -> list[Detection]:
    """Single-view eval-mode scores (sigmoid of logits) for every proposal and class."""
    head = model.config.head_index(head_name)
    spec = model.config.heads[head]
    if spec.task != "detection":
        raise ConfigError(f"head {head_name!r} is not a detection head", "evaluation.dataset")
    proposals = dataset.proposals if proposals is None else proposals
    if proposals is None:
        raise DataFormatError(f"no proposals for dataset {dataset.spec.name!r}")
    if len(proposals) != len(dataset):
        raise DataFormatError("proposals must align with the dataset keyframes")
    dtype = model.config.torch_dtype
    out = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = [i for i in range(start, min(start + batch_size, len(dataset))) if proposals[i].boxes]
            if not idx:
                continue
            boxes, bidx, owners = [], [], []
            for j, i in enumerate(idx):
                for b in proposals[i].boxes:
                    boxes.append(b.box)
                    bidx.append(j)
                    owners.append((i, b))
            clips = torch.from_numpy(np.ascontiguousarray(dataset.clips[idx])).to(dtype)
            logits = model(clips, head, torch.as_tensor(boxes, dtype=dtype), torch.as_tensor(bidx), training=False)
            scores = torch.sigmoid(logits).numpy()
            for (i, b), row in zip(owners, scores):
                kf = proposals[i]
                for c, s in enumerate(row):
                    out.append(Detection(kf.clip_id, kf.timestamp, b.box, c, float(s), b.person_id))
    return out


def evaluate(model: CofinetuneModel, cfg: ExperimentConfig, datasets: dict, dataset_name: str | None = None,
             proposals=None, head_name: str | None = None) -> tuple[list[Detection], APReport]:
    name = dataset_name or cfg.evaluation.dataset
    if name is None:
        raise ConfigError("no evaluation dataset configured", "evaluation.dataset")
    ds = _require(datasets, name, "evaluation.dataset")
    if not isinstance(ds, DetectionDataset):
        raise ConfigError(f"{name!r} is not a detection dataset", "evaluation.dataset")
    head_name = head_name or _detection_head_for(model, ds)
    props = ds.proposals if proposals is None else proposals
    if props is None:
        raise DataFormatError(f"missing proposals for detection dataset {name!r}")
    props = filter_proposals(props, cfg.evaluation.proposal_threshold)
    dets = predict_detections(model, ds, head_name, props, cfg.evaluation.batch_size)
    freq_name = cfg.evaluation.frequency_from or head_name
    freq = datasets[freq_name].spec.label_frequency if freq_name in datasets else None
    report = frame_map(ds.keyframes, dets, ds.spec.num_classes, label_frequency=freq,
                       head_threshold=cfg.evaluation.head_threshold, tail_threshold=cfg.evaluation.tail_threshold)
    return dets, report


def _detection_head_for(model, ds):
    names = [h.name for h in model.config.heads if h.task == "detection" and h.num_classes == ds.spec.num_classes]
    if ds.spec.name in names:
        return ds.spec.name
    if len(names) != 1:
        raise ConfigError(f"cannot pick a detection head for {ds.spec.name!r} among {names}", "evaluation.dataset")
    return names[0]


# ---------------------------------------------------------------------------
# run-directory commands

def fingerprints(cfg: ExperimentConfig, datasets: dict) -> dict[str, str]:
    names = list(cfg.training_datasets())
    if cfg.evaluation.dataset and cfg.evaluation.dataset not in names:
        names.append(cfg.evaluation.dataset)
    return {n: dataset_fingerprint(_require(datasets, n, "datasets")) for n in names}


def run_train(cfg: ExperimentConfig, run_dir=None) -> Path:
    run_dir = Path(run_dir or cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(cfg)
    dump_config(cfg, run_dir / CONFIG_FILE)
    (run_dir / FINGERPRINT_FILE).write_text(json.dumps(fingerprints(cfg, datasets), indent=2, sort_keys=True) + "\n")

    callback = None
    if cfg.checkpoint_every:
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)

        def callback(step, model):
            if (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, ckpt_dir / f"step_{step + 1:07d}.ckpt", {"step": step + 1})

    model, entries = train(cfg, datasets, callback)
    write_log_csv(entries, run_dir / LOG_FILE)
    save_checkpoint(model, run_dir / CHECKPOINT_FILE, {"steps": len(entries)})
    plot_training_log(entries, run_dir / "train_log.png")
    log.info("trained %d steps -> %s", len(entries), run_dir)
    return run_dir


def run_evaluate(run_dir, dataset_name=None, proposals_path=None, out_dir=None) -> APReport:
    run_dir = Path(run_dir)
    if not (run_dir / CONFIG_FILE).is_file():
        raise FileNotFoundError(f"not a run directory: {run_dir}")
    cfg = load_config(run_dir / CONFIG_FILE)
    model, _ = load_checkpoint(run_dir / CHECKPOINT_FILE)
    datasets = load_datasets(cfg)
    proposals = None
    name = dataset_name or cfg.evaluation.dataset
    if proposals_path is not None:
        ds = _require(datasets, name, "evaluation.dataset")
        order = [(kf.clip_id, kf.timestamp) for kf in ds.keyframes]
        proposals = align_keyframes(load_ava_csv(proposals_path, ds.spec.num_classes), order, proposals_path)
    dets, report = evaluate(model, cfg, datasets, name, proposals)
    out = Path(out_dir or run_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(dets, out / PREDICTIONS_FILE)
    render_report(report, out / REPORT_FILE, out / "report.png")
    return report


COMPARE_KEYS = ("Head", "Mid", "Tail", "overall")


def run_compare(run_a, run_b, out_dir) -> dict[str, tuple]:
    """Side-by-side group mAP of two evaluated runs; refuses different data."""
    run_a, run_b = Path(run_a), Path(run_b)
    for r in (run_a, run_b):
        if not r.is_dir():
            raise FileNotFoundError(f"run directory not found: {r}")
        for f in (FINGERPRINT_FILE, REPORT_FILE):
            if not (r / f).is_file():
                raise FileNotFoundError(f"{r} has no {f} (train and evaluate it first)")
    fa = json.loads((run_a / FINGERPRINT_FILE).read_text())
    fb = json.loads((run_b / FINGERPRINT_FILE).read_text())
    if sorted(fa.values()) != sorted(fb.values()):
        raise DataFormatError("runs were trained or evaluated on different data (dataset fingerprints differ)")
    sa, sb = read_report_summary(run_a / REPORT_FILE), read_report_summary(run_b / REPORT_FILE)
    rows = {}
    for k in COMPARE_KEYS:
        a, b = sa.get(k), sb.get(k)
        rows[k] = (a, b, None if a is None or b is None else b - a)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "run_a", "run_b", "delta"])
        for k, (a, b, d) in rows.items():
            w.writerow([k, *("n/a" if v is None else f"{v:.8f}" for v in (a, b, d))])
    plot_comparison(sa, sb, run_a.name, run_b.name, out / "comparison.png")
    return rows
