"""Command-line entry point.

Exit codes: 0 on success, 1 for invalid configs or input files, 2 for
numerical or other runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import COFINETUNE, load_config
from .data import detection_label_frequency, load_ava_csv
from .errors import ConfigError, DataFormatError, NumericalError
from .evaluation import frame_map, load_predictions_csv, render_report
from .experiment import load_datasets, run_compare, run_evaluate, run_train, sampler_config
from .sampler import dump_schedule
from .synthetic import SyntheticConfig, generate_synthetic_suite, save_suite

log = logging.getLogger("cofinetune")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _summary(report) -> str:
    parts = [f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in report.group_map.items()]
    overall = "n/a" if report.mean_ap is None else f"{report.mean_ap:.4f}"
    return " ".join(parts + [f"mAP={overall}"])


def cmd_train(args):
    cfg = load_config(args.config)
    run_dir = run_train(cfg, args.out)
    print(run_dir)


def cmd_evaluate(args):
    report = run_evaluate(args.run_dir, args.dataset, args.proposals, args.out)
    print(_summary(report))


def cmd_report(args):
    gt = load_ava_csv(args.gt, args.num_classes)
    preds = load_predictions_csv(args.predictions, args.num_classes)
    freq = detection_label_frequency(load_ava_csv(args.label_frequency, args.num_classes), args.num_classes) \
        if args.label_frequency else None
    report = frame_map(gt, preds, args.num_classes, label_frequency=freq,
                       head_threshold=args.head_threshold, tail_threshold=args.tail_threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    render_report(report, out / "report.csv", out / "report.png")
    print(_summary(report))


def cmd_compare(args):
    rows = run_compare(args.run_a, args.run_b, args.out)
    for k, (a, b, d) in rows.items():
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
        print(f"{k}: {fmt(a)} -> {fmt(b)} ({'n/a' if d is None else f'{d:+.4f}'})")


def cmd_synth(args):
    cfg = SyntheticConfig()
    if args.config:
        import yaml

        raw = yaml.safe_load(Path(args.config).read_text()) or {}
        cfg = SyntheticConfig.from_dict(raw)
    print(save_suite(generate_synthetic_suite(args.seed, cfg), args.out))


def cmd_schedule_dump(args):
    cfg = load_config(args.config)
    if cfg.mode != COFINETUNE:
        raise ConfigError("schedule-dump needs mode=cofinetune", "mode")
    datasets = load_datasets(cfg)
    dump_schedule(sampler_config(cfg, datasets), args.steps, args.out, cfg.datasets)
    print(args.out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cofinetune", description="Co-finetuning for spatio-temporal action detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a YAML config")
    s.add_argument("config")
    s.add_argument("--out", help="run directory (default: output_dir from the config)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a trained run on a detection dataset")
    s.add_argument("run_dir")
    s.add_argument("--dataset", help="dataset name (default: evaluation.dataset)")
    s.add_argument("--proposals", help="proposal CSV replacing the dataset's own proposals")
    s.add_argument("--out", help="output directory (default: the run directory)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="frame AP of a prediction CSV against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--predictions", required=True)
    s.add_argument("--num-classes", type=int, required=True)
    s.add_argument("--label-frequency", help="training annotation CSV used to group classes")
    s.add_argument("--head-threshold", type=int, default=10_000)
    s.add_argument("--tail-threshold", type=int, default=1_000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("compare", help="group mAP deltas between two evaluated runs")
    s.add_argument("run_a")
    s.add_argument("run_b")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("synth", help="write a synthetic suite to disk")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="YAML mapping of synthetic-suite fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("schedule-dump", help="write the minibatch schedule of a co-finetuning config")
    s.add_argument("config")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_schedule_dump)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; usage errors count as invalid input here
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
