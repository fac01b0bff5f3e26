"""Static figures for evaluation reports, run comparisons and training logs."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GROUP_COLORS = {"Head": "#4c72b0", "Mid": "#dd8452", "Tail": "#55a868"}

# fixed metadata so repeated renders of the same data give identical files
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def new_figure(width=8.0, height=None):
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, height or width * golden_ratio))
    return fig, ax


def save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_per_class_ap(report, path):
    """Per-class AP bars sorted by training label frequency, groups marked.

    Label frequency goes on a log-scale twin axis.
    """
    classes = sorted(report.per_class_ap, key=lambda c: (-report.label_frequency.get(c, 0), c))
    fig, ax = new_figure(max(6.0, 0.25 * len(classes) + 2))
    if not classes:
        ax.text(0.5, 0.5, "no classes", ha="center", va="center", transform=ax.transAxes)
        ax.set_axis_off()
        return save(fig, path)
    xs = range(len(classes))
    aps = [report.per_class_ap[c] or 0.0 for c in classes]
    colors = [GROUP_COLORS.get(report.groups.get(c), "0.5") for c in classes]
    ax.bar(xs, aps, color=colors)
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([report.class_names.get(c, str(c)) for c in classes], rotation=90, fontsize=7)
    freqs = [report.label_frequency.get(c, 0) for c in classes]
    if any(f > 0 for f in freqs):
        twin = ax.twinx()
        twin.plot(list(xs), [max(f, 1) for f in freqs], color="k", marker=".", lw=1)
        twin.set_yscale("log")
        twin.set_ylabel("label frequency")
    for i in range(1, len(classes)):
        if report.groups.get(classes[i]) != report.groups.get(classes[i - 1]):
            ax.axvline(i - 0.5, color="k", ls="--", lw=0.8)
    mean = "n/a" if report.mean_ap is None else f"{report.mean_ap:.3f}"
    ax.set_title(f"per-class AP (mAP {mean})")
    handles = [plt.Rectangle((0, 0), 1, 1, color=col) for col in GROUP_COLORS.values()]
    ax.legend(handles, list(GROUP_COLORS), loc="upper right", fontsize=8)
    return save(fig, path)


def plot_comparison(summary_a: dict, summary_b: dict, label_a: str, label_b: str, path):
    """Grouped bars of Head/Mid/Tail/overall mAP for two runs, deltas annotated."""
    keys = ["Head", "Mid", "Tail", "overall"]
    fig, ax = new_figure(6.0)
    width = 0.38
    va = [summary_a.get(k) or 0.0 for k in keys]
    vb = [summary_b.get(k) or 0.0 for k in keys]
    ax.bar([i - width / 2 for i in range(4)], va, width, label=label_a, color="0.6")
    ax.bar([i + width / 2 for i in range(4)], vb, width, label=label_b, color="#55a868")
    for i, k in enumerate(keys):
        if summary_a.get(k) is not None and summary_b.get(k) is not None:
            ax.annotate(f"{vb[i] - va[i]:+.3f}", (i + width / 2, vb[i]), ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(4))
    ax.set_xticklabels(keys)
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    return save(fig, path)


def plot_training_log(entries, path):
    """Loss per step, one series per dataset, with the learning rate on a twin axis."""
    fig, ax = new_figure(7.0)
    by_ds = {}
    for e in entries:
        by_ds.setdefault(e.dataset, ([], []))
        by_ds[e.dataset][0].append(e.step)
        by_ds[e.dataset][1].append(e.loss)
    for name, (steps, losses) in sorted(by_ds.items()):
        ax.plot(steps, losses, lw=0.8, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if by_ds:
        ax.legend(fontsize=8)
        twin = ax.twinx()
        twin.plot([e.step for e in entries], [e.lr for e in entries], color="k", lw=0.6, alpha=0.5)
        twin.set_ylabel("learning rate")
    return save(fig, path)
