"""Matplotlib renderings of the report objects, saved as PNG files.

Every report-producing command can drop a figure next to its JSON output;
rendering is headless (Agg) and deterministic.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .depth import DepthReport
from .evaluate import BenchReport, EvalReport

__all__ = ["figure_path", "depth_figure", "loss_figure", "ap_figure", "bench_figure"]


def figure_path(out_path: str | Path, kind: str) -> Path:
    """Sibling PNG for a report file: report.json -> report.<kind>.png."""
    p = Path(out_path)
    return p.with_name(f"{p.stem}.{kind}.png")


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def depth_figure(report: DepthReport, path: str | Path) -> Path:
    """Per-source depth bars with the mean line; lower spread means a flatter pyramid."""
    names = [s.name for s in report.sources]
    depths = [float(s.depth) for s in report.sources]
    mean = sum(depths) / len(depths)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(depths)), depths, color="#4878a8")
    ax.axhline(mean, color="#b04040", linestyle="--", linewidth=1, label=f"mean {mean:.2f}")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("weighted average depth")
    ax.set_title(f"prediction-source depths (cv {report.cv_percent:.2f}%)")
    ax.legend()
    return _save(fig, path)


def loss_figure(log: list[dict], path: str | Path) -> Path:
    """Total loss per iteration with phase boundaries marked."""
    if not log:
        raise ValueError("empty training log")
    totals = [r["total"] for r in log]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(range(len(totals)), totals, linewidth=1, color="#4878a8")
    for i in range(1, len(log)):
        if log[i]["phase"] != log[i - 1]["phase"]:
            ax.axvline(i - 0.5, color="#808080", linestyle=":", linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("training loss (dotted lines: phase boundaries)")
    return _save(fig, path)


def ap_figure(report: EvalReport, class_names: list[str], path: str | Path) -> Path:
    """Per-class AP bars; classes without ground truth are skipped."""
    rows = [(c, class_names[c.class_id] if c.class_id < len(class_names) else str(c.class_id))
            for c in report.per_class if c.num_gt > 0]
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        ax.bar(range(len(rows)), [c.ap for c, _ in rows], color="#4878a8")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([n for _, n in rows], rotation=20, ha="right")
    ax.axhline(report.mean_ap, color="#b04040", linestyle="--", linewidth=1,
               label=f"mAP {report.mean_ap:.3f}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(f"AP @ IoU {report.iou_thresh}")
    ax.set_title("per-class average precision")
    ax.legend()
    return _save(fig, path)


def bench_figure(report: BenchReport, path: str | Path) -> Path:
    """Mean/median latency bars annotated with throughput."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar([0, 1], [report.mean_ms, report.median_ms], color=["#4878a8", "#6898c8"])
    ax.set_xticks([0, 1])
    ax.set_xticklabels(["mean", "median"])
    ax.set_ylabel("latency per image (ms)")
    ax.set_title(
        f"batch {report.batch_size} @ {report.input_resolution}px: {report.fps:.1f} images/s"
    )
    return _save(fig, path)
