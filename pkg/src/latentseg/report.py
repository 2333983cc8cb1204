"""Tables and plots built from saved evaluation reports."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import CLEAN, METRICS, EvalReport  # noqa: E402


def level_name(level: int) -> str:
    return "clean" if level == CLEAN else f"LQ-{level}"


def _fmt(v: float) -> str:
    return "n/a" if np.isnan(v) else f"{v:.4f}"


def table(reports: Mapping[str, EvalReport], mode: str = "points",
          metrics=METRICS) -> str:
    """Markdown table: one row per report, one column per (level, metric)."""
    levels = sorted({lv for r in reports.values() for lv in r.levels()})
    head = ["run"] + [f"{level_name(lv)} {m}" for lv in levels for m in metrics]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for name, r in reports.items():
        cells = [name] + [_fmt(r.mean(m, lv, mode)) for lv in levels for m in metrics]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def score_table(reports: Mapping[str, EvalReport]) -> str:
    lines = ["| run | level | mean score |", "|---|---|---|"]
    for name, r in reports.items():
        for lv, s in r.mean_scores().items():
            lines.append(f"| {name} | {level_name(lv)} | {s:.4f} |")
    return "\n".join(lines)


def plot_metric_vs_level(reports: Mapping[str, EvalReport], path: str | Path,
                         metric: str = "iou", mode: str = "points") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, r in reports.items():
        lv = r.levels()
        ax.plot(range(len(lv)), [r.mean(metric, l, mode) for l in lv], marker="o", label=name)
        ax.set_xticks(range(len(lv)), [level_name(l) for l in lv])
    ax.set_ylabel(f"mean {metric}")
    ax.set_title(f"{metric} by degradation level ({mode} prompts)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_score_distribution(report: EvalReport, path: str | Path) -> Path | None:
    """Histogram of degradation scores per level; None when the run has no scores."""
    by_level = {lv: [r["score"] for r in report.select(lv) if r["score"] is not None]
                for lv in report.levels()}
    by_level = {lv: v for lv, v in by_level.items() if v}
    if not by_level:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.5))
    lo = min(min(v) for v in by_level.values())
    hi = max(max(v) for v in by_level.values())
    bins = np.linspace(lo, hi if hi > lo else lo + 1e-3, 30)
    for lv, vals in by_level.items():
        ax.hist(vals, bins=bins, alpha=0.5, label=level_name(lv))
    ax.set_xlabel("degradation score")
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(reports: Mapping[str, EvalReport], out_dir: str | Path) -> Path:
    """Write ``summary.md`` plus one metric plot and per-run score histograms."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modes = sorted({m for r in reports.values() for m in r.modes()})
    parts = ["# Evaluation summary", ""]
    for mode in modes:
        parts += [f"## {mode} prompts", "", table(reports, mode), ""]
        plot_metric_vs_level(reports, out_dir / f"iou_{mode}.png", mode=mode)
    scores = score_table(reports)
    if scores.count("\n") > 1:
        parts += ["## Degradation scores", "", scores, ""]
    for name, r in reports.items():
        plot_score_distribution(r, out_dir / f"scores_{name}.png")
        if r.missing:
            parts += [f"Missing samples in {name}: {', '.join(r.missing)}", ""]
    path = out_dir / "summary.md"
    path.write_text("\n".join(parts))
    return path
