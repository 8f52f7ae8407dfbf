"""Report figures: per-dialog score distribution and per-metric dataset scores."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .aggregation import AggregateReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def plot_report(report: AggregateReport, out_dir: str | Path) -> list[Path]:
    """Write ``dialog_scores.png`` (and ``metric_scores.png`` when partitioned) into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        values = [100 * v for v in report.per_dialog.values()]
        ax.hist(values, bins=20, range=(0, 100), color="#4c72b0", edgecolor="white")
        if report.dataset_score is not None:
            ax.axvline(100 * report.dataset_score, color="#c44e52", ls="--", lw=1,
                       label=f"dataset {100 * report.dataset_score:.2f}")
            ax.legend(frameon=False)
        p = report.policy
        ax.set_title(f"dialog scores ({p.turn_pool}/{p.dialog_pool}/{p.dataset_mode})")
        ax.set_xlabel("score")
        ax.set_ylabel("dialogs")
        fig.tight_layout()
        path = out_dir / "dialog_scores.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

        if report.per_metric:
            names = sorted(report.per_metric)
            scores = [100 * (report.per_metric[n].dataset_score or 0.0) for n in names]
            fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(names), 3))
            bars = ax.bar(names, scores, color="#55a868")
            ax.bar_label(bars, fmt="%.2f", fontsize=8)
            ax.set_ylim(0, 105)
            ax.set_ylabel("dataset score")
            ax.set_title("per-metric scores")
            fig.tight_layout()
            path = out_dir / "metric_scores.png"
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
    return written
