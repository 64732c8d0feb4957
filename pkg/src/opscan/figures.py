"""Figure rendering for ranking and sweep reports, written next to the CSV
outputs they visualize."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .dalvik import DEFAULT_TABLE, InstructionFormatTable  # noqa: E402
from .evaluation import SweepReport  # noqa: E402
from .features import FeatureRanking  # noqa: E402

# (row attribute chain, y label, file stem)
_SWEEP_SERIES = [
    ("accuracy_pct", "Accuracy (%)", "accuracy_vs_features"),
    ("tp", "True positives", "true_positives_vs_features"),
    ("tn", "True negatives", "true_negatives_vs_features"),
    ("fn", "False negatives", "false_negatives_vs_features"),
    ("fp", "False positives", "false_positives_vs_features"),
]

_MARKERS = ["o", "s", "^", "D", "v", "P"]


def _png_metadata(config: dict | None) -> dict | None:
    if config is None:
        return None
    import json

    return {"Description": "config: " + json.dumps(config, sort_keys=True)}


def render_sweep_figures(report: SweepReport, out_dir,
                         config: dict | None = None) -> list[Path]:
    """One line chart per metric (accuracy, TP, TN, FN, FP against feature
    count) plus a best-accuracy bar chart."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metadata = _png_metadata(config)
    kinds = sorted({r.classifier for r in report.rows})
    written = []
    for attr, ylabel, stem in _SWEEP_SERIES:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for i, kind in enumerate(kinds):
            rows = [r for r in report.rows if r.classifier == kind and r.error is None]
            rows.sort(key=lambda r: r.n_features)
            if not rows:
                continue
            xs = [r.n_features for r in rows]
            if attr == "accuracy_pct":
                ys = [r.metrics.accuracy_pct for r in rows]
            else:
                ys = [getattr(r.cm, attr) for r in rows]
            ax.plot(xs, ys, marker=_MARKERS[i % len(_MARKERS)], label=kind)
        ax.set_xlabel("Number of prominent features")
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{stem}.png"
        fig.savefig(path, dpi=150, metadata=metadata)
        plt.close(fig)
        written.append(path)

    stats = report.summarize()
    if stats:
        fig, ax = plt.subplots(figsize=(6, 4))
        names = [s.classifier for s in stats]
        values = [s.best_accuracy for s in stats]
        ax.bar(names, values, color="tab:blue")
        for x, v in zip(names, values):
            ax.text(x, v, f"{v:.2f}", ha="center", va="bottom", fontsize=9)
        ax.set_ylabel("Best accuracy (%)")
        ax.set_ylim(0, 105)
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        path = out_dir / "best_accuracy.png"
        fig.savefig(path, dpi=150, metadata=metadata)
        plt.close(fig)
        written.append(path)
    return written


def render_ranking_figure(ranking: FeatureRanking, out_path,
                          table: InstructionFormatTable = DEFAULT_TABLE,
                          max_bars: int = 40, config: dict | None = None) -> Path:
    """Bar chart of the dominant opcodes' difference scores."""
    out_path = Path(out_path)
    shown = ranking.ranked[:max_bars]
    names = [table.mnemonic(op) for op, _ in shown]
    scores = [score for _, score in shown]
    fig, ax = plt.subplots(figsize=(max(6, 0.28 * len(shown)), 4.5))
    ax.bar(range(len(shown)), scores, color="tab:red")
    ax.set_xticks(range(len(shown)))
    ax.set_xticklabels(names, rotation=75, ha="right", fontsize=7)
    ax.set_ylabel("Class-mean frequency difference")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150, metadata=_png_metadata(config))
    plt.close(fig)
    return out_path
