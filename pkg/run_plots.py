#!/usr/bin/env python3
"""
Loss and accuracy curves of a run, written as standalone SVG files.

One figure per baseline: the left panel shows the mean loss per epoch of
every training phase, the right panel the training accuracy of the
classification phases. Each seed gets its own line.
"""

from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

from transfer_pipeline import MetricsRecord


def _series(records: Sequence[MetricsRecord], metric: str) -> Dict[Tuple[str, int], Tuple[List[int], List[float]]]:
    series: Dict[Tuple[str, int], Tuple[List[int], List[float]]] = {}
    for record in records:
        value = getattr(record, metric)
        if value is None or record.phase == "eval":
            continue
        xs, ys = series.setdefault((record.phase, record.seed), ([], []))
        xs.append(record.epoch)
        ys.append(value)
    return series


def plot_curves(records: Sequence[MetricsRecord], path: Union[str, Path], title: str = "") -> Path:
    """Render loss/accuracy curves to `path` (SVG, no timestamp)."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams.update({
        "font.family": "DejaVu Sans",
        "axes.unicode_minus": False,
        "svg.hashsalt": "modalbridge",
    })
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6), constrained_layout=True)
    for ax, (metric, label) in zip(axes, [("loss", "Loss"), ("accuracy", "Train accuracy")]):
        for (phase, seed), (xs, ys) in sorted(_series(records, metric).items()):
            ax.plot(xs, ys, marker=".", label=f"{phase} s{seed}")
        ax.set_xlabel("Epoch")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    axes[1].set_ylim(0.0, 1.0)
    if axes[0].get_legend_handles_labels()[0]:
        axes[0].legend(loc="best", fontsize=7)
    if title:
        fig.suptitle(title)

    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
