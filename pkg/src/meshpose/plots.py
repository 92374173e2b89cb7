"""Matplotlib figures for reports, landscapes and training traces.

All figures render headless (Agg) straight to files next to the delimited
outputs they illustrate.
"""
from __future__ import annotations

import math
import os
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .harness import EvalReport  # noqa: E402

_SAVE_OPTS = {"dpi": 150, "bbox_inches": "tight"}


def save_eval_figure(reports: Mapping[str, EvalReport] | EvalReport,
                     path: str | os.PathLike) -> None:
    """Accuracy bars and median error per occlusion level (one bar group
    per report when several are compared)."""
    if isinstance(reports, EvalReport):
        reports = {"result": reports}
    levels: list[str] = []
    for rep in reports.values():
        for lv in rep.levels():
            if lv not in levels:
                levels.append(lv)
    fig, (ax_acc, ax_med) = plt.subplots(1, 2, figsize=(10, 4))
    x = np.arange(len(levels))
    width = 0.8 / max(len(reports), 1)
    for i, (name, rep) in enumerate(reports.items()):
        acc6 = [100.0 * rep.accuracy(rep.THRESH_PI6, lv) for lv in levels]
        acc18 = [100.0 * rep.accuracy(rep.THRESH_PI18, lv) for lv in levels]
        med = [rep.median_deg(lv) for lv in levels]
        offs = (i - (len(reports) - 1) / 2.0) * width
        ax_acc.bar(x + offs, acc6, width * 0.9, label=f"{name} (30 deg)")
        ax_acc.plot(x + offs, acc18, "v", color="black", markersize=4,
                    label=f"{name} (10 deg)" if i == 0 else None)
        ax_med.plot(x, med, marker="o", label=name)
    ax_acc.set_xticks(x, levels)
    ax_acc.set_ylabel("accuracy [%]")
    ax_acc.set_ylim(0, 105)
    ax_acc.legend(fontsize=8)
    ax_acc.set_title("pose accuracy")
    ax_med.set_xticks(x, levels)
    ax_med.set_ylabel("median error [deg]")
    ax_med.set_title("median pose error")
    ax_med.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_landscape_figure(curves: Mapping[str, tuple[np.ndarray, np.ndarray, float]],
                          path: str | os.PathLike) -> None:
    """One panel per swept parameter: loss curve plus the truth marker.

    ``curves`` maps parameter name to (values, nll, gt_value).
    """
    n = len(curves)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.2), squeeze=False)
    for ax, (name, (values, nll, gt)) in zip(axes[0], curves.items()):
        ax.plot(np.degrees(values), nll, lw=1.2)
        ax.axvline(math.degrees(gt), color="red", ls="--", lw=1,
                   label="ground truth")
        ax.set_xlabel(f"{name} [deg]")
        ax.set_ylabel("negative log-likelihood")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_trace_figure(trace: Sequence[dict], path: str | os.PathLike) -> None:
    """Training loss components against the epoch counter."""
    epochs = [row["epoch"] for row in trace]
    fig, (ax_total, ax_parts) = plt.subplots(1, 2, figsize=(10, 4))
    ax_total.plot(epochs, [row["total"] for row in trace], lw=1.2)
    ax_total.set_xlabel("epoch")
    ax_total.set_ylabel("total loss")
    for key in ("l_ml", "l_feat", "l_back"):
        ax_parts.plot(epochs, [row[key] for row in trace], lw=1.0, label=key)
    ax_parts.set_xlabel("epoch")
    ax_parts.set_ylabel("loss component")
    ax_parts.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)
