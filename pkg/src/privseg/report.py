"""Rendering of run artifacts: loss curves, report figures, overlays, tables.

Everything here is presentation only; numbers come from metrics/trainer. All
figures are written as PNG files via the non-interactive Agg backend.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import AggregateReport
from .trainer import PHASE_INNER, PHASE_OUTER, PHASE_PREDICTOR, PHASE_TRANSLATOR

# (phase, column index into history rows, plot label)
_SERIES = (
    (PHASE_TRANSLATOR, 3, "translator pretrain (noise MSE)"),
    (PHASE_PREDICTOR, 5, "predictor pretrain (Dice loss)"),
    (PHASE_INNER, 2, "meta inner (combined loss)"),
    (PHASE_OUTER, 5, "meta outer (Dice loss)"),
)


def save_loss_curves(history: list[list], path: Path | str) -> None:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for phase, col, label in _SERIES:
        steps = [row[0] for row in history if row[1] == phase]
        values = [row[col] for row in history if row[1] == phase]
        if steps:
            ax.plot(steps, values, label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Training losses by phase")
    if ax.has_data():
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_report_figure(report: AggregateReport, path: Path | str) -> None:
    """Per-case DSC distribution next to the aggregate summary bars."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    dscs = [c.dsc for c in report.per_case]
    ax1.hist(dscs, bins=20, range=(0.0, 1.0), color="tab:blue", alpha=0.8)
    ax1.set_xlabel("per-case DSC")
    ax1.set_ylabel("cases")
    ax1.set_title(f"DSC {report.dsc_mean:.4f} ({report.dsc_std:.4f})")

    labels, values = ["DSC"], [report.dsc_mean]
    if report.lesion_recall is not None:
        labels.append("lesion recall")
        values.append(report.lesion_recall)
    if report.lesion_precision is not None:
        labels.append("lesion precision")
        values.append(report.lesion_precision)
    ax2.bar(labels, values, color=["tab:blue", "tab:green", "tab:orange"][: len(labels)])
    ax2.set_ylim(0, 1)
    hd_text = (
        f"HD95 {report.hd95_mean:.2f} ({report.hd95_std:.2f}) mm, "
        f"{report.hd95_undefined_count} undefined"
        if report.hd95_mean is not None
        else f"HD95 undefined in all {report.hd95_undefined_count} cases"
    )
    ax2.set_title(hd_text, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_overlay(
    source: np.ndarray,
    synthetic: np.ndarray,
    path: Path | str,
    real_target: np.ndarray | None = None,
) -> None:
    """Side-by-side grayscale panels: source | synthetic | real (when present)."""
    panels = [("source", source), ("synthetic", synthetic)]
    if real_target is not None:
        panels.append(("real target", real_target))
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.2))
    for ax, (title, img) in zip(np.atleast_1d(axes), panels):
        ax.imshow(img, cmap="gray", vmin=-1.0, vmax=1.0)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_per_case_csv(report: AggregateReport, path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "dsc", "hd95", "n_gt_lesions", "n_detected_gt", "n_pred_lesions", "n_tp_pred"]
        )
        for c in report.per_case:
            writer.writerow(
                [
                    c.id,
                    repr(c.dsc),
                    "" if c.hd95 is None else repr(c.hd95),
                    c.n_gt_lesions,
                    c.n_detected_gt,
                    c.n_pred_lesions,
                    c.n_tp_pred,
                ]
            )


def _fmt(value: float | None, digits: int = 4) -> str:
    return "undef" if value is None else f"{value:.{digits}f}"


def format_table(rows: dict[str, AggregateReport]) -> str:
    """Plain-text summary table, one row per named run."""
    header = f"{'run':<16} {'DSC':>15} {'HD95':>15} {'Rec*GT':>8} {'Prec*Pd':>8}"
    lines = [header, "-" * len(header)]
    for name, rep in rows.items():
        dsc_cell = f"{rep.dsc_mean:.4f} ({rep.dsc_std:.4f})"
        if rep.hd95_mean is None:
            hd_cell = "undef"
        else:
            hd_cell = f"{rep.hd95_mean:.2f} ({rep.hd95_std:.2f})"
        lines.append(
            f"{name:<16} {dsc_cell:>15} {hd_cell:>15} "
            f"{_fmt(rep.lesion_recall):>8} {_fmt(rep.lesion_precision):>8}"
        )
    return "\n".join(lines)
