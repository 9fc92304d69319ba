"""Plain-text tables and static plots from a ``report.json``."""

from __future__ import annotations

import logging
import os

log = logging.getLogger(__name__)

COLUMNS = ("accuracy", "sensitivity", "specificity", "auc")


def _fmt(x, width=8):
    return f"{x:.4f}".rjust(width) if isinstance(x, (int, float)) and x is not None else "n/a".rjust(width)


def _pm(agg, key):
    a = agg.get(key) or {}
    if a.get("mean") is None:
        return "n/a".center(17)
    return f"{a['mean']:.4f} ± {a['std']:.4f}"


def cv_table(report: dict) -> str:
    """Fold rows plus a mean±std row, in Accuracy/Sensitivity/Specificity/AUC order."""
    lines = [f"{'Fold':<10}{'N':>5}  {'Accuracy':>17}  {'Sensitivity':>17}  {'Specificity':>17}  {'AUC':>17}"]
    for f in report.get("folds", []):
        m = f.get("metrics", {})
        cells = "  ".join(_fmt(m.get(c), 17) for c in COLUMNS)
        lines.append(f"{f.get('name', '?'):<10}{f.get('n', 0):>5}  {cells}")
    agg = report.get("aggregate", {})
    lines.append("-" * len(lines[0]))
    lines.append(f"{'mean±std':<10}{'':>5}  " + "  ".join(_pm(agg, c).rjust(17) for c in COLUMNS))
    return "\n".join(lines)


def site_table(report: dict) -> str:
    lines = [f"{'Site':<14}{'Subject Count':>14}{'Acc.':>9}{'Sen.':>9}{'Spe.':>9}{'AUC':>9}"]
    for f in report.get("folds", []):
        m = f.get("metrics", {})
        lines.append(f"{f.get('name', '?'):<14}{f.get('n', 0):>14}"
                     + "".join(_fmt(m.get(c), 9) for c in COLUMNS))
    return "\n".join(lines)


def render_summary(report: dict) -> tuple[str, list]:
    """Text summary and a list of warnings about missing pieces."""
    warnings = []
    if not report or not report.get("folds"):
        return "no results\n", ["report contains no folds"]
    for key in ("aggregate", "config"):
        if key not in report:
            warnings.append(f"report lacks '{key}'")
    for f in report["folds"]:
        if "metrics" not in f:
            warnings.append(f"fold {f.get('name', '?')} lacks metrics")
    protocol = report.get("config", {}).get("protocol", "stratified-k")
    title = "Leave-one-site-out results" if protocol == "leave-one-site-out" else "Cross-validation results"
    body = site_table(report) if protocol == "leave-one-site-out" else cv_table(report)
    parts = [title, "positive class: label 1 (ASD)", "", body]
    if protocol == "leave-one-site-out":
        parts += ["", "mean±std over sites: " + ", ".join(
            f"{c} {_pm(report.get('aggregate', {}), c).strip()}" for c in COLUMNS)]
    notes = report.get("warnings", [])
    if notes:
        parts += ["", "notes:"] + [f"  - {w}" for w in notes]
    return "\n".join(parts) + "\n", warnings


def plot_folds(report: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    folds = report.get("folds", [])
    names = [f.get("name", "?") for f in folds]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(names) + 2), 4))
    width = 0.2
    for i, c in enumerate(COLUMNS):
        vals = [(f.get("metrics", {}).get(c) or 0.0) for f in folds]
        ax.bar([j + (i - 1.5) * width for j in range(len(folds))], vals, width, label=c)
    ax.set_xticks(range(len(folds)))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_loss_trace(trace, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r["epoch"] for r in trace]
    for key in ("L_TD", "L_GS", "L_total"):
        ax.plot(epochs, [r[key] for r in trace], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def emit_report(report: dict, out_dir, loss_trace=None, plots: bool = True) -> dict:
    """Write ``summary.txt`` (and PNG plots) into ``out_dir``; returns what was written."""
    os.makedirs(out_dir, exist_ok=True)
    text, warnings = render_summary(report)
    for w in warnings:
        log.warning(w)
    summary = os.path.join(out_dir, "summary.txt")
    with open(summary, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    written = {"summary": summary, "text": text, "warnings": warnings}
    if plots and report and report.get("folds"):
        written["folds_plot"] = os.path.join(out_dir, "folds.png")
        plot_folds(report, written["folds_plot"])
    if plots and loss_trace:
        written["loss_plot"] = os.path.join(out_dir, "loss_trace.png")
        plot_loss_trace(loss_trace, written["loss_plot"])
    return written
