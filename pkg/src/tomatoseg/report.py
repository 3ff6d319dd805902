"""Report rendering: text tables, key=value blocks, and figure files.

Every report path emits the delimited/text form next to a rendered PNG so
runs can be skimmed visually and parsed mechanically.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsReport


def _fmt(v) -> str:
    if v is None:
        return "absent"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def metrics_kv(report: MetricsReport) -> str:
    """Machine-readable block: miou, mdc, iou.<classname>, map, auc."""
    lines = [f"miou={_fmt(report.miou)}", f"mdc={_fmt(report.mdc)}"]
    for c in sorted(report.iou):
        name = report.class_names.get(c, str(c))
        lines.append(f"iou.{name}={_fmt(report.iou[c])}")
    lines.append(f"map={_fmt(report.map)}")
    lines.append(f"auc={_fmt(report.auc)}")
    return "\n".join(lines) + "\n"


def metrics_text(report: MetricsReport) -> str:
    names = report.class_names
    lines = ["metric              value", "-" * 32]
    lines.append(f"{'mean IoU':<18} {_fmt(report.miou):>10}")
    lines.append(f"{'mean Dice':<18} {_fmt(report.mdc):>10}")
    lines.append(f"{'mAP':<18} {_fmt(report.map):>10}")
    lines.append(f"{'AUC':<18} {_fmt(report.auc):>10}")
    lines.append("")
    lines.append(f"{'class':<16} {'IoU':>8} {'Dice':>8} {'AP':>8} {'AUC':>8}")
    for c in sorted(report.iou):
        lines.append(
            f"{names.get(c, str(c)):<16} {_fmt(report.iou[c]):>8} {_fmt(report.dice[c]):>8} "
            f"{_fmt(report.ap.get(c)):>8} {_fmt(report.auc_per_class.get(c)):>8}"
        )
    if report.absent_classes:
        absent = ", ".join(names.get(c, str(c)) for c in report.absent_classes)
        lines.append("")
        lines.append(f"absent from ground truth (excluded from means): {absent}")
    lines.append("")
    lines.append("pixel confusion (rows = truth, cols = prediction):")
    header = " " * 16 + "".join(f"{names.get(c, str(c))[:12]:>14}" for c in range(report.confusion.shape[0]))
    lines.append(header)
    for r in range(report.confusion.shape[0]):
        row = "".join(f"{int(v):>14}" for v in report.confusion[r])
        lines.append(f"{names.get(r, str(r))[:14]:<16}{row}")
    return "\n".join(lines) + "\n"


def render_metrics_png(report: MetricsReport, path) -> None:
    names = report.class_names
    classes = sorted(report.iou)
    labels = [names.get(c, str(c)) for c in classes]
    series = {
        "IoU": [report.iou[c] if report.iou[c] is not None else 0.0 for c in classes],
        "Dice": [report.dice[c] if report.dice[c] is not None else 0.0 for c in classes],
        "AP": [
            report.ap.get(c) if report.ap.get(c) is not None else 0.0 for c in classes
        ],
    }
    x = np.arange(len(classes))
    width = 0.26
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for k, (label, vals) in enumerate(series.items()):
        ax.bar(x + (k - 1) * width, vals, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=15)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(f"classwise scores (mIoU {_fmt(report.miou)}, mDC {_fmt(report.mdc)})")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_curves_png(records, path) -> None:
    """Loss and accuracy curves over epochs (one panel each)."""
    epochs = [r.epoch for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    ax1.plot(epochs, [r.train_loss for r in records], label="train")
    if any(not math.isnan(r.val_loss) for r in records):
        ax1.plot(epochs, [r.val_loss for r in records], label="validation")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_title("loss")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    if any(not math.isnan(r.val_miou) for r in records):
        ax2.plot(epochs, [r.val_miou for r in records], color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation mean IoU")
    ax2.set_ylim(0, 1.05)
    ax2.set_title("accuracy")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


SWEEP_COLUMNS = {
    "beta": ("beta1", "beta2"),
    "tau": ("tau",),
    "loss": ("loss_kind",),
    "transformer": ("use_transformer",),
}


def sweep_tsv(rows: list, kind: str) -> str:
    setting_cols = SWEEP_COLUMNS[kind]
    cols = list(setting_cols) + ["miou", "mdc", "map", "auc", "status"]
    lines = ["\t".join(cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row.get(c)
            if isinstance(v, bool):
                cells.append("with" if v else "without")
            elif isinstance(v, float):
                cells.append("nan" if math.isnan(v) else f"{v:.4f}")
            else:
                cells.append(str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def render_sweep_png(rows: list, kind: str, path) -> None:
    setting_cols = SWEEP_COLUMNS[kind]
    labels = []
    for row in rows:
        vals = []
        for c in setting_cols:
            v = row[c]
            if isinstance(v, bool):
                vals.append("with" if v else "without")
            else:
                vals.append(str(v))
        labels.append("/".join(vals))
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    x = np.arange(len(rows))
    for metric in ("miou", "mdc", "map", "auc"):
        ys = [row.get(metric, float("nan")) for row in rows]
        ax.plot(x, ys, marker="o", label=metric)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20)
    ax.set_xlabel(kind)
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.05)
    ax.set_title(f"{kind} sweep")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_text(path, text: str) -> None:
    Path(path).write_text(text)
