"""Report figures rendered to PNG files (Agg backend, no display)."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .box_geometry import SIDE_NAMES  # noqa: E402

COLORS = ("#3969b1", "#cc2529", "#3e9651", "#da7c30", "#535154", "#6b4c9a")

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.right": False,
    "axes.spines.top": False,
    "figure.figsize": (6.0, 3.6),
    "svg.hashsalt": "sideaware",
}
DPI = 100


def _png_bytes(fig) -> bytes:
    # no Software/date metadata so identical figures give identical bytes
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def _column(rows, key):
    return np.array([float(r[key]) for r in rows if r.get(key, "") != ""])


def loss_curves(rows, x_key: str, y_keys, title: str, ylabel="loss", log_y=True) -> bytes:
    """Line plot of ``y_keys`` against ``x_key`` from report rows (dicts)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = _column(rows, x_key)
        for color, key in zip(COLORS, y_keys):
            y = _column(rows, key)
            if len(y) == len(x) and len(y):
                ax.plot(x, y, color=color, lw=1.4, label=key.replace("_", " "))
        if log_y and all(np.all(_column(rows, k) > 0) for k in y_keys if len(_column(rows, k))):
            ax.set_yscale("log")
        ax.set_xlabel(x_key)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _png_bytes(fig)


def pseudo_label_panel(rows) -> bytes:
    """Pseudo-label counts (bars) and mean side quality (line) per checkpoint."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = _column(rows, "iteration")
        n_pl = _column(rows, "pseudo_labels")
        n_det = _column(rows, "teacher_detections")
        width = 0.8 * (np.min(np.diff(x)) if len(x) > 1 else max(x[0] if len(x) else 1.0, 1.0))
        ax.bar(x, n_det, width=width, color="#d0d0d0", label="teacher detections")
        ax.bar(x, n_pl, width=width * 0.6, color=COLORS[0], label="pseudo-labels")
        ax.set_xlabel("iteration")
        ax.set_ylabel("count per checkpoint window")
        ax2 = ax.twinx()
        ax2.plot(x, _column(rows, "mean_side_quality"), color=COLORS[1], marker="o", lw=1.4,
                 label="mean side quality")
        ax2.set_ylim(0.0, 1.0)
        ax2.set_ylabel("mean side quality")
        ax2.spines["right"].set_visible(True)
        handles = ax.get_legend_handles_labels()
        handles2 = ax2.get_legend_handles_labels()
        ax.legend(handles[0] + handles2[0], handles[1] + handles2[1], frameon=False, loc="lower left")
        ax.set_title("pseudo-label selection")
        fig.tight_layout()
        return _png_bytes(fig)


def side_quality_bars(per_class: dict, class_names=None) -> bytes:
    """Good vs bad side counts per class from a side-quality summary."""
    classes = sorted(per_class, key=lambda c: int(c))
    good = np.array([per_class[c]["good"] for c in classes], dtype=float)
    bad = np.array([per_class[c]["bad"] for c in classes], dtype=float)
    labels = [class_names[int(c)] if class_names else str(c) for c in classes]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        idx = np.arange(len(classes))
        ax.bar(idx - 0.2, good, width=0.4, color=COLORS[2], label="good sides")
        ax.bar(idx + 0.2, bad, width=0.4, color=COLORS[1], label="bad sides")
        ax.set_xticks(idx)
        ax.set_xticklabels(labels)
        ax.set_xlabel("class")
        ax.set_ylabel("side count")
        ax.set_title("side quality of matched pseudo-labels")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _png_bytes(fig)


def ap_bars(rows) -> bytes:
    """Per-class AP at every IoU threshold from ApResult rows."""
    thresholds = sorted({r["iou_threshold"] for r in rows})
    classes = [r["class"] for r in rows if r["iou_threshold"] == thresholds[0]] if thresholds else []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        idx = np.arange(len(classes))
        width = 0.8 / max(len(thresholds), 1)
        for k, (color, t) in enumerate(zip(COLORS, thresholds)):
            ap = {r["class"]: float(r["ap"]) for r in rows if r["iou_threshold"] == t}
            ax.bar(idx + (k - (len(thresholds) - 1) / 2) * width, [ap[c] for c in classes],
                   width=width, color=color, label=f"IoU {t}")
        ax.set_xticks(idx)
        ax.set_xticklabels(classes)
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel("class")
        ax.set_ylabel("AP")
        ax.set_title("average precision")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _png_bytes(fig)


def per_side_errors(errors, title="mean face error per side") -> bytes:
    """Bar chart of six per-side values in side order."""
    errors = np.asarray(errors, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(np.arange(6), errors, color=COLORS[0])
        ax.set_xticks(np.arange(6))
        ax.set_xticklabels(SIDE_NAMES)
        ax.set_ylabel("meters")
        ax.set_title(title)
        fig.tight_layout()
        return _png_bytes(fig)
