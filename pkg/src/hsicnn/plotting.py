"""PNG figures written next to the CSV/text reports.

Everything renders through the Agg backend on an explicit Figure, so no
display is needed and pyplot global state is never touched.
"""
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

STYLE = {
    "figsize": (6.0, 4.0),
    "dpi": 100,
    "fontsize": 9,
}


def _figure(figsize=None):
    fig = Figure(figsize=figsize or STYLE["figsize"], dpi=STYLE["dpi"])
    FigureCanvasAgg(fig)
    return fig


def _tidy(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(labelsize=STYLE["fontsize"])


def _save(fig, path):
    fig.tight_layout()
    # fixed metadata keeps the bytes reproducible
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def plot_training(history, path, title=""):
    """Loss (left axis) and held-out accuracy (right axis, if logged) against iteration."""
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(history.iterations, history.losses, lw=1.0, color="tab:blue", label="loss")
    ax.set_xlabel("iteration", fontsize=STYLE["fontsize"])
    ax.set_ylabel("training loss", fontsize=STYLE["fontsize"])
    _tidy(ax)
    # mark lr drops
    its, lrs = history.iterations, history.lrs
    for it, before, after in zip(its[1:], lrs, lrs[1:]):
        if after < before:
            ax.axvline(it, color="0.7", lw=0.8, ls="--")
    if history.accuracy:
        its = sorted(history.accuracy)
        ax2 = ax.twinx()
        ax2.plot(its, [history.accuracy[i] for i in its], "o-", ms=3, lw=1.0, color="tab:orange", label="accuracy")
        ax2.set_ylabel("held-out accuracy (%)", fontsize=STYLE["fontsize"])
        ax2.set_ylim(0, 100)
        ax2.tick_params(labelsize=STYLE["fontsize"])
    if title:
        ax.set_title(title, fontsize=STYLE["fontsize"] + 1)
    return _save(fig, path)


def plot_confusion(report, path, title=""):
    """Heat map of the row-normalised confusion matrix; undefined rows are hatched."""
    c = len(report.n_test)
    side = max(4.0, 0.45 * c + 1.5)
    fig = _figure((side, side))
    ax = fig.add_subplot(1, 1, 1)
    shown = np.ma.masked_array(report.confusion, mask=np.repeat(~report.defined[:, None], c, axis=1))
    im = ax.imshow(shown, cmap="Blues", vmin=0, vmax=100)
    for i in np.flatnonzero(~report.defined):
        ax.add_patch(_hatch(i, c))
    if c <= 20:
        for i in range(c):
            for j in range(c):
                v = report.confusion[i, j]
                if report.defined[i] and v >= 0.05:
                    ax.text(j, i, f"{v:.1f}", ha="center", va="center", fontsize=6,
                            color="white" if v > 60 else "black")
    ticks = np.arange(c)
    ax.set_xticks(ticks, [str(t + 1) for t in ticks], fontsize=STYLE["fontsize"])
    ax.set_yticks(ticks, [str(t + 1) for t in ticks], fontsize=STYLE["fontsize"])
    ax.set_xlabel("predicted class", fontsize=STYLE["fontsize"])
    ax.set_ylabel("true class", fontsize=STYLE["fontsize"])
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="%")
    ax.set_title(title or f"OA {report.overall_accuracy:.2f} %", fontsize=STYLE["fontsize"] + 1)
    return _save(fig, path)


def _hatch(row, c):
    return Rectangle((-0.5, row - 0.5), c, 1, fill=False, hatch="//", edgecolor="0.6", lw=0)


def plot_sweep(axis, values, means, stds, seconds, path):
    """Mean OA with std error bars per swept value, training time on a second axis."""
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    x = np.arange(len(values))
    ax.errorbar(x, means, yerr=stds, fmt="o-", capsize=3, lw=1.0, color="tab:blue")
    ax.set_xticks(x, [str(v) for v in values], fontsize=STYLE["fontsize"])
    ax.set_xlabel(axis, fontsize=STYLE["fontsize"])
    ax.set_ylabel("overall accuracy (%)", fontsize=STYLE["fontsize"])
    _tidy(ax)
    ax2 = ax.twinx()
    ax2.bar(x, seconds, width=0.4, alpha=0.25, color="tab:gray")
    ax2.set_ylabel("training time (s)", fontsize=STYLE["fontsize"])
    ax2.tick_params(labelsize=STYLE["fontsize"])
    return _save(fig, path)


def plot_partitions(seeds, accuracies, path):
    """Overall accuracy of each partition with the mean as a dashed line."""
    fig = _figure()
    ax = fig.add_subplot(1, 1, 1)
    acc = np.asarray(accuracies, dtype=float)
    ax.bar([str(s) for s in seeds], acc, color="tab:blue", alpha=0.7)
    ax.axhline(acc.mean(), color="k", lw=0.8, ls="--")
    lo = max(0.0, acc.min() - 5.0)
    ax.set_ylim(lo, min(100.0, acc.max() + 2.0) if acc.max() > lo else 100.0)
    ax.set_xlabel("partition seed", fontsize=STYLE["fontsize"])
    ax.set_ylabel("overall accuracy (%)", fontsize=STYLE["fontsize"])
    _tidy(ax)
    return _save(fig, path)


def plot_boundary(report, path):
    """Bar chart of misclassification rate per boundary-distance category."""
    fig = _figure((4.0, 3.0))
    ax = fig.add_subplot(1, 1, 1)
    rows = report.rows()
    pct = [0.0 if np.isnan(p) else p for _, _, _, p in rows]
    ax.bar([r[0] for r in rows], pct, color="tab:red", alpha=0.7)
    ax.set_xlabel("distance to boundary (px)", fontsize=STYLE["fontsize"])
    ax.set_ylabel("error rate (%)", fontsize=STYLE["fontsize"])
    _tidy(ax)
    return _save(fig, path)
