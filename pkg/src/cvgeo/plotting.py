"""SVG figures for run reports.

All figures go through ``save_svg``, which pins the SVG id salt and drops the
date stamp so reruns produce byte-identical files.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "cvgeo",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.2),
}


def _figure(**kw):
    with matplotlib.rc_context(STYLE):
        return plt.subplots(**kw)


def save_svg(fig, path):
    with matplotlib.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def convergence(report, path):
    """Loss and validation recall per epoch; warmup epochs shaded."""
    epochs = [r.epoch for r in report.epochs]
    fig, ax = _figure()
    ax.plot(epochs, [r.loss for r in report.epochs], color="k", lw=1.2, label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    warm = [r.epoch for r in report.epochs if r.loss_kind == "weighted_soft"]
    if warm:
        ax.axvspan(min(warm) - 0.5, max(warm) + 0.5, color="0.92", lw=0)
    rec = [r.recall1 for r in report.epochs]
    if any(v is not None for v in rec):
        ax2 = ax.twinx()
        ax2.plot(epochs, rec, color="tab:blue", lw=1.2, label="val top-1")
        ax2.plot(epochs, [r.recall_top1pct for r in report.epochs], color="tab:blue",
                 ls="--", lw=1.0, label="val top-1%")
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("recall")
        ax2.legend(loc="center right", frameon=False)
    return save_svg(fig, path)


def similarity_distributions(s_p, s_n, path, bins=50):
    fig, ax = _figure()
    edges = np.linspace(-1.0, 1.0, bins + 1)
    ax.hist(s_n, edges, density=True, color="tab:red", alpha=0.55, label="negative pairs")
    ax.hist(s_p, edges, density=True, color="tab:green", alpha=0.55, label="positive pairs")
    ax.set_xlabel("cosine similarity")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    return save_svg(fig, path)


def recall_curve(rows, path, n_refs=None):
    k, r = np.asarray(rows, dtype=float).T
    fig, ax = _figure()
    ax.step(k, r, where="post", color="k", lw=1.2)
    if n_refs:
        ax.axvline(max(1, int(np.ceil(n_refs / 100))), color="0.6", ls=":", lw=1)
    ax.set_xscale("log")
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("k")
    ax.set_ylabel("recall@k")
    return save_svg(fig, path)


def error_histogram(dists, path):
    """Percentage of orientation errors per bin, one bar series per method."""
    fig, ax = _figure(figsize=(6.0, 3.2))
    names = list(dists)
    edges = dists[names[0]].edges
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = np.diff(edges)[0] / max(1, len(names))
    for i, name in enumerate(names):
        d = dists[name]
        pct = 100.0 * d.counts / max(1, d.errors.size)
        ax.bar(centers - np.diff(edges)[0] / 2 + (i + 0.5) * width, pct, width, label=name)
    ax.set_xlim(-180, 180)
    ax.set_xticks(np.arange(-180, 181, 45))
    ax.set_xlabel("orientation error (degrees)")
    ax.set_ylabel("percent")
    if len(names) > 1:
        ax.legend(frameon=False)
    return save_svg(fig, path)


def alignment_matrix(table, path):
    """2x2 top-1 matrix: rows are training regimes, columns validation sets."""
    rows = sorted(table)
    cols = sorted({c for r in rows for c in table[r]})
    vals = np.array([[table[r][c] for c in cols] for r in rows])
    fig, ax = _figure(figsize=(3.6, 3.0))
    ax.imshow(vals, vmin=0, vmax=1, cmap="Greys")
    for i in range(len(rows)):
        for j in range(len(cols)):
            ax.text(j, i, f"{100 * vals[i, j]:.1f}%", ha="center", va="center",
                    color="w" if vals[i, j] > 0.5 else "k")
    ax.set_xticks(range(len(cols)), [f"val {c}" for c in cols])
    ax.set_yticks(range(len(rows)), [f"train {r}" for r in rows])
    return save_svg(fig, path)


def activation_map(values, path, title=None):
    fig, ax = _figure(figsize=(4.0, 3.0))
    im = ax.imshow(values, cmap="inferno", interpolation="nearest",
                   aspect="auto" if values.shape[1] > 2 * values.shape[0] else "equal")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    return save_svg(fig, path)


def correlation_signal(signal, path, truth=None):
    B = len(signal)
    phis = np.arange(B) * 360.0 / B
    fig, ax = _figure()
    ax.plot(phis, signal, color="k", lw=1.0)
    if truth is not None:
        ax.axvline(truth, color="tab:red", ls="--", lw=1)
    ax.set_xlabel("relative rotation (degrees)")
    ax.set_ylabel("correlation")
    return save_svg(fig, path)
