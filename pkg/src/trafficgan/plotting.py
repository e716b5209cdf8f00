"""Optional PNG figures rendered next to the CSV outputs.

Everything here is derived from data the CLI already writes as CSV; the
figures are a convenience and are only produced when asked for.
"""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def _save(fig, path):
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)


def plot_history(history_rows, path):
    """Losses and discriminator accuracy per epoch. Rows: (epoch, d_loss, g_loss, d_accuracy)."""
    rows = np.asarray(history_rows, dtype=float)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(rows[:, 0], rows[:, 1], label="discriminator")
    ax1.plot(rows[:, 0], rows[:, 2], label="generator")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False)
    ax2.plot(rows[:, 0], rows[:, 3], color="k")
    ax2.axhspan(0.4, 0.7, color="0.9", zorder=0)
    ax2.set_ylim(0, 1)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("held-out D accuracy")
    _save(fig, path)


def plot_record(truth, estimate, mask, m, path, title=""):
    """Truth / estimate heat maps for flow and density, missing entries outlined."""
    truth, estimate, mask = (np.asarray(a, dtype=float) for a in (truth, estimate, mask))
    fig, axes = plt.subplots(2, 2, figsize=(8, 5.5), sharey=True)
    groups = [("flow (veh/h)", slice(0, m + 1)), ("density (veh/km)", slice(m + 1, 2 * m + 1))]
    for row, (label, cols) in enumerate(groups):
        vmin, vmax = truth[:, cols].min(), truth[:, cols].max()
        for col, (name, data) in enumerate((("truth", truth), ("estimate", estimate))):
            ax = axes[row, col]
            im = ax.imshow(data[:, cols], aspect="auto", origin="lower", vmin=vmin, vmax=vmax, cmap="viridis")
            miss = np.argwhere(mask[:, cols] == 0)
            ax.scatter(miss[:, 1], miss[:, 0], s=6, c="w", marker="x", linewidths=0.6)
            ax.set_title(f"{name}: {label}", fontsize=9)
            ax.set_xlabel("location")
            if col == 0:
                ax.set_ylabel("time step")
        fig.colorbar(im, ax=axes[row, :].tolist(), shrink=0.9)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)


def plot_loss_trace(trace, path):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(np.arange(len(trace)), trace, color="k")
    ax.set_xlabel("iteration")
    ax.set_ylabel("best total loss")
    ax.set_yscale("log")
    _save(fig, path)


def plot_ablation(rows, path):
    """Grouped bars of median MSE per variant, one panel per target."""
    targets = sorted({r["target"] for r in rows})
    names = list(dict.fromkeys(r["variant"] for r in rows))
    fig, axes = plt.subplots(1, len(targets), figsize=(4.2 * len(targets), 3.4))
    axes = np.atleast_1d(axes)
    for ax, target in zip(axes, targets):
        vals = [next(r["mse"] for r in rows if r["variant"] == v and r["target"] == target) for v in names]
        ax.bar(range(len(names)), vals, color=["C0"] * 4 + ["0.6"] * (len(names) - 4))
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=40, ha="right", fontsize=8)
        ax.set_title(f"{target}: median MSE", fontsize=9)
    _save(fig, path)
