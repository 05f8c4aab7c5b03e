"""Report figures: loss curves and cover/secret/diff image grids."""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import diff_image  # noqa: E402

LINE_KWARGS = dict(linewidth=1.2)
GRID_KWARGS = dict(linestyle="-", color="black", linewidth=0.5, alpha=0.3)


def plot_loss_curves(history, path, title="Training loss", log_scale=True):
    """Total, cover and per-secret loss against epoch."""
    epochs = np.arange(len(history))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [r.total for r in history], label="total", color="black", **LINE_KWARGS)
    ax.plot(epochs, [r.cover_term for r in history], label="cover", **LINE_KWARGS)
    k = history[0].k if history else 0
    for i in range(k):
        ax.plot(epochs, [r.secret_terms[i] for r in history], label=f"secret {i + 1}", **LINE_KWARGS)
    if log_scale and history and min(r.total for r in history) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (sum of squared error per image)")
    ax.set_title(title)
    ax.grid(True, **GRID_KWARGS)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_result_grid(cover, secrets, container, decoded, path, gain=10.0, max_rows=6):
    """One row per sample.

    Columns: cover, each secret, container, each decoded secret, cover diff,
    each secret diff. ``secrets``/``decoded`` are (n, k, H, W, 3).
    """
    n = min(len(cover), max_rows)
    k = secrets.shape[1]
    titles = (["cover"] + [f"secret {i + 1}" for i in range(k)] + ["container"]
              + [f"decoded {i + 1}" for i in range(k)] + ["diff cover"]
              + [f"diff secret {i + 1}" for i in range(k)])
    fig, axes = plt.subplots(n, len(titles), figsize=(1.4 * len(titles), 1.5 * n), squeeze=False)
    for r in range(n):
        cells = ([cover[r]] + [secrets[r, i] for i in range(k)] + [container[r]]
                 + [decoded[r, i] for i in range(k)] + [diff_image(cover[r], container[r], gain)]
                 + [diff_image(secrets[r, i], decoded[r, i], gain) for i in range(k)])
        for c, img in enumerate(cells):
            ax = axes[r, c]
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(titles[c], fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
