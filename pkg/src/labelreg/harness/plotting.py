"""Report figures. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}

# one fixed colour per ablation mode so figures are comparable
MODE_COLORS = {"none": "0.45", "frozen": "tab:blue", "unfrozen": "tab:orange", "random_init": "tab:red"}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_lambda_sweep(summary, path: str | Path, title: str = "aux loss weight sweep") -> Path:
    """Mean +/- std validation mIoU against lambda; lambda = 0 is the baseline."""
    lam = np.array([r[0] for r in summary], dtype=float)
    mean = np.array([r[1] for r in summary])
    std = np.array([r[2] for r in summary])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(lam))
        ax.errorbar(x, mean, yerr=std, marker="o", capsize=3, color="tab:blue")
        if 0.0 in lam:
            base = mean[lam == 0.0][0]
            ax.axhline(base, color="0.45", ls="--", lw=1, label="lambda = 0")
            ax.legend(loc="lower right")
        ax.set_xticks(x, [f"{v:g}" for v in lam])
        ax.set_xlabel("lambda")
        ax.set_ylabel("val mIoU")
        ax.set_title(title)
        return _save(fig, path)


def plot_ablation(summary, rows, path: str | Path) -> Path:
    """Bar per decoder mode (mean val mIoU), dots for individual seeds."""
    modes = [r[0] for r in summary]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, row in enumerate(summary):
            mode, mean, std = row[0], row[1], row[2]
            ax.bar(i, mean, yerr=std, color=MODE_COLORS.get(mode, "tab:gray"), alpha=0.75, capsize=3)
            pts = [r[2] for r in rows if r[0] == mode]
            ax.plot(np.full(len(pts), i) + np.linspace(-0.15, 0.15, len(pts)), pts, "k.", ms=4)
        lo = min(r[2] for r in rows)
        hi = max(r[2] for r in rows)
        pad = max(0.02, 0.2 * (hi - lo))
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_xticks(range(len(modes)), modes)
        ax.set_ylabel("val mIoU")
        ax.set_title("decoder ablation")
        return _save(fig, path)


def plot_training_curves(history, path: str | Path) -> Path:
    """Primary/aux loss per epoch and train/val mIoU."""
    train = [m for m in history if m.split == "train"]
    val = [m for m in history if m.split == "val"]
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        a.plot([m.epoch for m in train], [m.primary_loss for m in train], label="primary")
        if any(m.aux_loss is not None for m in train):
            a.plot([m.epoch for m in train], [m.aux_loss for m in train], label="aux")
        a.set_xlabel("epoch")
        a.set_ylabel("loss")
        a.legend()
        b.plot([m.epoch for m in train], [m.miou for m in train], label="train")
        if val:
            b.plot([m.epoch for m in val], [m.miou for m in val], "o-", label="val")
        b.set_xlabel("epoch")
        b.set_ylabel("mIoU")
        b.legend()
        return _save(fig, path)


def plot_neighbors(pairs, labels_q, labels_db, grid, path: str | Path, max_rows: int = 6) -> Path:
    """Query footprints (left) next to their top-1 neighbours (right)."""
    n, h, w = labels_q.shape
    gh, gw = grid
    ch, cw = h // gh, w // gw
    pairs = pairs[:max_rows]
    cmap = plt.get_cmap("tab10")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(pairs), 2, figsize=(3.2, 1.5 * len(pairs)), squeeze=False)
        for row, (q, m) in enumerate(pairs):
            for col, (feat, labels) in enumerate(((q, labels_q), (m.feature, labels_db))):
                i, j = feat.cell
                patch = labels[feat.sample, i * ch:(i + 1) * ch, j * cw:(j + 1) * cw].astype(float)
                patch[patch == 255] = np.nan
                ax = axes[row, col]
                ax.imshow(patch, cmap=cmap, vmin=0, vmax=9, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                ax.grid(False)
                ax.set_title(f"s{feat.sample} {feat.cell} k={feat.dominant}", fontsize=7)
        return _save(fig, path)
