"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _figure(width=3.4, height=None):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    plt.rcParams.update(RC)
    return plt.subplots(figsize=(width, height or width * golden))


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_curves(report, prefix) -> list[Path]:
    """ROC and OSCR step curves as ``<prefix>_roc.png`` and ``<prefix>_oscr.png``."""
    out = []
    if report.roc is not None:
        fig, ax = _figure()
        fpr, tpr = report.roc
        ax.plot(fpr, tpr, lw=1.2, label=f"AUROC {report.auroc:.3f}")
        ax.plot([0, 1], [0, 1], ls=":", lw=0.8, color="0.5")
        ax.set_xlabel("false positive rate (unknowns)")
        ax.set_ylabel("true positive rate (knowns)")
        ax.legend(loc="lower right", frameon=False)
        out.append(_save(fig, f"{prefix}_roc.png"))
    if report.oscr_points is not None:
        fig, ax = _figure()
        fpr, ccr = report.oscr_points
        ax.step(fpr, ccr, where="post", lw=1.2, label=f"OSCR {report.oscr:.3f}")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("correct classification rate")
        ax.legend(loc="lower right", frameon=False)
        out.append(_save(fig, f"{prefix}_oscr.png"))
    return out


def plot_training(log_rows: list[dict], path) -> Path:
    fig, ax = _figure()
    epochs = [r["epoch"] for r in log_rows]
    ax.plot(epochs, [r["loss"] for r in log_rows], marker="o", ms=3, lw=1.2, label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    twin = ax.twinx()
    twin.plot(epochs, [r["train_acc"] for r in log_rows], color="C1", marker="s", ms=3, lw=1.0,
              label="train acc")
    twin.set_ylim(0, 1.02)
    twin.set_ylabel("train accuracy")
    return _save(fig, path)


def plot_mask(mask: np.ndarray, path, title: str = "") -> Path:
    """Heat map of a centred mask with its central row profile underneath."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(3.2, 4.4), gridspec_kw={"height_ratios": [3, 1]})
    plt.rcParams.update(RC)
    im = top.imshow(mask, cmap="magma", vmin=0, vmax=1, interpolation="nearest")
    fig.colorbar(im, ax=top, fraction=0.046, pad=0.04)
    top.set_title(title)
    top.set_xticks([])
    top.set_yticks([])
    row = mask[mask.shape[0] // 2]
    bottom.plot(np.arange(len(row)) - len(row) // 2, row, lw=1.2)
    bottom.set_ylim(0, 1.05)
    bottom.set_xlabel("frequency bin (centre row)")
    return _save(fig, path)
