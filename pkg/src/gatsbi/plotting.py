"""Matplotlib figures written next to the CSVs: curves, frame strips and ablation bars."""
from __future__ import annotations

from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .core import PathLike  # noqa: E402


def _image(t: torch.Tensor) -> np.ndarray:
    """``[C, H, W]`` or ``[H, W]`` tensor -> array for ``imshow``."""
    a = t.detach().float().clamp(0, 1).cpu().numpy()
    if a.ndim == 3:
        a = a[0] if a.shape[0] == 1 else a.transpose(1, 2, 0)
    return a


def save_loss_curves(rows: Sequence[Dict], path: PathLike, window: int = 50) -> None:
    steps = np.array([int(r["step"]) for r in rows])
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for key in ("total", "keypoint", "mixture", "objects"):
        v = np.array([float(r[key]) for r in rows])
        if np.any(v != 0):
            # inactive terms are logged as exactly 0; leave those stretches blank
            axes[0].plot(steps, np.where(v == 0, np.nan, v), label=key, lw=0.8)
    # totals turn negative once the Gaussian likelihood fits well
    axes[0].set_yscale("symlog", linthresh=1.0)
    axes[0].set_xlabel("step")
    axes[0].set_title("loss terms")
    axes[0].legend(fontsize=8)
    mse = np.array([float(r["recon_mse"]) for r in rows])
    axes[1].plot(steps, mse, lw=0.5, alpha=0.4, label="per step")
    if len(mse) >= window:
        ma = np.convolve(mse, np.ones(window) / window, mode="valid")
        axes[1].plot(steps[window - 1:], ma, label=f"{window}-step mean")
    axes[1].set_xlabel("step")
    axes[1].set_title("conditioning-frame reconstruction MSE")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metric_curves(rows: Sequence[Dict], path: PathLike, n_cond: Optional[int] = None) -> None:
    metrics = sorted({r["metric"] for r in rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.6 * len(metrics), 3.2), squeeze=False)
    for ax, m in zip(axes[0], metrics):
        sel = sorted((r for r in rows if r["metric"] == m), key=lambda r: int(r["step_index"]))
        x = np.array([int(r["step_index"]) for r in sel])
        mean = np.array([float(r["mean"]) for r in sel])
        lo = np.array([float(r["ci95_low"]) for r in sel])
        hi = np.array([float(r["ci95_high"]) for r in sel])
        ax.plot(x, mean)
        ax.fill_between(x, lo, hi, alpha=0.25)
        if n_cond is not None:
            ax.axvline(n_cond - 0.5, color="gray", ls="--", lw=0.8)
        ax.set_title(m)
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_rollout_strip(truth: Optional[torch.Tensor], pred: torch.Tensor, path: PathLike,
                       exports: Optional[Sequence[Dict[str, torch.Tensor]]] = None,
                       n_cond: Optional[int] = None) -> None:
    """Rows: ground truth (where available), prediction, then per-mode masks and alpha."""
    T = pred.shape[0]
    rows = []
    if truth is not None:
        rows.append(("truth", [truth[t] if t < truth.shape[0] else None for t in range(T)]))
    rows.append(("prediction", [pred[t] for t in range(T)]))
    if exports:
        K = exports[0]["masks"].shape[0]
        for k in range(K):
            rows.append((f"mask {k}", [e["masks"][k] for e in exports]))
        if "alpha" in exports[0]:
            rows.append(("alpha", [e["alpha"] for e in exports]))
    fig, axes = plt.subplots(len(rows), T, figsize=(1.1 * T, 1.15 * len(rows)), squeeze=False)
    for i, (label, imgs) in enumerate(rows):
        for t, img in enumerate(imgs):
            ax = axes[i][t]
            ax.set_xticks([])
            ax.set_yticks([])
            if img is not None:
                ax.imshow(_image(img), cmap="gray", vmin=0, vmax=1)
            if t == 0:
                ax.set_ylabel(label, fontsize=7)
            if i == 0:
                tag = "" if n_cond is None else ("c" if t < n_cond else "p")
                ax.set_title(f"{t}{tag}", fontsize=7)
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_ablation_bars(rows: Sequence[Dict], path: PathLike,
                       columns=("psnr", "mse", "pixel_error")) -> None:
    labels = [f"{r['inter_mode']}/{r['graph']}" for r in rows]
    fig, axes = plt.subplots(1, len(columns), figsize=(4 * len(columns), 3.2), squeeze=False)
    for ax, col in zip(axes[0], columns):
        ax.bar(range(len(rows)), [float(r[col]) for r in rows])
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_title(col)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
