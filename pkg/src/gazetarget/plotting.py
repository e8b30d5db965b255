"""Figures written to files: loss curves, pooled ROC, heatmap overlays, event timelines."""

from __future__ import annotations

import os
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import data as gdata  # noqa: E402
from .evaluation import argmax_point, gt_mask  # noqa: E402


def _save(fig, path) -> str:
    path = os.fspath(path)
    fig.savefig(path, dpi=100, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(rows: Sequence[dict], path, smooth: int = 20) -> str:
    """Total and component losses against step; ``rows`` as produced by training."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(rows) + 1)
    for key, label in (("loss", "total"), ("L_h", "heatmap x w_h"), ("L_f", "in-frame")):
        vals = np.array([float(r[key]) for r in rows])
        if key == "L_h":
            vals = vals * 100.0
        if smooth > 1 and len(vals) >= smooth:
            vals = np.convolve(vals, np.ones(smooth) / smooth, mode="valid")
            xs = steps[smooth - 1:]
        else:
            xs = steps
        ax.plot(xs, vals, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def roc_points(preds: Sequence[np.ndarray], gts: Sequence[gdata.Point], sigma: float = gdata.DEFAULT_SIGMA):
    """(fpr, tpr) of the pooled cell-level ROC, one point per distinct score."""
    scores = np.concatenate([np.ravel(p) for p in preds]).astype(np.float64)
    labels = np.concatenate([gt_mask(g, np.shape(p)[-1], sigma).ravel() for p, g in zip(preds, gts)])
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp, fp = np.cumsum(y), np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tp[last] / max(y.sum(), 1)]
    fpr = np.r_[0.0, fp[last] / max((~y).sum(), 1)]
    return fpr, tpr


def roc_curve(preds, gts, path, auc: Optional[float] = None) -> str:
    fpr, tpr = roc_points(preds, gts)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, label="pooled" if auc is None else f"pooled AUC {auc:.3f}")
    ax.plot([0, 1], [0, 1], "--", color="grey", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    return _save(fig, path)


def heatmap_overlay(frame: np.ndarray, heatmap: np.ndarray, path, gt: Optional[gdata.Point] = None,
                    bbox: Optional[gdata.BBox] = None, alpha: Optional[float] = None) -> str:
    """Frame with the heatmap blended on top, the argmax (x) and ground truth (o)."""
    h, w = frame.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(frame)
    ax.imshow(heatmap, cmap="jet", alpha=0.45, extent=(0, w, h, 0), vmin=0, vmax=1)
    px, py = argmax_point(heatmap)
    ax.plot(px * w, py * h, "wx", ms=10, mew=2)
    if gt is not None:
        ax.plot(gt[0] * w, gt[1] * h, "o", mfc="none", mec="lime", ms=10, mew=2)
    if bbox is not None:
        x0, y0, x1, y1 = bbox
        ax.add_patch(plt.Rectangle((x0 * w, y0 * h), (x1 - x0) * w, (y1 - y0) * h, fill=False, ec="yellow"))
    if alpha is not None:
        ax.set_title(f"alpha {alpha:.2f}")
    ax.set_axis_off()
    return _save(fig, path)


def event_timeline(labels: Sequence[str], events: Sequence[tuple[int, int]], path,
                   truth: Sequence[tuple[int, int]] = ()) -> str:
    colors = {"toy": "tab:orange", "eyes": "tab:blue", "elsewhere": "lightgrey"}
    fig, ax = plt.subplots(figsize=(8, 1.8))
    for i, lab in enumerate(labels):
        ax.axvspan(i, i + 1, ymin=0.5, ymax=1.0, color=colors.get(lab, "white"), lw=0)
    for s, e in events:
        ax.axvspan(s, e + 1, ymin=0.25, ymax=0.45, color="tab:red", lw=0)
    for s, e in truth:
        ax.axvspan(s, e + 1, ymin=0.0, ymax=0.2, color="tab:green", lw=0)
    ax.set_xlim(0, max(len(labels), 1))
    ax.set_yticks([0.1, 0.35, 0.75], ["truth", "inferred", "labels"])
    ax.set_xlabel("frame")
    return _save(fig, path)
