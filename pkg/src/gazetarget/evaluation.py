"""Heatmap AUC, argmax distance, in-frame average precision and inter-rater scores."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import data as gdata

MASK_THRESHOLD = 0.5


def gt_mask(gaze: gdata.Point, hm: int, sigma: float = gdata.DEFAULT_SIGMA,
            threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Positive cells: ground-truth Gaussian at or above ``threshold`` of its peak."""
    return gdata.gt_heatmap(gaze, hm, sigma) >= threshold


def _rank_auc(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """P(score_pos > score_neg) + P(equal) / 2 through average ranks."""
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_heatmap(preds: Sequence[np.ndarray], gts: Sequence[gdata.Point], mask_sigma: float = gdata.DEFAULT_SIGMA,
                mask_threshold: float = MASK_THRESHOLD) -> Optional[float]:
    """Pooled ROC AUC over every cell of every frame; None when a class is missing."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} heatmaps for {len(gts)} gaze points")
    if not preds:
        return None
    scores = np.concatenate([np.asarray(p, np.float64).ravel() for p in preds])
    labels = np.concatenate([gt_mask(g, np.asarray(p).shape[-1], mask_sigma, mask_threshold).ravel()
                             for p, g in zip(preds, gts)])
    return _rank_auc(scores, labels)


def auc_per_frame(preds, gts, mask_sigma: float = gdata.DEFAULT_SIGMA,
                  mask_threshold: float = MASK_THRESHOLD) -> Optional[float]:
    """Mean of per-frame AUCs (frames with an undefined AUC are skipped)."""
    vals = [auc_heatmap([p], [g], mask_sigma, mask_threshold) for p, g in zip(preds, gts)]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def argmax_point(pred: np.ndarray) -> tuple[float, float]:
    """Normalized (x, y) center of the first maximal cell in row-major order."""
    pred = np.asarray(pred)
    h, w = pred.shape
    row, col = divmod(int(np.argmax(pred)), w)
    return (col + 0.5) / w, (row + 0.5) / h


def l2_distance(pred: np.ndarray, gt: gdata.Point) -> float:
    x, y = argmax_point(pred)
    return math.hypot(x - gt[0], y - gt[1])


def out_of_frame_ap(scores: Sequence[float], labels: Sequence[bool]) -> Optional[float]:
    """Average precision with in-frame as the positive class and alpha as its score.

    Ranks by descending score, ties by original order; AP is the mean of the
    precision at each positive's rank. None when only one class is present.
    """
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels, bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        return None
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits].mean())


@dataclass
class EvalReport:
    auc: Optional[float]
    l2_mean: Optional[float]
    out_of_frame_ap: Optional[float]
    n_inframe: int
    n_total: int
    extras: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.4f}"

        return (f"AUC {fmt(self.auc)}  L2 {fmt(self.l2_mean)}  AP {fmt(self.out_of_frame_ap)}  "
                f"({self.n_inframe}/{self.n_total} in-frame)")


def evaluate_predictions(heatmaps: Sequence[np.ndarray], alphas: Sequence[float],
                         anns: Sequence[gdata.FrameAnnotation], sigma: float = gdata.DEFAULT_SIGMA) -> EvalReport:
    if not (len(heatmaps) == len(alphas) == len(anns)):
        raise ValueError("heatmaps, alphas and annotations must align")
    inside = [i for i, a in enumerate(anns) if a.inframe]
    preds = [heatmaps[i] for i in inside]
    gts = [anns[i].gaze for i in inside]
    dists = [l2_distance(p, g) for p, g in zip(preds, gts)]
    return EvalReport(
        auc=auc_heatmap(preds, gts, sigma),
        l2_mean=float(np.mean(dists)) if dists else None,
        out_of_frame_ap=out_of_frame_ap(alphas, [a.inframe for a in anns]),
        n_inframe=len(inside),
        n_total=len(anns),
        extras={"auc_per_frame_mean": auc_per_frame(preds, gts, sigma)},
    )


FRAME_FIELDS = ("clip_id", "person_id", "frame_index", "inframe", "alpha", "pred_x", "pred_y", "l2")


def predict_clips(model, clips: Sequence[gdata.Clip]):
    """Run every track through ``model``; returns (heatmaps, alphas, annotations)."""
    heatmaps, alphas, anns = [], [], []
    for clip in clips:
        for track in clip.tracks:
            frames = [clip.frames[a.frame_index] for a in track.frames]
            preds = model.forward_sequence(frames, [a.bbox for a in track.frames])
            for p, a in zip(preds, track.frames):
                heatmaps.append(p.heatmap)
                alphas.append(p.alpha)
                anns.append(a)
    return heatmaps, alphas, anns


def evaluate_model(model, clips: Sequence[gdata.Clip], sigma: float = gdata.DEFAULT_SIGMA):
    """EvalReport plus one row per annotated frame."""
    heatmaps, alphas, anns = predict_clips(model, clips)
    rows = []
    for hm, alpha, a in zip(heatmaps, alphas, anns):
        x, y = argmax_point(hm)
        rows.append({
            "clip_id": a.clip_id, "person_id": a.person_id, "frame_index": a.frame_index,
            "inframe": a.inframe, "alpha": alpha, "pred_x": x, "pred_y": y,
            "l2": l2_distance(hm, a.gaze) if a.inframe else None,
        })
    return evaluate_predictions(heatmaps, alphas, anns, sigma), rows


def annotator_heatmap(ann: gdata.FrameAnnotation, hm: int, sigma: float = gdata.DEFAULT_SIGMA) -> np.ndarray:
    """An annotator's point as a prediction: the ground-truth Gaussian there, empty when out of frame.

    A bare one-hot cell would tie with every negative cell and cap the AUC
    of two identical annotators near 0.5.
    """
    return gdata.gt_heatmap(ann.gaze, hm, sigma) if ann.inframe else np.zeros((hm, hm))


def inter_rater(annotators: Sequence[Sequence[gdata.FrameAnnotation]], hm: int = 64,
                sigma: float = gdata.DEFAULT_SIGMA) -> EvalReport:
    """Average the three metrics over ordered annotator pairs (prediction, reference).

    Distances use only frames both annotators mark in-frame.
    """
    if len(annotators) < 2:
        raise ValueError("inter-rater scoring needs at least two annotators")
    n = len(annotators[0])
    if any(len(a) != n for a in annotators):
        raise ValueError("annotators must label the same frames")
    aucs, l2s, aps = [], [], []
    for pi, ri in itertools.permutations(range(len(annotators)), 2):
        pred, ref = annotators[pi], annotators[ri]
        inside = [i for i in range(n) if ref[i].inframe]
        auc = auc_heatmap([annotator_heatmap(pred[i], hm, sigma) for i in inside], [ref[i].gaze for i in inside], sigma)
        both = [i for i in inside if pred[i].inframe]
        ap = out_of_frame_ap([1.0 if p.inframe else 0.0 for p in pred], [r.inframe for r in ref])
        if auc is not None:
            aucs.append(auc)
        if both:
            l2s.append(float(np.mean([math.hypot(pred[i].gaze[0] - ref[i].gaze[0], pred[i].gaze[1] - ref[i].gaze[1])
                                      for i in both])))
        if ap is not None:
            aps.append(ap)

    def avg(v):
        return float(np.mean(v)) if v else None

    ref = annotators[0]
    return EvalReport(avg(aucs), avg(l2s), avg(aps), sum(a.inframe for a in ref), n,
                      {"pairs": len(annotators) * (len(annotators) - 1)})
