"""Shared-attention detection and toy-to-eyes gaze-shift events from predicted heatmaps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import cv2
import numpy as np

SHARED_THRESHOLD = 1.8
MAX_GAP_MS = 700
WINDOW = 64
IOU_THRESHOLD = 0.1

TOY, EYES, ELSEWHERE = "toy", "eyes", "elsewhere"
LABELS = (TOY, EYES, ELSEWHERE)


# ---------------------------------------------------------------------------
# shared attention


@dataclass
class SharedAttentionResult:
    aggregate: np.ndarray
    is_shared: bool
    location: Optional[tuple[int, int]]  # (x, y) pixel, only when shared
    max_score: float


def aggregate_shared(heatmaps: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum of every person's heatmap."""
    if len(heatmaps) == 0:
        raise ValueError("aggregate_shared needs at least one heatmap")
    shape = np.shape(heatmaps[0])
    if any(np.shape(h) != shape for h in heatmaps):
        raise ValueError("all heatmaps must share one shape")
    total = np.zeros(shape, dtype=np.float64)
    for h in heatmaps:
        total += h
    return total


def detect_shared(aggregate: np.ndarray, threshold: float = SHARED_THRESHOLD) -> SharedAttentionResult:
    """Shared when the summed map's maximum strictly exceeds ``threshold``."""
    aggregate = np.asarray(aggregate, np.float64)
    idx = int(np.argmax(aggregate))
    max_score = float(aggregate.reshape(-1)[idx])
    shared = max_score > threshold
    loc = None
    if shared:
        row, col = divmod(idx, aggregate.shape[1])
        loc = (col, row)
    return SharedAttentionResult(aggregate, shared, loc, max_score)


def localization_error(result: SharedAttentionResult, center: tuple[float, float]) -> Optional[float]:
    """Pixel distance from the detected location to a ground-truth (x, y); None if not shared."""
    if result.location is None:
        return None
    return math.hypot(result.location[0] - center[0], result.location[1] - center[1])


# ---------------------------------------------------------------------------
# gaze-shift events


@dataclass
class EventStream:
    fps: float
    labels: list[str]
    events: list[tuple[int, int]] = field(default_factory=list)  # (last toy frame, first eyes frame)


def _gap_ok(gap_frames: int, fps, max_gap_ms) -> bool:
    return Fraction(gap_frames * 1000) / Fraction(fps) <= Fraction(max_gap_ms)


def infer_shift_events(labels: Sequence[str], fps: float, max_gap_ms: float = MAX_GAP_MS) -> EventStream:
    """One event per toy run followed, through elsewhere frames only, by an eyes run.

    The gap is the number of intervening elsewhere frames times the frame
    period and must not exceed ``max_gap_ms``.
    """
    if not fps > 0:
        raise ValueError(f"fps must be positive, got {fps}")
    labels = list(labels)
    bad = sorted({lab for lab in labels if lab not in LABELS})
    if bad:
        raise ValueError(f"unknown labels {bad}; expected {LABELS}")
    events = []
    last_toy = None  # last toy frame with only elsewhere frames since
    for i, lab in enumerate(labels):
        if lab == TOY:
            last_toy = i
        elif lab == EYES:
            if last_toy is not None and _gap_ok(i - last_toy - 1, fps, max_gap_ms):
                events.append((last_toy, i))
            last_toy = None
    return EventStream(fps, labels, events)


# ---------------------------------------------------------------------------
# classifier inputs


@dataclass
class FeatureWindows:
    windows: np.ndarray  # (N, window, H, W, C) uint8
    starts: list[int]
    padded: bool


def heatmap_to_gray(heatmap: np.ndarray) -> np.ndarray:
    """[0, 1] heatmap -> uint8 grayscale."""
    return np.clip(np.rint(np.asarray(heatmap, np.float64) * 255.0), 0, 255).astype(np.uint8)


def window_features(frames: np.ndarray, extra: Optional[np.ndarray] = None, window: int = WINDOW,
                    stride: int = WINDOW) -> FeatureWindows:
    """Sliding windows of RGB frames, optionally with a 4th channel.

    ``extra`` is a (T, h, w) stack of heatmaps or head masks in [0, 1];
    it is resized to the frame size when needed. A stream shorter than
    ``window`` yields one zero-padded window with ``padded`` set.
    """
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"frames must be (T, H, W, 3), got {frames.shape}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    t, h, w, _ = frames.shape
    stack = frames.astype(np.uint8, copy=False)
    if extra is not None:
        extra = np.asarray(extra)
        if len(extra) != t:
            raise ValueError(f"{len(extra)} extra maps for {t} frames")
        if extra.shape[1:] != (h, w):
            extra = np.stack([cv2.resize(e.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR) for e in extra])
        stack = np.concatenate([stack, heatmap_to_gray(extra)[..., None]], axis=-1)
    if t < window:
        out = np.zeros((1, window) + stack.shape[1:], dtype=np.uint8)
        out[0, :t] = stack
        return FeatureWindows(out, [0], True)
    starts = list(range(0, t - window + 1, stride))
    return FeatureWindows(np.stack([stack[s:s + window] for s in starts]), starts, False)


# ---------------------------------------------------------------------------
# event scoring


@dataclass
class PRF:
    precision: Optional[float]
    recall: Optional[float]
    matches: list[tuple[int, int]]


def interval_iou(a: tuple[int, int], b: tuple[int, int]) -> float:
    """IoU of two inclusive frame intervals."""
    inter = min(a[1], b[1]) - max(a[0], b[0]) + 1
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0] + 1) + (b[1] - b[0] + 1) - inter
    return inter / union


def event_prf(predicted: Sequence[tuple[int, int]], truth: Sequence[tuple[int, int]],
              iou_threshold: float = IOU_THRESHOLD) -> PRF:
    """Greedy one-to-one matching in time order; undefined ratios are None.

    Predictions are visited by start frame and each takes the qualifying
    (IoU >= threshold) unmatched ground-truth event that ends first.
    """
    used, matches = set(), []
    for i in sorted(range(len(predicted)), key=lambda k: (predicted[k][0], predicted[k][1], k)):
        best = None
        for j, g in enumerate(truth):
            if j in used:
                continue
            iou = interval_iou(predicted[i], g)
            if iou > 0 and iou >= iou_threshold and (best is None or (g[1], g[0], j) < best[0]):
                best = ((g[1], g[0], j), j)
        if best is not None:
            used.add(best[1])
            matches.append((i, best[1]))
    n = len(matches)
    return PRF(n / len(predicted) if predicted else None, n / len(truth) if truth else None, sorted(matches))
