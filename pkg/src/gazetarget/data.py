"""Annotation schema, ground-truth heatmaps, preprocessing and augmentation.

Annotations live in one JSON document per clip::

    {"clip_id": "c0001", "tracks": [
      {"person_id": "p0", "frames": [
        {"clip_id": "c0001", "frame_index": 0, "person_id": "p0",
         "bbox": [xmin, ymin, xmax, ymax], "gaze": [x, y], "inframe": true},
        ...]}]}

Coordinates are normalized to [0, 1] with the origin at the top-left corner.
Frames are stored next to the document as numbered images in ``frames/``.
"""

from __future__ import annotations

import bisect
import json
import json.decoder
import json.scanner
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from PIL import Image

BBox = tuple[float, float, float, float]
Point = tuple[float, float]

#: per-channel standardization constants (ImageNet statistics)
DEFAULT_MEAN = (0.485, 0.456, 0.406)
DEFAULT_STD = (0.229, 0.224, 0.225)

#: ground-truth Gaussian width in heatmap pixels
DEFAULT_SIGMA = 3.0

HEAD_NOISE = 0.02
JITTER_RANGE = (0.8, 1.2)
CROP_MIN_SIDE = 0.75
CROP_ATTEMPTS = 20

ANNOTATION_FILE = "annotations.json"
FRAMES_DIR = "frames"


class AnnotationError(ValueError):
    """Invalid annotation content; ``line`` is the 1-based source line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class FrameAnnotation:
    clip_id: str
    frame_index: int
    person_id: str
    bbox: BBox
    gaze: Optional[Point]
    inframe: bool

    def describe(self) -> str:
        return f"record clip_id={self.clip_id!r} person_id={self.person_id!r} frame_index={self.frame_index}"

    def validate(self, line: int | None = None) -> "FrameAnnotation":
        problems = []
        if not isinstance(self.frame_index, int) or self.frame_index < 0:
            problems.append(f"frame_index must be a non-negative integer, got {self.frame_index!r}")
        if len(self.bbox) != 4 or not all(_finite(v) for v in self.bbox):
            problems.append(f"bbox must hold four numbers, got {self.bbox!r}")
        else:
            x0, y0, x1, y1 = self.bbox
            if not all(0.0 <= v <= 1.0 for v in self.bbox):
                problems.append(f"bbox coordinate out of range [0, 1]: {self.bbox!r}")
            elif not (x0 < x1 and y0 < y1):
                problems.append(f"bbox must satisfy xmin < xmax and ymin < ymax: {self.bbox!r}")
        if self.gaze is not None:
            if len(self.gaze) != 2 or not all(_finite(v) for v in self.gaze):
                problems.append(f"gaze must hold two numbers, got {self.gaze!r}")
            elif not all(0.0 <= v <= 1.0 for v in self.gaze):
                problems.append(f"gaze coordinate out of range [0, 1]: {self.gaze!r}")
        if not isinstance(self.inframe, bool):
            problems.append(f"inframe must be a boolean, got {self.inframe!r}")
        elif self.inframe and self.gaze is None:
            problems.append("inframe is true but gaze is absent")
        elif not self.inframe and self.gaze is not None:
            problems.append("gaze present but inframe is false")
        if problems:
            raise AnnotationError(f"{self.describe()}: {'; '.join(problems)}", line)
        return self

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "frame_index": self.frame_index,
            "person_id": self.person_id,
            "bbox": list(self.bbox),
            "gaze": None if self.gaze is None else list(self.gaze),
            "inframe": self.inframe,
        }


def _finite(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


@dataclass
class Track:
    """Contiguous per-person run of frame annotations."""

    clip_id: str
    person_id: str
    frames: list[FrameAnnotation] = field(default_factory=list)

    def validate(self) -> "Track":
        for prev, cur in zip(self.frames, self.frames[1:]):
            if cur.frame_index != prev.frame_index + 1:
                raise AnnotationError(
                    f"{cur.describe()}: track is not contiguous (previous frame_index {prev.frame_index})"
                )
        for ann in self.frames:
            if ann.person_id != self.person_id or ann.clip_id != self.clip_id:
                raise AnnotationError(f"{ann.describe()}: does not belong to track {self.person_id!r}")
        return self

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def start(self) -> int:
        return self.frames[0].frame_index if self.frames else 0


@dataclass
class Clip:
    clip_id: str
    frames: np.ndarray  # (T, H, W, 3) uint8
    tracks: list[Track]


# ---------------------------------------------------------------------------
# annotation I/O


class _Record(dict):
    line: int = 0


def _line_decoder(text: str) -> json.JSONDecoder:
    """A JSONDecoder whose objects remember the line they started on."""
    newlines = [i for i, ch in enumerate(text) if ch == "\n"]
    decoder = json.JSONDecoder()

    def parse_object(s_and_end, strict, scan_once, object_hook, object_pairs_hook, memo=None):
        start = s_and_end[1] - 1
        obj, end = json.decoder.JSONObject(s_and_end, strict, scan_once, object_hook, object_pairs_hook, memo)
        rec = _Record(obj)
        rec.line = bisect.bisect_left(newlines, start) + 1
        return rec, end

    decoder.parse_object = parse_object
    decoder.scan_once = json.scanner.py_make_scanner(decoder)
    return decoder


def _parse_record(rec: dict) -> FrameAnnotation:
    line = getattr(rec, "line", None)
    missing = [k for k in ("clip_id", "frame_index", "person_id", "bbox", "gaze", "inframe") if k not in rec]
    if missing:
        raise AnnotationError(f"record missing fields {missing}", line)
    gaze = rec["gaze"]
    ann = FrameAnnotation(
        clip_id=str(rec["clip_id"]),
        frame_index=rec["frame_index"],
        person_id=str(rec["person_id"]),
        bbox=tuple(rec["bbox"]) if isinstance(rec["bbox"], list) else rec["bbox"],
        gaze=tuple(gaze) if isinstance(gaze, list) else gaze,
        inframe=rec["inframe"],
    )
    return ann.validate(line)


def parse_annotations(text: str) -> list[Track]:
    if not text.strip():
        return []
    try:
        doc = _line_decoder(text).decode(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"malformed JSON: {exc.msg}", exc.lineno) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("tracks"), list):
        raise AnnotationError("document must be an object with a 'tracks' array", 1)
    tracks = []
    for entry in doc["tracks"]:
        line = getattr(entry, "line", None)
        if not isinstance(entry, dict) or not isinstance(entry.get("frames"), list):
            raise AnnotationError("track entry must be an object with a 'frames' array", line)
        frames = [_parse_record(rec) for rec in entry["frames"]]
        person = str(entry.get("person_id", frames[0].person_id if frames else ""))
        clip = str(doc.get("clip_id") or (frames[0].clip_id if frames else ""))
        track = Track(clip, person, frames)
        try:
            track.validate()
        except AnnotationError as exc:
            raise AnnotationError(str(exc), line) from None
        tracks.append(track)
    return tracks


def load_annotations(path: str | os.PathLike) -> list[Track]:
    return parse_annotations(Path(path).read_text(encoding="utf-8"))


def dump_annotations(tracks: Sequence[Track]) -> str:
    """Serialize with one frame record per line."""
    clip_ids = {t.clip_id for t in tracks}
    if len(clip_ids) > 1:
        raise AnnotationError(f"one document holds one clip, got {sorted(clip_ids)}")
    clip_id = next(iter(clip_ids)) if clip_ids else None
    lines = ["{", f'  "clip_id": {json.dumps(clip_id)},', '  "tracks": [']
    for ti, track in enumerate(tracks):
        track.validate()
        lines.append(f'    {{"person_id": {json.dumps(track.person_id)}, "frames": [')
        for fi, ann in enumerate(track.frames):
            ann.validate()
            sep = "," if fi < len(track.frames) - 1 else ""
            lines.append("      " + json.dumps(ann.to_json()) + sep)
        lines.append("    ]}" + ("," if ti < len(tracks) - 1 else ""))
    lines.append("  ]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def save_annotations(tracks: Sequence[Track], path: str | os.PathLike) -> None:
    Path(path).write_text(dump_annotations(tracks), encoding="utf-8")


# ---------------------------------------------------------------------------
# frames on disk


def save_frames(frames: np.ndarray, directory: str | os.PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        Image.fromarray(np.asarray(frame, dtype=np.uint8)).save(directory / f"{i:06d}.png")


def load_frames(directory: str | os.PathLike) -> np.ndarray:
    """Numbered PNG/PPM images, ordered by their integer stem."""
    directory = Path(directory)
    files = [p for p in directory.iterdir() if p.suffix.lower() in (".png", ".ppm") and p.stem.isdigit()]
    files.sort(key=lambda p: int(p.stem))
    if not files:
        raise AnnotationError(f"no frames found in {directory}")
    return np.stack([np.asarray(Image.open(p).convert("RGB")) for p in files])


def save_clip(clip: Clip, directory: str | os.PathLike) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_frames(clip.frames, directory / FRAMES_DIR)
    save_annotations(clip.tracks, directory / ANNOTATION_FILE)


def load_clip(directory: str | os.PathLike) -> Clip:
    directory = Path(directory)
    tracks = load_annotations(directory / ANNOTATION_FILE)
    frames = load_frames(directory / FRAMES_DIR)
    for track in tracks:
        if track.frames and track.frames[-1].frame_index >= len(frames):
            raise AnnotationError(
                f"{track.frames[-1].describe()}: frame_index beyond the {len(frames)} frames on disk"
            )
    clip_id = tracks[0].clip_id if tracks else directory.name
    return Clip(clip_id, frames, tracks)


# ---------------------------------------------------------------------------
# heatmaps


def gaze_pixel(gaze: Point, hm: int) -> tuple[int, int]:
    """(column, row) of the heatmap cell containing a normalized point."""
    cx = min(int(math.floor(gaze[0] * hm)), hm - 1)
    cy = min(int(math.floor(gaze[1] * hm)), hm - 1)
    return cx, cy


def gt_heatmap(gaze: Point, hm: int = 64, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Unnormalized Gaussian with peak exactly 1 at the gaze pixel."""
    cx, cy = gaze_pixel(gaze, hm)
    idx = np.arange(hm, dtype=np.float64)
    gx = np.exp(-((idx - cx) ** 2) / (2 * sigma**2))
    gy = np.exp(-((idx - cy) ** 2) / (2 * sigma**2))
    return gy[:, None] * gx[None, :]


# ---------------------------------------------------------------------------
# preprocessing


def to_float(frame: np.ndarray) -> np.ndarray:
    """HWC frame as float32 in [0, 1]."""
    frame = np.asarray(frame)
    if frame.dtype == np.uint8:
        return frame.astype(np.float32) / 255.0
    return frame.astype(np.float32, copy=False)


def _standardize(img: np.ndarray, mean, std) -> np.ndarray:
    out = (img - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return np.ascontiguousarray(out.transpose(2, 0, 1), dtype=np.float32)


def preprocess(frame: np.ndarray, size: int = 64, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    """Bilinear resize to ``size`` x ``size`` and per-channel standardization -> (3, S, S)."""
    img = to_float(frame)
    if img.shape[:2] != (size, size):
        img = cv2.resize(img, (size, size), interpolation=cv2.INTER_LINEAR)
    return _standardize(img, mean, std)


def head_crop(frame: np.ndarray, bbox: BBox, size: int, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    """Pixels under the head box, resized and standardized -> (3, size, size)."""
    img = to_float(frame)
    h, w = img.shape[:2]
    x0 = min(int(math.floor(bbox[0] * w)), w - 1)
    y0 = min(int(math.floor(bbox[1] * h)), h - 1)
    x1 = max(int(math.ceil(bbox[2] * w)), x0 + 1)
    y1 = max(int(math.ceil(bbox[3] * h)), y0 + 1)
    crop = img[y0:y1, x0:x1]
    crop = cv2.resize(crop, (size, size), interpolation=cv2.INTER_LINEAR)
    return _standardize(crop, mean, std)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    crop: Optional[tuple[int, int, int, int]] = None  # pixel box x0, y0, x1, y1
    jitter: tuple[float, float, float] = (1.0, 1.0, 1.0)
    head_noise: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)


def _crop_box_contains(box, shape, anns: Sequence[FrameAnnotation]) -> bool:
    h, w = shape
    x0, y0, x1, y1 = box[0] / w, box[1] / h, box[2] / w, box[3] / h
    for ann in anns:
        b = ann.bbox
        if b[0] < x0 or b[1] < y0 or b[2] > x1 or b[3] > y1:
            return False
        if ann.gaze is not None and not (x0 <= ann.gaze[0] <= x1 and y0 <= ann.gaze[1] <= y1):
            return False
    return True


def draw_augmentation(
    rng: np.random.Generator,
    shape: tuple[int, int],
    anns: Sequence[FrameAnnotation],
    flip: bool = True,
    crop: bool = True,
    jitter: bool = True,
    head_noise: bool = True,
) -> AugmentParams:
    """Sample one augmentation valid for every annotation in ``anns``.

    Passing all frames of a clip yields parameters that can be applied
    consistently along the sequence.
    """
    h, w = shape
    box = None
    if crop:
        for _ in range(CROP_ATTEMPTS):
            cw = int(round(w * rng.uniform(CROP_MIN_SIDE, 1.0)))
            ch = int(round(h * rng.uniform(CROP_MIN_SIDE, 1.0)))
            x0 = int(rng.integers(0, w - cw + 1))
            y0 = int(rng.integers(0, h - ch + 1))
            cand = (x0, y0, x0 + cw, y0 + ch)
            if _crop_box_contains(cand, shape, anns):
                box = cand
                break
    return AugmentParams(
        flip=bool(flip and rng.random() < 0.5),
        crop=box,
        jitter=tuple(float(v) for v in rng.uniform(*JITTER_RANGE, size=3)) if jitter else (1.0, 1.0, 1.0),
        head_noise=(
            tuple(float(v) for v in rng.uniform(-HEAD_NOISE, HEAD_NOISE, size=4)) if head_noise else (0.0,) * 4
        ),
    )


def _remap(v: float, lo: float, hi: float) -> float:
    return min(max((v - lo) / (hi - lo), 0.0), 1.0)


def flip_annotation(ann: FrameAnnotation) -> FrameAnnotation:
    x0, y0, x1, y1 = ann.bbox
    gaze = None if ann.gaze is None else (1.0 - ann.gaze[0], ann.gaze[1])
    return replace(ann, bbox=(1.0 - x1, y0, 1.0 - x0, y1), gaze=gaze)


def apply_augmentation(frame: np.ndarray, ann: FrameAnnotation, params: AugmentParams):
    """Returns (float32 HWC frame in [0, 1], remapped annotation)."""
    img = to_float(frame)
    h, w = img.shape[:2]
    if params.crop is not None:
        px0, py0, px1, py1 = params.crop
        img = img[py0:py1, px0:px1]
        x0, y0, x1, y1 = px0 / w, py0 / h, px1 / w, py1 / h
        b = ann.bbox
        bbox = (_remap(b[0], x0, x1), _remap(b[1], y0, y1), _remap(b[2], x0, x1), _remap(b[3], y0, y1))
        gaze = None if ann.gaze is None else (_remap(ann.gaze[0], x0, x1), _remap(ann.gaze[1], y0, y1))
        ann = replace(ann, bbox=bbox, gaze=gaze)
    if params.flip:
        img = img[:, ::-1]
        ann = flip_annotation(ann)
    if params.jitter != (1.0, 1.0, 1.0):
        img = np.clip(img * np.asarray(params.jitter, np.float32), 0.0, 1.0)
    if any(params.head_noise):
        noisy = tuple(min(max(v + d, 0.0), 1.0) for v, d in zip(ann.bbox, params.head_noise))
        if noisy[0] < noisy[2] and noisy[1] < noisy[3]:
            ann = replace(ann, bbox=noisy)
    return np.ascontiguousarray(img), ann.validate()


def augment(frame: np.ndarray, ann: FrameAnnotation, rng: np.random.Generator, **switches):
    """Random flip, crop, color jitter and head-box noise for a single frame."""
    params = draw_augmentation(rng, np.asarray(frame).shape[:2], [ann], **switches)
    return apply_augmentation(frame, ann, params)
