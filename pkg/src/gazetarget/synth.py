"""Procedural toy gaze scenes with exact annotations.

A scene is one agent (a skin-toned head disk whose white notch points along
its orientation) and a few colored object disks. The agent looks either at
an object lying near its orientation ray or out of the frame, along a ray
that passes clear of every object.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Clip, FrameAnnotation, Track, load_clip, save_clip

#: attended object must sit within this angle of the orientation ray
ATTEND_CONE = math.radians(25.0)
#: every other object keeps at least this angle from the ray (easy, hard)
CLEAR_CONE = {"easy": math.radians(50.0), "hard": math.radians(35.0)}
MAX_ATTEMPTS = 100
INFRAME_RATE = 0.65

HEAD_COLOR = (214, 170, 140)
NOTCH_COLOR = (255, 255, 255)
PALETTE = (
    (220, 40, 40),
    (40, 180, 60),
    (50, 80, 230),
    (230, 200, 30),
    (180, 60, 200),
    (30, 190, 200),
)

DIFFICULTIES = ("easy", "hard")


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Disk:
    x: float  # center, pixels, frame t = 0
    y: float
    radius: float
    color: tuple[int, int, int]
    vx: float = 0.0  # drift, pixels per frame
    vy: float = 0.0

    def at(self, t: int) -> tuple[float, float]:
        return self.x + self.vx * t, self.y + self.vy * t


@dataclass(frozen=True)
class GazeSegment:
    """Frames from ``start`` on look at object ``target`` (None: out of frame).

    Orientation at frame t is ``theta + angular_velocity * (t - start)``,
    angles in radians with y pointing down.
    """

    start: int
    target: Optional[int]
    theta: float
    angular_velocity: float = 0.0


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int
    frame_size: int
    head: Disk
    objects: tuple[Disk, ...]
    segments: tuple[GazeSegment, ...]
    length: int
    background: tuple[int, int, int] = (40, 40, 48)
    noise: float = 4.0
    clear_cone: float = CLEAR_CONE["easy"]

    def segment_at(self, t: int) -> GazeSegment:
        seg = self.segments[0]
        for s in self.segments:
            if s.start <= t:
                seg = s
        return seg

    def theta_at(self, t: int) -> float:
        seg = self.segment_at(t)
        return seg.theta + seg.angular_velocity * (t - seg.start)


def _angle_diff(a: float, b: float) -> float:
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi)


def _ray_hits(hx, hy, theta, ox, oy, r) -> bool:
    dx, dy = ox - hx, oy - hy
    along = dx * math.cos(theta) + dy * math.sin(theta)
    if along <= 0:
        return math.hypot(dx, dy) <= r
    perp = abs(-dx * math.sin(theta) + dy * math.cos(theta))
    return perp <= r


def validate_spec(spec: SyntheticSceneSpec, frames: Optional[range] = None) -> None:
    """Raise SceneGenerationError unless every frame satisfies the gaze geometry."""
    n, size = spec.frame_size, spec.frame_size
    if not spec.segments or spec.segments[0].start != 0:
        raise SceneGenerationError("first gaze segment must start at frame 0")
    hx, hy, hr = spec.head.x, spec.head.y, spec.head.radius
    if not (hr <= hx <= size - hr and hr <= hy <= size - hr):
        raise SceneGenerationError("head disk leaves the frame")
    for t in frames if frames is not None else range(spec.length):
        seg = spec.segment_at(t)
        theta = spec.theta_at(t)
        centers = [o.at(t) for o in spec.objects]
        for i, (o, (ox, oy)) in enumerate(zip(spec.objects, centers)):
            if not (o.radius + 1 <= ox <= n - o.radius - 1 and o.radius + 1 <= oy <= n - o.radius - 1):
                raise SceneGenerationError(f"object {i} leaves the frame at t={t}")
            if math.hypot(ox - hx, oy - hy) < o.radius + hr + 4:
                raise SceneGenerationError(f"object {i} touches the head at t={t}")
            for j in range(i):
                px, py = centers[j]
                if math.hypot(ox - px, oy - py) < o.radius + spec.objects[j].radius + 2:
                    raise SceneGenerationError(f"objects {j} and {i} overlap at t={t}")
            angle = math.atan2(oy - hy, ox - hx)
            if i == seg.target:
                if _angle_diff(angle, theta) > ATTEND_CONE:
                    raise SceneGenerationError(f"attended object {i} outside the gaze cone at t={t}")
            elif _angle_diff(angle, theta) < spec.clear_cone or _ray_hits(hx, hy, theta, ox, oy, o.radius):
                raise SceneGenerationError(f"object {i} too close to the gaze ray at t={t}")
        if seg.target is not None and not 0 <= seg.target < len(spec.objects):
            raise SceneGenerationError(f"segment target {seg.target} is not an object")


def _render(spec: SyntheticSceneSpec, t: int, rng: np.random.Generator) -> np.ndarray:
    n = spec.frame_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    img = np.empty((n, n, 3), dtype=np.float64)
    img[:] = spec.background
    img += rng.normal(0.0, spec.noise, size=img.shape)

    def disk(cx, cy, r, color):
        img[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = color

    for o in spec.objects:
        disk(*o.at(t), o.radius, o.color)
    h = spec.head
    disk(h.x, h.y, h.radius, h.color)
    theta = spec.theta_at(t)
    disk(h.x + 0.55 * h.radius * math.cos(theta), h.y + 0.55 * h.radius * math.sin(theta),
         0.45 * h.radius, NOTCH_COLOR)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_clip(spec: SyntheticSceneSpec, clip_id: str = "clip", person_id: str = "p0"
                  ) -> tuple[np.ndarray, Track]:
    """Render ``spec.length`` frames and their exact annotations."""
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    n = spec.frame_size
    h = spec.head
    bbox = (max(h.x - h.radius, 0) / n, max(h.y - h.radius, 0) / n,
            min(h.x + h.radius, n) / n, min(h.y + h.radius, n) / n)
    frames, anns = [], []
    for t in range(spec.length):
        frames.append(_render(spec, t, rng))
        target = spec.segment_at(t).target
        gaze = None
        if target is not None:
            ox, oy = spec.objects[target].at(t)
            gaze = (ox / n, oy / n)
        anns.append(FrameAnnotation(clip_id, t, person_id, bbox, gaze, gaze is not None).validate())
    return np.stack(frames), Track(clip_id, person_id, anns).validate()


# ---------------------------------------------------------------------------
# random specs


def _random_objects(rng, count, size, hx, hy, hr, moving, length):
    objs = []
    for i in range(count):
        r = float(rng.uniform(3.5, 5.0))
        vx, vy = (rng.uniform(-0.4, 0.4, size=2) if moving else (0.0, 0.0))
        objs.append(Disk(float(rng.uniform(r + 2, size - r - 2)), float(rng.uniform(r + 2, size - r - 2)), r,
                         PALETTE[(i + int(rng.integers(len(PALETTE)))) % len(PALETTE)], float(vx), float(vy)))
    return objs


def _segment_for(rng, target, objects, head, start):
    omega = math.radians(float(rng.uniform(-1.0, 1.0)))
    if target is None:
        return GazeSegment(start, None, float(rng.uniform(-math.pi, math.pi)), omega)
    ox, oy = objects[target].at(start)
    base = math.atan2(oy - head.y, ox - head.x)
    return GazeSegment(start, target, base + math.radians(float(rng.uniform(-8.0, 8.0))), omega)


def random_scene_spec(seed: int, difficulty: str = "easy", length: int = 8, size: int = 64,
                      inframe: Optional[bool] = None) -> SyntheticSceneSpec:
    """A valid random spec; ``easy`` has two static objects and one gaze target per clip,
    ``hard`` has four drifting objects and at least one gaze shift mid-clip."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    rng = np.random.default_rng(seed)
    hard = difficulty == "hard"
    if hard and length < 2:
        raise SceneGenerationError("hard clips need at least two frames for a gaze shift")
    if not hard and inframe is None:
        inframe = bool(rng.random() < INFRAME_RATE)
    for _ in range(MAX_ATTEMPTS):
        hr = float(rng.uniform(5.0, 7.0))
        head = Disk(float(rng.uniform(hr + 4, size - hr - 4)), float(rng.uniform(hr + 4, size - hr - 4)), hr,
                    HEAD_COLOR)
        objects = tuple(_random_objects(rng, 4 if hard else 2, size, head.x, head.y, hr, hard, length))
        base = SyntheticSceneSpec(0, size, head, objects, (GazeSegment(0, None, 0.0),), length,
                                  clear_cone=CLEAR_CONE[difficulty])
        try:
            segments = _choose_segments(rng, base, hard, inframe)
        except SceneGenerationError:
            continue
        spec = SyntheticSceneSpec(int(rng.integers(2**31)), size, head, objects, segments, length,
                                  clear_cone=CLEAR_CONE[difficulty])
        try:
            validate_spec(spec)
        except SceneGenerationError:
            continue
        return spec
    raise SceneGenerationError(f"no valid {difficulty} scene after {MAX_ATTEMPTS} attempts (seed {seed})")


def _choose_segments(rng, base: SyntheticSceneSpec, hard: bool, inframe: Optional[bool]):
    """Pick gaze segments one at a time, retrying each against its own frames."""
    length = base.length
    if hard:
        n_seg = int(rng.integers(2, 4)) if length >= 3 else 2
        cuts = sorted(int(c) for c in rng.choice(np.arange(1, length), size=min(n_seg - 1, length - 1),
                                                  replace=False))
        starts = [0] + cuts
    else:
        starts = [0]
    ends = starts[1:] + [length]
    chosen: list[GazeSegment] = []
    for start, end in zip(starts, ends):
        # in/out is decided once per segment so retries do not bias the in-frame rate
        if inframe is not None and not hard:
            want_in = inframe
        elif hard and chosen and chosen[-1].target is None:
            want_in = True
        else:
            want_in = bool(rng.random() < INFRAME_RATE)
        for _ in range(20):
            target = int(rng.integers(len(base.objects))) if want_in else None
            if chosen and target == chosen[-1].target:
                continue
            seg = _segment_for(rng, target, base.objects, base.head, start)
            trial = SyntheticSceneSpec(0, base.frame_size, base.head, base.objects, tuple(chosen) + (seg,),
                                       length, clear_cone=base.clear_cone)
            try:
                validate_spec(trial, range(start, end))
            except SceneGenerationError:
                continue
            chosen.append(seg)
            break
        else:
            raise SceneGenerationError("no valid gaze segment")
    return tuple(chosen)


# ---------------------------------------------------------------------------
# datasets on disk

MANIFEST = "dataset.json"


@dataclass
class DatasetInfo:
    root: str
    difficulty: str
    seed: int
    length: int
    frame_size: int
    splits: dict[str, list[str]] = field(default_factory=dict)
    clip_seeds: dict[str, int] = field(default_factory=dict)


def _clip_seed(seed: int, split: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, split, index]).generate_state(1)[0])


def make_dataset(root: str | os.PathLike, n_clips: int, difficulty: str = "easy", seed: int = 0,
                 length: int = 8, size: int = 64, test_fraction: float = 0.2) -> DatasetInfo:
    """Write ``n_clips`` clips split 80/20 into ``train/`` and ``test/`` with disjoint seeds."""
    root = Path(root)
    n_test = int(round(n_clips * test_fraction))
    info = DatasetInfo(str(root), difficulty, seed, length, size, {"train": [], "test": []})
    for split_id, (split, count) in enumerate((("train", n_clips - n_test), ("test", n_test))):
        for i in range(count):
            clip_seed = _clip_seed(seed, split_id, i)
            clip_id = f"{split}_{i:05d}"
            frames, track = generate_clip(random_scene_spec(clip_seed, difficulty, length, size), clip_id)
            save_clip(Clip(clip_id, frames, [track]), root / split / clip_id)
            info.splits[split].append(clip_id)
            info.clip_seeds[clip_id] = clip_seed
    if len(set(info.clip_seeds.values())) != len(info.clip_seeds):
        raise SceneGenerationError("clip seeds collided across splits")
    doc = asdict(info)
    doc.pop("root")
    (root / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return info


def load_dataset(root: str | os.PathLike, split: str) -> list[Clip]:
    root = Path(root)
    manifest = json.loads((root / MANIFEST).read_text())
    return [load_clip(root / split / clip_id) for clip_id in manifest["splits"][split]]
