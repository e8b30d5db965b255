"""Composite loss, optimizer and the spatial/temporal training stages."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as gdata
from .model import FROZEN_IN_TEMPORAL, FrameInputs, FrameOutput, GazeNet, prepare_inputs, save_checkpoint
from .tensor import ops
from .tensor.core import Tensor, backward

logger = logging.getLogger(__name__)

STAGES = ("spatial", "temporal")
LOG_FIELDS = ("step", "stage", "loss", "L_h", "L_f")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Optional[Path]):
        self.step = step
        self.checkpoint = checkpoint
        where = f"; last good checkpoint: {checkpoint}" if checkpoint else ""
        super().__init__(f"loss became non-finite at step {step}{where}")


@dataclass(frozen=True)
class LossWeights:
    w_h: float = 100.0
    w_f: float = 1.0

    def __post_init__(self):
        if self.w_h < 0 or self.w_f < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "spatial"
    lr: float = 2.5e-4
    batch_size: int = 16
    seq_len: int = 8
    steps: int = 1000
    checkpoint_every: int = 0
    seed: int = 0
    sigma: float = gdata.DEFAULT_SIGMA
    w_h: float = 100.0
    w_f: float = 1.0
    augment: bool = True
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.batch_size < 1 or self.seq_len < 1 or self.steps < 0 or self.lr < 0:
            raise ValueError(f"invalid training configuration {self}")

    @property
    def frozen(self) -> tuple[str, ...]:
        """Parameter groups held fixed: everything up to and including Encode in the temporal stage."""
        return FROZEN_IN_TEMPORAL if self.stage == "temporal" else ()

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_h, self.w_f)


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossTerms:
    total: Tensor
    heatmap: Tensor
    inframe: Tensor

    def values(self) -> tuple[float, float, float]:
        return float(self.total.data), float(self.heatmap.data), float(self.inframe.data)


def composite_loss(out: FrameOutput, gts: Sequence[gdata.FrameAnnotation] | gdata.FrameAnnotation,
                   w: LossWeights = LossWeights(), sigma: float = gdata.DEFAULT_SIGMA) -> LossTerms:
    """w_h * MSE(decoder output, Gaussian target) over in-frame samples + w_f * BCE(alpha logit, in-frame)."""
    if isinstance(gts, gdata.FrameAnnotation):
        gts = [gts]
    if len(gts) != out.decoded.shape[0]:
        raise ValueError(f"{len(gts)} annotations for a batch of {out.decoded.shape[0]}")
    dtype = out.decoded.dtype
    hm = out.decoded.shape[-1]
    labels = np.array([[1.0 if g.inframe else 0.0] for g in gts], dtype=dtype)
    l_f = ops.bce_loss(out.alpha_logit, labels)
    inside = [i for i, g in enumerate(gts) if g.inframe]
    if inside:
        target = np.stack([gdata.gt_heatmap(gts[i].gaze, hm, sigma) for i in inside])[:, None].astype(dtype)
        l_h = ops.mse_loss(ops.select(out.decoded, inside), target)
    else:
        l_h = Tensor(np.zeros((), dtype=dtype))
    total = ops.add(ops.mul(l_h, w.w_h), ops.mul(l_f, w.w_f))
    return LossTerms(total, l_h, l_f)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 2.5e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# batching


def _frame_batch(model: GazeNet, frames, anns) -> FrameInputs:
    return prepare_inputs(frames, [a.bbox for a in anns], model.config)


def sample_spatial_batch(model: GazeNet, clips: Sequence[gdata.Clip], rng: np.random.Generator, size: int,
                         augment: bool = True) -> tuple[FrameInputs, list[gdata.FrameAnnotation]]:
    """Independent annotated frames drawn uniformly over all tracks."""
    pool = [(ci, ti) for ci, c in enumerate(clips) for ti, t in enumerate(c.tracks) if len(t)]
    frames, anns = [], []
    for _ in range(size):
        ci, ti = pool[int(rng.integers(len(pool)))]
        track = clips[ci].tracks[ti]
        ann = track.frames[int(rng.integers(len(track)))]
        frame = clips[ci].frames[ann.frame_index]
        if augment:
            frame, ann = gdata.augment(frame, ann, rng)
        frames.append(frame)
        anns.append(ann)
    return _frame_batch(model, frames, anns), anns


def sample_temporal_batch(model: GazeNet, clips: Sequence[gdata.Clip], rng: np.random.Generator, size: int,
                          seq_len: int, augment: bool = True):
    """``size`` windows of ``seq_len`` consecutive frames, one augmentation per window."""
    pool = [(ci, ti) for ci, c in enumerate(clips) for ti, t in enumerate(c.tracks) if len(t) >= seq_len]
    if not pool:
        raise ValueError(f"no track has {seq_len} frames")
    windows = []
    for _ in range(size):
        ci, ti = pool[int(rng.integers(len(pool)))]
        track = clips[ci].tracks[ti]
        start = int(rng.integers(len(track) - seq_len + 1))
        anns = track.frames[start:start + seq_len]
        frames = [clips[ci].frames[a.frame_index] for a in anns]
        if augment:
            params = gdata.draw_augmentation(rng, frames[0].shape[:2], anns)
            pairs = [gdata.apply_augmentation(f, a, params) for f, a in zip(frames, anns)]
            frames, anns = [p[0] for p in pairs], [p[1] for p in pairs]
        windows.append((frames, anns))
    steps, step_anns = [], []
    for t in range(seq_len):
        frames = [w[0][t] for w in windows]
        anns = [w[1][t] for w in windows]
        steps.append(_frame_batch(model, frames, anns))
        step_anns.append(anns)
    return steps, step_anns


# ---------------------------------------------------------------------------
# training loop


def trainable_params(model: GazeNet, frozen: Sequence[str]) -> dict[str, Tensor]:
    out = {}
    for name, tensor in model.params:
        group = name.split(".", 1)[0]
        tensor.requires_grad = group not in frozen
        tensor.grad = None
        if tensor.requires_grad:
            out[name] = tensor
    return out


def _step_loss(model: GazeNet, cfg: TrainConfig, clips, rng) -> LossTerms:
    w = cfg.weights
    if cfg.stage == "spatial":
        inputs, anns = sample_spatial_batch(model, clips, rng, cfg.batch_size, cfg.augment)
        out, _ = model.forward_frame(inputs)
        return composite_loss(out, anns, w, cfg.sigma)
    steps, step_anns = sample_temporal_batch(model, clips, rng, cfg.batch_size, cfg.seq_len, cfg.augment)
    state = model.zero_state()
    terms = []
    for inputs, anns in zip(steps, step_anns):
        out, state = model.forward_frame(inputs, state)
        terms.append(composite_loss(out, anns, w, cfg.sigma))
    scale = 1.0 / len(terms)

    def avg(parts):
        acc = parts[0]
        for p in parts[1:]:
            acc = ops.add(acc, p)
        return ops.mul(acc, scale)

    return LossTerms(avg([t.total for t in terms]), avg([t.heatmap for t in terms]), avg([t.inframe for t in terms]))


def train_stage(model: GazeNet, clips: Sequence[gdata.Clip], cfg: TrainConfig,
                out_dir: str | os.PathLike | None = None) -> tuple[GazeNet, list[dict]]:
    """Optimize ``model`` in place for ``cfg.steps`` steps.

    The spatial stage treats frames independently (zero ConvLSTM state per
    frame); the temporal stage backpropagates through ``seq_len`` frames with
    every group up to Encode frozen. When ``out_dir`` is given, the metrics
    log is appended to ``out_dir/train_log.csv`` and checkpoints land under
    ``out_dir/checkpoints``.
    """
    rng = np.random.default_rng(cfg.seed)
    params = trainable_params(model, cfg.frozen)
    opt = Adam(params, cfg.lr)
    log: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    fh = None
    last_good: Optional[Path] = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        new = not log_path.exists()
        fh = open(log_path, "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_FIELDS)
    try:
        for step in range(1, cfg.steps + 1):
            terms = _step_loss(model, cfg, clips, rng)
            total, l_h, l_f = terms.values()
            if not (math.isfinite(total) and math.isfinite(l_h) and math.isfinite(l_f)):
                raise TrainingDiverged(step, last_good)
            opt.zero_grad()
            backward(terms.total)
            opt.step()
            if not all(np.all(np.isfinite(p.data)) for p in params.values()):
                raise TrainingDiverged(step, last_good)
            row = {"step": step, "stage": cfg.stage, "loss": total, "L_h": l_h, "L_f": l_f}
            log.append(row)
            if writer is not None:
                writer.writerow([step, cfg.stage, repr(total), repr(l_h), repr(l_f)])
            if cfg.log_every and step % cfg.log_every == 0:
                recent = log[-cfg.log_every:]
                logger.info("%s step %d loss %.4f", cfg.stage, step, np.mean([r["loss"] for r in recent]))
            if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_good = save_checkpoint(model, out_dir / "checkpoints" / f"{cfg.stage}_{step:06d}",
                                            {"stage": cfg.stage, "step": step})
    finally:
        opt.zero_grad()
        for _, tensor in model.params:
            tensor.requires_grad = False
        if fh is not None:
            fh.close()
    return model, log
