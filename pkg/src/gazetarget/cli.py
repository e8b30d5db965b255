"""Command-line entry point: ``gazetarget <command> [options]``.

Every command accepts ``--config`` (a JSON document of option values),
``--seed`` and ``--out``; explicit flags override the document. The
effective configuration is written to ``<out>/run_config.json``.

Exit status: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

from . import __version__
from . import data as gdata
from . import evaluation, plotting, social, synth, training
from .model import ConfigError, GazeNet, ModelConfig, load_checkpoint, save_checkpoint
from .tensor import gradcheck, serialize

logger = logging.getLogger("gazetarget")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
RUN_CONFIG = "run_config.json"
GRAD_TOLERANCE = 1e-4


class CliConfigError(Exception):
    pass


class CliDataError(Exception):
    pass


class CliNumericError(Exception):
    pass


DEFAULTS = {
    "synth": {"clips": 250, "difficulty": "easy", "length": 8, "size": 64, "test_fraction": 0.2},
    "train": {"data": None, "stage": "spatial", "init": None, "steps": 1000, "lr": 2.5e-4, "batch_size": 16,
              "seq_len": 8, "checkpoint_every": 0, "augment": True, "attention": True, "w_h": 100.0, "w_f": 1.0,
              "model": {}},
    "eval": {"checkpoint": None, "data": None, "split": "test", "figures": True},
    "infer": {"checkpoint": None, "clip": None, "overlays": False},
    "shared": {"heatmaps": None, "threshold": social.SHARED_THRESHOLD, "truth": None},
    "shifts": {"labels": None, "fps": None, "max_gap_ms": social.MAX_GAP_MS, "iou": social.IOU_THRESHOLD,
               "figures": True},
    "gradcheck": {"cases": 20},
}
COMMON = {"seed": 0, "out": None}


# ---------------------------------------------------------------------------
# argument plumbing


def _flag(p, name, **kw):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=argparse.SUPPRESS, **kw)


def _bool_flag(p, name, help_on, help_off):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name.replace('_', '-')}", dest=name, action="store_true", default=argparse.SUPPRESS,
                   help=help_on)
    g.add_argument(f"--no-{name.replace('_', '-')}", dest=name, action="store_false", default=argparse.SUPPRESS,
                   help=help_off)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gazetarget", description="Spatiotemporal gaze-target toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON document with option values")
        _flag(p, "seed", type=int, help="random seed (default 0)")
        _flag(p, "out", help="output directory")
        return p

    p = command("synth", "generate a synthetic clip dataset")
    _flag(p, "clips", type=int, help="number of clips (default 250)")
    _flag(p, "difficulty", choices=synth.DIFFICULTIES)
    _flag(p, "length", type=int, help="frames per clip (default 8)")
    _flag(p, "size", type=int, help="frame side in pixels (default 64)")
    _flag(p, "test_fraction", type=float)

    p = command("train", "run one training stage")
    _flag(p, "data", help="dataset directory made by `synth`")
    _flag(p, "stage", choices=training.STAGES)
    _flag(p, "init", help="checkpoint to start from (required for the temporal stage)")
    _flag(p, "steps", type=int)
    _flag(p, "lr", type=float)
    _flag(p, "batch_size", type=int)
    _flag(p, "seq_len", type=int)
    _flag(p, "checkpoint_every", type=int)
    _flag(p, "w_h", type=float)
    _flag(p, "w_f", type=float)
    _bool_flag(p, "augment", "enable augmentation", "disable augmentation")
    _bool_flag(p, "attention", "head-conditioned attention", "uniform attention (ablation)")

    p = command("eval", "score a checkpoint on a dataset split")
    _flag(p, "checkpoint")
    _flag(p, "data")
    _flag(p, "split", choices=("train", "test"))
    _bool_flag(p, "figures", "write ROC and overlay figures", "skip figures")

    p = command("infer", "write per-frame heatmaps and alpha for one clip")
    _flag(p, "checkpoint")
    _flag(p, "clip", help="clip directory (annotations.json + frames/)")
    _bool_flag(p, "overlays", "also write overlay figures", "no overlay figures")

    p = command("shared", "aggregate per-person heatmaps and detect shared attention")
    _flag(p, "heatmaps", help="directory of <person>_<frame>.gzt heatmaps (as written by `infer`)")
    _flag(p, "threshold", type=float)
    _flag(p, "truth", help="optional JSON {frame_index: [x, y]} of shared-attention centers in pixels")

    p = command("shifts", "infer toy-to-eyes gaze-shift events")
    _flag(p, "labels", help="JSON document: list of {clip_id, fps, labels, truth?}")
    _flag(p, "fps", type=float, help="override the frame rate of every stream")
    _flag(p, "max_gap_ms", type=float)
    _flag(p, "iou", type=float, help="matching IoU threshold for precision/recall")
    _bool_flag(p, "figures", "write timeline figures", "skip figures")

    p = command("gradcheck", "finite-difference check of every differentiable op")
    _flag(p, "cases", type=int, help="random cases per op (default 20)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """defaults <- config document <- explicit flags."""
    defaults = {**COMMON, **DEFAULTS[args.command]}
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise CliConfigError("config document must be a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise CliConfigError(f"unknown config keys for `{args.command}`: {unknown}")
    flags = {k: v for k, v in vars(args).items() if k in defaults}
    cfg = {**defaults, **doc, **flags}
    if cfg["out"] is None:
        raise CliConfigError("--out is required")
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise CliConfigError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _echo_config(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / RUN_CONFIG, {"command": command, **cfg})


def _load_model(path) -> GazeNet:
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliDataError(f"missing checkpoint: {exc}") from exc
    except (serialize.FormatError, KeyError, json.JSONDecodeError) as exc:
        raise CliDataError(f"unreadable checkpoint {path}: {exc}") from exc


def _load_split(root, split):
    try:
        return synth.load_dataset(root, split)
    except FileNotFoundError as exc:
        raise CliDataError(f"dataset not found: {exc}") from exc


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, out: Path) -> int:
    if cfg["clips"] < 1 or cfg["length"] < 1 or cfg["size"] < 16:
        raise CliConfigError("clips and length must be positive and size at least 16")
    info = synth.make_dataset(out, cfg["clips"], cfg["difficulty"], cfg["seed"], cfg["length"], cfg["size"],
                              cfg["test_fraction"])
    print(f"wrote {len(info.splits['train'])} train and {len(info.splits['test'])} test clips to {out}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    _require(cfg, "data")
    try:
        tcfg = training.TrainConfig(stage=cfg["stage"], lr=cfg["lr"], batch_size=cfg["batch_size"],
                                    seq_len=cfg["seq_len"], steps=cfg["steps"],
                                    checkpoint_every=cfg["checkpoint_every"], seed=cfg["seed"], w_h=cfg["w_h"],
                                    w_f=cfg["w_f"], augment=cfg["augment"])
        training.LossWeights(cfg["w_h"], cfg["w_f"])
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    if cfg["init"]:
        model = _load_model(cfg["init"])
    elif cfg["stage"] == "temporal":
        raise CliConfigError("the temporal stage needs --init with a spatial-stage checkpoint")
    else:
        try:
            mcfg = ModelConfig.from_json({**cfg["model"], "use_attention": cfg["attention"]})
        except (ConfigError, TypeError) as exc:
            raise CliConfigError(f"model config: {exc}") from exc
        model = GazeNet(mcfg, seed=cfg["seed"])
    clips = _load_split(cfg["data"], "train")
    try:
        _, log = training.train_stage(model, clips, tcfg, out)
    except training.TrainingDiverged as exc:
        raise CliNumericError(str(exc)) from exc
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    final = save_checkpoint(model, out / "final", {"stage": cfg["stage"], "step": cfg["steps"]})
    if log:
        plotting.loss_curve(log, out / "loss_curve.png")
        print(f"{cfg['stage']} stage: {len(log)} steps, final loss {log[-1]['loss']:.4f}; checkpoint {final}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    _require(cfg, "checkpoint", "data")
    model = _load_model(cfg["checkpoint"])
    clips = _load_split(cfg["data"], cfg["split"])
    heatmaps, alphas, anns = evaluation.predict_clips(model, clips)
    report = evaluation.evaluate_predictions(heatmaps, alphas, anns)
    _write_json(out / "report.json", report.to_json())
    with open(out / "frames.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(evaluation.FRAME_FIELDS)
        for hm, alpha, a in zip(heatmaps, alphas, anns):
            x, y = evaluation.argmax_point(hm)
            l2 = evaluation.l2_distance(hm, a.gaze) if a.inframe else None
            w.writerow([a.clip_id, a.person_id, a.frame_index, int(a.inframe), _fmt(alpha), _fmt(x), _fmt(y),
                        _fmt(l2)])
    if cfg["figures"]:
        inside = [i for i, a in enumerate(anns) if a.inframe]
        if inside:
            plotting.roc_curve([heatmaps[i] for i in inside], [anns[i].gaze for i in inside], out / "roc.png",
                               report.auc)
            first = inside[0]
            clip = next(c for c in clips if c.clip_id == anns[first].clip_id)
            plotting.heatmap_overlay(clip.frames[anns[first].frame_index], heatmaps[first], out / "overlay.png",
                                     anns[first].gaze, anns[first].bbox, alphas[first])
    print(report.summary())
    return EXIT_OK


def cmd_infer(cfg: dict, out: Path) -> int:
    _require(cfg, "checkpoint", "clip")
    model = _load_model(cfg["checkpoint"])
    try:
        clip = gdata.load_clip(cfg["clip"])
    except FileNotFoundError as exc:
        raise CliDataError(f"clip not found: {exc}") from exc
    hm_dir, png_dir = out / "heatmaps", out / "png"
    hm_dir.mkdir(parents=True, exist_ok=True)
    png_dir.mkdir(exist_ok=True)
    from PIL import Image

    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("clip_id", "person_id", "frame_index", "alpha", "pred_x", "pred_y"))
        for track in clip.tracks:
            frames = [clip.frames[a.frame_index] for a in track.frames]
            preds = model.forward_sequence(frames, [a.bbox for a in track.frames])
            for a, p in zip(track.frames, preds):
                stem = f"{track.person_id}_{a.frame_index:06d}"
                serialize.save(p.heatmap, hm_dir / f"{stem}.gzt")
                Image.fromarray(social.heatmap_to_gray(p.heatmap)).save(png_dir / f"{stem}.png")
                x, y = evaluation.argmax_point(p.heatmap)
                w.writerow([clip.clip_id, track.person_id, a.frame_index, _fmt(p.alpha), _fmt(x), _fmt(y)])
                if cfg["overlays"]:
                    plotting.heatmap_overlay(clip.frames[a.frame_index], p.heatmap, png_dir / f"{stem}_overlay.png",
                                             a.gaze, a.bbox, p.alpha)
    print(f"wrote heatmaps for {sum(len(t) for t in clip.tracks)} person-frames to {out}")
    return EXIT_OK


def cmd_shared(cfg: dict, out: Path) -> int:
    _require(cfg, "heatmaps")
    src = Path(cfg["heatmaps"])
    files = sorted(src.glob("*.gzt"))
    if not files:
        raise CliDataError(f"no .gzt heatmaps in {src}")
    by_frame = defaultdict(list)
    for f in files:
        person, _, frame = f.stem.rpartition("_")
        if not person or not frame.isdigit():
            raise CliDataError(f"heatmap name {f.name} is not <person>_<frame>.gzt")
        try:
            by_frame[int(frame)].append(serialize.load(f))
        except serialize.FormatError as exc:
            raise CliDataError(str(exc)) from exc
    truth = {}
    if cfg["truth"]:
        try:
            truth = {int(k): v for k, v in json.loads(Path(cfg["truth"]).read_text()).items()}
        except (OSError, ValueError) as exc:
            raise CliDataError(f"cannot read truth {cfg['truth']}: {exc}") from exc
    shared_frames = 0
    with open(out / "shared.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("frame_index", "is_shared", "x", "y", "max_score") + (("loc_error_px",) if truth else ()))
        for frame in sorted(by_frame):
            try:
                res = social.detect_shared(social.aggregate_shared(by_frame[frame]), cfg["threshold"])
            except ValueError as exc:
                raise CliDataError(f"frame {frame}: {exc}") from exc
            shared_frames += res.is_shared
            x, y = res.location if res.location else (None, None)
            row = [frame, int(res.is_shared), _fmt(x), _fmt(y), _fmt(res.max_score)]
            if truth:
                row.append(_fmt(social.localization_error(res, truth[frame]) if frame in truth else None))
            w.writerow(row)
    print(f"{shared_frames}/{len(by_frame)} frames shared at threshold {cfg['threshold']}")
    return EXIT_OK


def cmd_shifts(cfg: dict, out: Path) -> int:
    _require(cfg, "labels")
    try:
        streams = json.loads(Path(cfg["labels"]).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliDataError(f"cannot read labels {cfg['labels']}: {exc}") from exc
    if isinstance(streams, dict):
        streams = [streams]
    rows, summary = [], []
    tp = n_pred = n_true = 0
    for k, s in enumerate(streams):
        clip_id = s.get("clip_id", f"stream{k}")
        fps = cfg["fps"] or s.get("fps")
        if fps is None:
            raise CliConfigError(f"{clip_id}: no fps given")
        try:
            stream = social.infer_shift_events(s["labels"], fps, cfg["max_gap_ms"])
        except (KeyError, ValueError) as exc:
            raise CliDataError(f"{clip_id}: {exc}") from exc
        rows += [(clip_id, a, b) for a, b in stream.events]
        entry = {"clip_id": clip_id, "events": len(stream.events)}
        if "truth" in s:
            truth = [tuple(e) for e in s["truth"]]
            prf = social.event_prf(stream.events, truth, cfg["iou"])
            entry.update(precision=prf.precision, recall=prf.recall)
            tp += len(prf.matches)
            n_pred += len(stream.events)
            n_true += len(truth)
        summary.append(entry)
        if cfg["figures"]:
            plotting.event_timeline(stream.labels, stream.events, out / f"timeline_{clip_id}.png",
                                    [tuple(e) for e in s.get("truth", [])])
    with open(out / "events.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("clip_id", "start_frame", "end_frame"))
        w.writerows(rows)
    totals = {"precision": tp / n_pred if n_pred else None, "recall": tp / n_true if n_true else None}
    _write_json(out / "prf.json", {"streams": summary, "overall": totals})
    print(f"{len(rows)} events; precision {totals['precision']} recall {totals['recall']}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    if cfg["cases"] < 1:
        raise CliConfigError("--cases must be positive")
    errors, seconds = gradcheck.timed_op_suite(cases=cfg["cases"], seed=cfg["seed"])
    _write_json(out / "gradcheck.json", {"max_relative_error": errors, "tolerance": GRAD_TOLERANCE})
    width = max(len(k) for k in errors)
    for op, err in errors.items():
        print(f"{op:<{width}}  {err:.3e}  {'ok' if err <= GRAD_TOLERANCE else 'FAIL'}")
    print(f"{len(errors)} ops, {cfg['cases']} cases each, {seconds:.1f}s")
    if max(errors.values()) > GRAD_TOLERANCE:
        raise CliNumericError("gradient check exceeded tolerance")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "shared": cmd_shared,
            "shifts": cmd_shifts, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        _echo_config(out, args.command, cfg)
        return COMMANDS[args.command](cfg, out)
    except CliConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CliDataError, gdata.AnnotationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CliNumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
