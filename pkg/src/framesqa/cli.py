"""Command-line pipelines: gen, train, score, detect, tune, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Config files are JSON; command-line flags override config values.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .events import EventList, read_events_csv
from .localizer import DetectionConfig, detect_scores, segment_min_scores, select_threshold
from .losses import LossWeights
from .metrics import RHO_1, RHO_2, EvalConfig, intersection_eval, tune_threshold
from .model import FPS, forward
from .signal_io import CorpusConfig, generate_utterance, load_waveform, preprocess, read_split, write_split
from .trainer import CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train

log = logging.getLogger("framesqa")


class UsageError(Exception):
    pass


# --- file helpers -------------------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _csv_text(header, rows, comment: str | None = None) -> str:
    import io

    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _comment_fields(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            if not line.startswith("#"):
                break
            for part in line[1:].split():
                if "=" in part:
                    k, v = part.split("=", 1)
                    out[k] = v
    return out


def read_frame_scores(path) -> tuple[dict[str, np.ndarray], int]:
    """Parse a ``utt_id,frame_idx,score`` CSV whose ``# fps=`` header carries the frame rate."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"no such file: {path}")
    fps = int(_comment_fields(path).get("fps", FPS))
    per_utt: dict[str, list[tuple[int, float]]] = {}
    with open(path, newline="") as f:
        rows = csv.DictReader(line for line in f if not line.startswith("#"))
        if rows.fieldnames is None or not {"utt_id", "frame_idx", "score"} <= set(rows.fieldnames):
            raise UsageError(f"{path}: expected columns utt_id,frame_idx,score")
        for row in rows:
            try:
                per_utt.setdefault(row["utt_id"], []).append((int(row["frame_idx"]), float(row["score"])))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{path}: malformed row {row}") from exc
    out = {}
    for utt, pairs in per_utt.items():
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise UsageError(f"{path}: frame indices of {utt} are not contiguous from 0")
        out[utt] = np.array([s for _, s in pairs])
    return out, fps


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return cfg


def _prepare_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {path} is not writable: {exc}") from exc
    return path


def _prepare_file(path) -> Path:
    path = Path(path)
    _prepare_dir(path.parent if str(path.parent) else ".")
    return path


def _manifest(path: Path, args, started: float, inputs: dict, outputs: dict, seed=None, config=None) -> None:
    _write_json(
        path,
        {
            "command": args.command,
            "config": str(config) if config else None,
            "seed": seed,
            "inputs": {k: str(v) for k, v in inputs.items()},
            "outputs": {k: str(v) for k, v in outputs.items()},
            "version": __version__,
            "wall_clock_s": time.time() - started,
        },
    )


def _parse_rho(text: str) -> tuple[float, float]:
    try:
        a, b = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected DTC,GTC pair, got {text!r}") from exc
    return a, b


# --- commands -------------------------------------------------------------------------

def cmd_gen(args) -> None:
    started = time.time()
    cfg = _read_config(args.config)
    splits = cfg.pop("splits", {"train": 500, "dev": 100, "test": 100})
    for key, flag in (("seed", args.seed),):
        if flag is not None:
            cfg[key] = flag
    for name in ("train", "dev", "test"):
        value = getattr(args, f"n_{name}")
        if value is not None:
            splits[name] = value
    known = {f.name for f in fields(CorpusConfig)}
    if set(cfg) - known:
        raise UsageError(f"unknown corpus config keys: {sorted(set(cfg) - known)}")
    for key in ("duration_range", "severity_range", "events_per_utt_range", "event_duration_range", "degradation_types"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    if any(int(n) < 0 for n in splits.values()):
        raise UsageError("split sizes must be non-negative")
    corpus_cfg = CorpusConfig(**{**cfg, "n_utterances": max(1, sum(int(n) for n in splits.values()))})
    try:
        corpus_cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if sum(int(n) for n in splits.values()) < 1:
        raise UsageError("zero utterances requested")
    out = _prepare_dir(args.out)
    outputs, index = {}, 0
    for name, n in splits.items():
        utts = [generate_utterance(corpus_cfg, index + i) for i in range(int(n))]
        index += int(n)
        for kind, p in write_split(out, name, utts).items():
            outputs[f"{name}_{kind}"] = p
    _manifest(out / "run_manifest.json", args, started, {}, outputs, corpus_cfg.seed, args.config)


def _train_config(args) -> TrainConfig:
    raw = _read_config(args.config)
    try:
        cfg = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    overrides = {
        "epochs": args.epochs,
        "lr_start": args.lr_start,
        "lr_end": args.lr_end,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "decoder_variant": args.decoder,
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    if args.lambda_emb is not None:
        cfg.weights.lambda_emb = args.lambda_emb
    if args.lambda_scores is not None:
        cfg.weights.lambda_scores = args.lambda_scores
    try:
        cfg.validate()
        cfg.model_config()
        if cfg.decoder_variant not in ("linear", "recurrent"):
            raise ValueError(f"unknown decoder {cfg.decoder_variant!r}")
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def cmd_train(args) -> None:
    started = time.time()
    cfg = _train_config(args)
    corpus = Path(args.corpus)
    try:
        train_set = read_split(corpus, "train")
        dev_set = read_split(corpus, "dev")
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read corpus {corpus}: {exc}") from exc
    out = _prepare_dir(args.out)
    log_path = out / "train_log.jsonl"
    tmp_log = log_path.with_name(log_path.name + ".tmp")
    with open(tmp_log, "w") as logf:
        result = train(train_set, dev_set, cfg, lambda rec: logf.write(json.dumps(rec, sort_keys=True) + "\n"))
    os.replace(tmp_log, log_path)
    save_checkpoint(out / "final.ckpt", result.model, result.steps, {"train_config": cfg.to_dict()})
    save_checkpoint(out / "best.ckpt", result.best_model(), result.steps, {"best_epoch": result.best_epoch})
    _write_json(out / "history.json", result.history)
    _write_json(out / "train_config.json", cfg.to_dict())
    _manifest(
        out / "run_manifest.json",
        args,
        started,
        {"corpus": corpus},
        {"final": out / "final.ckpt", "best": out / "best.ckpt", "log": log_path},
        cfg.seed,
        args.config,
    )


def _wav_list(args) -> list[Path]:
    paths = [Path(p) for p in args.wavs]
    if args.manifest:
        with open(args.manifest, newline="") as f:
            base = Path(args.manifest).parent
            paths += [base / row["path"] for row in csv.DictReader(f)]
    if not paths:
        raise UsageError("no input WAV files")
    return paths


def cmd_score(args) -> None:
    started = time.time()
    paths = _wav_list(args)
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    out = _prepare_dir(args.out)
    frame_rows, utt_rows = [], []
    for p in paths:
        try:
            w = preprocess(load_waveform(p))
        except (OSError, ValueError) as exc:
            raise UsageError(f"{p}: {exc}") from exc
        q, y, _ = forward(model, w)
        frame_rows.extend([p.stem, i, repr(float(s))] for i, s in enumerate(q))
        utt_rows.append([p.stem, repr(float(y))])
    _atomic_write(out / "frame_scores.csv", _csv_text(["utt_id", "frame_idx", "score"], frame_rows, f"fps={FPS}"))
    _atomic_write(out / "utterance_scores.csv", _csv_text(["utt_id", "score"], utt_rows))
    _manifest(
        out / "run_manifest.json",
        args,
        started,
        {"checkpoint": args.checkpoint, "n_wavs": len(paths)},
        {"frame_scores": out / "frame_scores.csv", "utterance_scores": out / "utterance_scores.csv"},
    )


def cmd_detect(args) -> None:
    started = time.time()
    cfg = DetectionConfig(
        target_far=args.far, smooth_window_s=args.window, min_duration_s=args.min_duration, threshold=args.threshold
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    scores, fps = read_frame_scores(args.scores)
    if cfg.threshold is not None:
        theta = cfg.threshold
    else:
        if args.reference is None:
            raise UsageError("need --reference scores or an explicit --threshold")
        ref, _ = read_frame_scores(args.reference)
        if not ref:
            raise UsageError("empty reference")
        theta = select_threshold(list(ref.values()), cfg.target_far)
    rows = []
    for utt in sorted(scores):
        ev = detect_scores(scores[utt], theta, cfg, fps, utt)
        for (a, b), low in zip(ev, segment_min_scores(scores[utt], ev, fps)):
            rows.append([utt, repr(a), repr(b), repr(low)])
    out = _prepare_file(args.out)
    _atomic_write(out, _csv_text(["utt_id", "onset_s", "offset_s", "min_frame_score"], rows, f"threshold={theta!r}"))
    _manifest(
        out.with_name(out.name + ".manifest.json"),
        args,
        started,
        {"scores": args.scores, "reference": args.reference},
        {"detections": out},
    )


def _read_gts(path) -> dict[str, EventList]:
    try:
        return read_events_csv(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_tune(args) -> None:
    started = time.time()
    scores, fps = read_frame_scores(args.scores)
    if not scores:
        raise UsageError("empty dev scores")
    gts = _read_gts(args.gts)
    det = DetectionConfig(smooth_window_s=args.window, min_duration_s=args.min_duration)
    results = []
    for rho_dtc, rho_gtc in args.rho or [RHO_1, RHO_2]:
        cfg = EvalConfig(rho_dtc, rho_gtc)
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        theta, rep = tune_threshold(scores, gts, cfg, det, fps)
        results.append({"rho_dtc": rho_dtc, "rho_gtc": rho_gtc, "threshold": theta, **rep.to_dict()})
    out = _prepare_file(args.out)
    _write_json(out, results)
    _manifest(out.with_name(out.name + ".manifest.json"), args, started, {"scores": args.scores, "gts": args.gts}, {"tune": out})


def cmd_eval(args) -> None:
    started = time.time()
    dets = _read_gts(args.detections)
    gts = _read_gts(args.gts)
    theta = _comment_fields(args.detections).get("threshold")
    reports = []
    for rho_dtc, rho_gtc in args.rho or [RHO_1, RHO_2]:
        cfg = EvalConfig(rho_dtc, rho_gtc)
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        rep = intersection_eval(dets, gts, cfg)
        reports.append(
            {"rho_dtc": rho_dtc, "rho_gtc": rho_gtc, "threshold": float(theta) if theta else None, **rep.to_dict()}
        )
    out = _prepare_file(args.out)
    _write_json(out, reports)
    _manifest(
        out.with_name(out.name + ".manifest.json"), args, started, {"detections": args.detections, "gts": args.gts}, {"report": out}
    )


# --- argument parsing ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="framesqa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic degradation corpus")
    g.add_argument("--config", help="JSON corpus config (CorpusConfig fields plus 'splits')")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-dev", type=int)
    g.add_argument("--n-test", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a frame-quality model")
    t.add_argument("--config", help="JSON training config (TrainConfig fields)")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr-start", type=float)
    t.add_argument("--lr-end", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lambda-emb", type=float)
    t.add_argument("--lambda-scores", type=float)
    t.add_argument("--decoder", choices=["linear", "recurrent"])
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("score", help="write frame and utterance scores")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", help="split CSV with a 'path' column")
    s.add_argument("--out", required=True)
    s.add_argument("wavs", nargs="*")
    s.set_defaults(func=cmd_score)

    for name, func, helptext in (("detect", cmd_detect, "localize low-quality segments"),):
        d = sub.add_parser(name, help=helptext)
        d.add_argument("--scores", required=True)
        d.add_argument("--reference", help="clean reference frame scores for calibration")
        d.add_argument("--far", type=float, default=0.01)
        d.add_argument("--threshold", type=float, help="skip calibration and use this threshold")
        d.add_argument("--window", type=float, default=0.2)
        d.add_argument("--min-duration", type=float, default=0.1)
        d.add_argument("--out", required=True)
        d.set_defaults(func=func)

    u = sub.add_parser("tune", help="tune the detection threshold on dev data")
    u.add_argument("--scores", required=True)
    u.add_argument("--gts", required=True)
    u.add_argument("--rho", type=_parse_rho, action="append", help="DTC,GTC (repeatable)")
    u.add_argument("--window", type=float, default=0.2)
    u.add_argument("--min-duration", type=float, default=0.1)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_tune)

    e = sub.add_parser("eval", help="intersection-based precision/recall/F1")
    e.add_argument("--detections", required=True)
    e.add_argument("--gts", required=True)
    e.add_argument("--rho", type=_parse_rho, action="append", help="DTC,GTC (repeatable)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"framesqa {args.command}: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, RuntimeError) as exc:
        print(f"framesqa {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
