"""Command-line workflows: synthesize, featurize, train, infer, evaluate.

Exit codes: 0 success, 2 usage, 3 I/O failure, 4 training configuration,
5 checkpoint/architecture mismatch. Set ``MTFA_LOG_LEVEL`` (e.g. ``DEBUG``)
to change verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .evaluation import DEFAULT_COLLAR, score
from .features import AudioLoadError, Spectrogram, load_spectrogram, load_wav, logmel, save_spectrogram
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .postproc import (
    binarize,
    extract_events,
    median_filter,
    median_width_frames,
    read_event_tsv,
    write_event_tsv,
)
from .synthesis import MixSpec, SynthesisConfigError, generate_dataset, synthetic_sources
from .training import CLASS_DEFAULTS, TrainConfig, TrainingConfigError, build_clips, train

log = logging.getLogger("mtfa")

EXIT_USAGE, EXIT_IO, EXIT_TRAIN, EXIT_CKPT = 2, 3, 4, 5
SPEC_SUFFIX = ".mtfaspec"


class UsageError(Exception):
    pass


# ------------------------------------------------------------ arg validators


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


def _open_unit(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return v


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


# ---------------------------------------------------------------- manifests


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def write_manifest(path: Path, command: str, config: dict, seed, inputs, outputs, started: float) -> None:
    """Record everything needed to rerun ``command``; keys are sorted."""
    manifest = {
        "command": command,
        "config": _jsonable(config),
        "seed": seed,
        "inputs": _jsonable(inputs),
        "outputs": _jsonable(outputs),
        "tool_version": __version__,
        "wall_clock_seconds": round(time.perf_counter() - started, 3),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _wavs(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"audio directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".wav")


# --------------------------------------------------------------- synthesize


def _load_pool(directory: Path) -> list:
    return [(p.name, load_wav(p)) for p in _wavs(directory)]


def cmd_synthesize(args) -> int:
    started = time.perf_counter()
    try:
        spec = MixSpec(tuple(args.ebr), args.presence, args.seed, args.clip_seconds)
    except SynthesisConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.events_dir:
        root = Path(args.events_dir)
        if not root.is_dir():
            raise FileNotFoundError(f"events directory {root} does not exist")
        events = {d.name: _load_pool(d) for d in sorted(root.iterdir()) if d.is_dir()}
        if not args.backgrounds_dir:
            raise UsageError("--backgrounds-dir is required with --events-dir")
        backgrounds = _load_pool(Path(args.backgrounds_dir))
    else:
        log.info("no --events-dir given; using synthetic beep/burst/sweep sources")
        events, backgrounds = synthetic_sources(
            args.sample_rate, background_seconds=max(60.0, 2 * args.clip_seconds), seed=args.seed
        )
    if args.classes:
        missing = set(args.classes) - set(events)
        if missing:
            raise UsageError(f"--classes names unknown event classes: {sorted(missing)}")
        events = {k: events[k] for k in args.classes}
    out = Path(args.out)
    try:
        records = generate_dataset(events, backgrounds, args.count, spec, out, args.background_only)
    except SynthesisConfigError as exc:
        raise UsageError(str(exc)) from exc
    n_clipped = sum(r.clipped for r in records)
    log.info("wrote %d mixtures to %s (%d soft-clipped)", len(records), out, n_clipped)
    write_manifest(
        out / "run_manifest.json", "synthesize",
        {**asdict(spec), "count": args.count, "background_only": args.background_only,
         "classes": sorted(events), "sample_rate": args.sample_rate},
        args.seed, {"events_dir": args.events_dir, "backgrounds_dir": args.backgrounds_dir},
        {"audio": out / "audio", "annotations": out / "annotations.tsv", "mixtures": out / "mixtures.tsv"},
        started,
    )
    return 0


# ---------------------------------------------------------------- featurize


def cmd_featurize(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = []
    written = []
    for wav in _wavs(Path(args.wav_dir)):
        try:
            spec = logmel(load_wav(wav))
        except AudioLoadError as exc:
            log.error("%s", exc)
            failed.append(wav.name)
            continue
        target = out / (wav.stem + SPEC_SUFFIX)
        save_spectrogram(target, spec)
        written.append(target.name)
    write_manifest(
        out / "run_manifest.json", "featurize", {"n_mels": 128, "failed": failed}, None,
        {"wav_dir": args.wav_dir}, {"spectrograms": written}, started,
    )
    if failed:
        log.error("could not read %d file(s): %s", len(failed), ", ".join(failed))
        return EXIT_IO
    log.info("wrote %d spectrograms to %s", len(written), out)
    return 0


# -------------------------------------------------------------------- train


def _spectrograms(data: Path, features: Optional[Path]) -> dict[str, Spectrogram]:
    """Spectrograms keyed by WAV name, from the cache when one exists."""
    wavs = _wavs(data / "audio")
    specs = {}
    for wav in wavs:
        cached = features / (wav.stem + SPEC_SUFFIX) if features else None
        specs[wav.name] = load_spectrogram(cached) if cached and cached.exists() else logmel(load_wav(wav))
    return specs


def resolve_class_defaults(class_name: str, dropout: Optional[float], threshold: Optional[float]) -> tuple[float, float]:
    """Per-class dropout/threshold defaults; unknown classes must give both."""
    known = CLASS_DEFAULTS.get(class_name)
    if known is None and (dropout is None or threshold is None):
        raise TrainingConfigError(f"class {class_name!r} has no defaults; pass --dropout and --threshold")
    dropout = known["dropout_rate"] if dropout is None else dropout
    threshold = known["threshold"] if threshold is None else threshold
    return dropout, threshold


def cmd_train(args) -> int:
    started = time.perf_counter()
    dropout, threshold = resolve_class_defaults(args.class_name, args.dropout, args.threshold)
    model_cfg = ModelConfig(
        channels=args.channels, units=args.units, dropout_rate=dropout, threshold=threshold,
        class_name=args.class_name, seed=args.seed,
    )
    cfg = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, patience=args.patience,
        max_epochs=args.max_epochs, seed=args.seed, validation_fraction=args.validation_fraction,
        stop_train_loss=args.stop_train_loss,
    )
    data = Path(args.data)
    ann_path = data / "annotations.tsv"
    if not ann_path.exists():
        raise FileNotFoundError(f"{ann_path} not found")
    features = Path(args.features) if args.features else data / "features"
    clips = build_clips(_spectrograms(data, features), read_event_tsv(ann_path), args.class_name)
    if not any(c.labels.any() for c in clips):
        log.warning("no %r events in %s; the model can only learn silence", args.class_name, ann_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(clips, model_cfg, cfg, log_path=out / "train_log.jsonl")
    save_checkpoint(out / "model.ckpt", model_cfg, result.best_state)
    if result.history:
        from .plotting import loss_curve

        loss_curve(result.history, out / "loss.png")
    log.info("best epoch %d, validation BCE %.5f", result.best_epoch, result.best_val_loss)
    write_manifest(
        out / "run_manifest.json", "train",
        {"model": asdict(model_cfg), "training": asdict(cfg), "best_epoch": result.best_epoch,
         "best_val_loss": result.best_val_loss, "train_ids": result.train_ids, "val_ids": result.val_ids},
        args.seed, {"data": data, "features": features},
        {"checkpoint": out / "model.ckpt", "log": out / "train_log.jsonl"}, started,
    )
    return 0


# -------------------------------------------------------------------- infer


def _pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM, min-max scaled, low frequencies at the bottom."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pixels = np.round(255 * scaled).astype(np.uint8)
    h, w = pixels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def dump_attention(directory: Path, stem: str, spec: Spectrogram, out) -> list[Path]:
    """Spectrogram plus one channel-averaged mask map per scale, as PGM and .npy."""
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    # decoder activations pass through a sigmoid so every scale reads as a mask
    maps = [out.M] + [1.0 / (1.0 + np.exp(-s)) for s in out.mask_scales[1:]]
    _pgm(directory / f"{stem}_spectrogram.pgm", spec.frames.T[::-1])
    np.save(directory / f"{stem}_spectrogram.npy", spec.frames)
    for k, m in enumerate(maps):
        mean = m.mean(axis=0)
        _pgm(directory / f"{stem}_mask_scale{k}.pgm", mean.T[::-1])
        np.save(directory / f"{stem}_mask_scale{k}.npy", m)
        written.append(directory / f"{stem}_mask_scale{k}.pgm")
    from .plotting import attention_panels

    attention_panels(spec.frames, maps, directory / f"{stem}_attention.png", title=stem)
    return written


def cmd_infer(args) -> int:
    started = time.perf_counter()
    model = load_checkpoint(args.ckpt)
    cfg = model.config
    threshold = cfg.threshold if args.threshold is None else args.threshold
    width = median_width_frames(args.median_ms)
    rows = []
    wavs = _wavs(Path(args.wav_dir))
    for wav in wavs:
        spec = logmel(load_wav(wav))
        if spec.n_mels != cfg.n_mels:
            raise CheckpointError(f"{wav.name}: {spec.n_mels} mel bands, checkpoint expects {cfg.n_mels}")
        if args.dump_attention:
            pred, out = model.predict(spec, want_attention=True)
            dump_attention(Path(args.dump_attention), wav.stem, spec, out)
        else:
            pred = model.predict(spec)
        binary = median_filter(binarize(pred.probs, threshold), width)
        events = extract_events(binary, pred.hop_seconds, cfg.class_name)
        log.debug("%s: %d frames, %d events", wav.name, len(pred.probs), len(events))
        rows.extend([(wav.name, e) for e in events] or [(wav.name, None)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_event_tsv(out, rows)
    write_manifest(
        out.with_suffix(".manifest.json"), "infer",
        {"threshold": threshold, "median_ms": args.median_ms, "median_frames": width,
         "class_name": cfg.class_name, "dump_attention": args.dump_attention},
        cfg.seed, {"ckpt": args.ckpt, "wav_dir": args.wav_dir, "clips": [w.name for w in wavs]},
        {"detections": out}, started,
    )
    log.info("wrote detections for %d clips to %s", len(wavs), out)
    return 0


# ----------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    for p in (args.ref, args.det):
        if not Path(p).exists():
            raise FileNotFoundError(f"{p} not found")
    refs, dets = read_event_tsv(args.ref), read_event_tsv(args.det)
    labels = args.classes or None
    report = score(refs, dets, args.collar_ms / 1000.0, labels=labels)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        from .plotting import score_bars

        score_bars(report, out.with_suffix(".png"))
        write_manifest(
            out.with_suffix(".manifest.json"), "evaluate", {"collar_ms": args.collar_ms, "classes": labels},
            None, {"ref": args.ref, "det": args.det}, {"report": out, "figure": out.with_suffix(".png")}, started,
        )
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtfa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="generate labelled mixtures")
    p.add_argument("--events-dir", help="one sub-directory of WAV files per event class")
    p.add_argument("--backgrounds-dir", help="directory of background WAV files")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive_int, default=10, help="mixtures per class")
    p.add_argument("--background-only", type=int, default=0, help="extra clips without events")
    p.add_argument("--ebr", type=_float_list, default=[-6.0, 0.0, 6.0], help="EBR choices in dB, e.g. -6,0,6")
    p.add_argument("--presence", type=_probability, default=0.99, help="probability a mixture holds its event")
    p.add_argument("--clip-seconds", type=float, default=30.0)
    p.add_argument("--sample-rate", type=int, default=44100, help="for synthetic sources")
    p.add_argument("--classes", nargs="+", help="restrict to these event classes")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("featurize", help="cache log-mel spectrograms")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train one binary detector")
    p.add_argument("--data", required=True, help="dataset directory with audio/ and annotations.tsv")
    p.add_argument("--features", help="spectrogram cache (default: DATA/features)")
    p.add_argument("--class", dest="class_name", required=True,
                   help="babycry, glassbreak, gunshot, beep, sweep, burst or a custom name")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--dropout", type=float, help="default depends on the class")
    p.add_argument("--threshold", type=_open_unit, help="default depends on the class")
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--max-epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--stop-train-loss", type=float, help="stop once the epoch training BCE falls below this")
    p.add_argument("--channels", type=_positive_int, default=64)
    p.add_argument("--units", type=_positive_int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="detect events in WAV files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--out", required=True, help="detection TSV")
    p.add_argument("--threshold", type=_open_unit, help="default: the checkpoint's class threshold")
    p.add_argument("--median-ms", type=float, default=540.0)
    p.add_argument("--dump-attention", metavar="DIR", help="write spectrogram and mask maps per clip")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="event-based ER and F1")
    p.add_argument("--ref", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--collar-ms", type=float, default=1000 * DEFAULT_COLLAR)
    p.add_argument("--classes", nargs="+", help="score these classes (default: all seen)")
    p.add_argument("--out", help="report TSV; a bar chart is written next to it")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("MTFA_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        log.error("%s", exc)
        return EXIT_USAGE
    except TrainingConfigError as exc:
        log.error("training configuration: %s", exc)
        return EXIT_TRAIN
    except CheckpointError as exc:
        log.error("checkpoint: %s", exc)
        return EXIT_CKPT
    except (OSError, AudioLoadError) as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
