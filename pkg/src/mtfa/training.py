"""Chunked training of one binary MTFA model per event class."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numcore as nc
from .features import Spectrogram
from .model import MtfaModel, ModelConfig
from .postproc import EventAnnotation

log = logging.getLogger(__name__)

# dropout / threshold per class; the synthetic stand-ins borrow their
# counterparts' values
CLASS_DEFAULTS = {
    "babycry": {"dropout_rate": 0.3, "threshold": 0.4},
    "glassbreak": {"dropout_rate": 0.3, "threshold": 0.2},
    "gunshot": {"dropout_rate": 0.4, "threshold": 0.4},
    "beep": {"dropout_rate": 0.3, "threshold": 0.4},
    "sweep": {"dropout_rate": 0.3, "threshold": 0.2},
    "burst": {"dropout_rate": 0.4, "threshold": 0.4},
}


class TrainingConfigError(ValueError):
    """The dataset or training configuration cannot produce a model."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    patience: int = 10
    max_epochs: int = 40
    seed: int = 0
    validation_fraction: float = 0.1
    # stop as soon as the epoch's training loss drops below this value
    stop_train_loss: Optional[float] = None
    # wall-clock budget in seconds, checked after each epoch
    max_seconds: Optional[float] = None

    def __post_init__(self):
        if self.patience < 1:
            raise TrainingConfigError("patience must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise TrainingConfigError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise TrainingConfigError("batch_size and max_epochs must be positive")
        if self.learning_rate < 0:
            raise TrainingConfigError("learning_rate must be non-negative")


@dataclass
class LabeledClip:
    clip_id: str
    spec: Spectrogram
    labels: np.ndarray


@dataclass
class LabeledChunk:
    features: np.ndarray
    labels: np.ndarray
    clip_id: str
    start: int


def label_frames(
    n_frames: int,
    hop_seconds: float,
    annotations: Sequence[EventAnnotation],
    window_seconds: float = 0.040,
) -> np.ndarray:
    """1 where the frame centre ``t*hop + window/2`` lies in ``[onset, offset)``."""
    labels = np.zeros(n_frames, dtype=np.int8)
    centres = np.arange(n_frames) * hop_seconds + window_seconds / 2
    # a hair of slack so centres that equal a boundary on paper stay on it
    eps = 1e-9
    for ev in annotations:
        if ev.onset > ev.offset:
            raise ValueError(f"annotation onset {ev.onset} after offset {ev.offset}")
        labels[(centres >= ev.onset - eps) & (centres < ev.offset - eps)] = 1
    return labels


def chunk(spec: Spectrogram, labels: np.ndarray, size: int = 256, shift: int = 128, clip_id: str = "") -> list[LabeledChunk]:
    """Cut overlapping fixed-size chunks, padding the tail with the last frame."""
    total = spec.n_frames
    if len(labels) != total:
        raise ValueError(f"{len(labels)} labels for {total} frames")
    if total <= size:
        starts = [0]
    else:
        starts = [k * shift for k in range(math.ceil((total - size) / shift) + 1)]
    chunks = []
    for s in starts:
        feats = spec.frames[s : s + size]
        labs = labels[s : s + size]
        short = size - len(feats)
        if short:
            feats = np.concatenate([feats, np.repeat(feats[-1:], short, axis=0)])
            labs = np.concatenate([labs, np.repeat(labs[-1:], short)])
        chunks.append(LabeledChunk(feats, labs.astype(np.int8), clip_id, s))
    return chunks


def adam_step(params: Sequence[nc.Parameter], cfg: TrainConfig) -> None:
    """Bias-corrected Adam update from each parameter's accumulated ``grad``."""
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m *= b1
        p.adam_m += (1 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1 - b2) * g * g
        m_hat = p.adam_m / (1 - b1**t)
        v_hat = p.adam_v / (1 - b2**t)
        p.data -= (cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(p.data.dtype)


def split_clips(clips: Sequence[LabeledClip], cfg: TrainConfig) -> tuple[list[LabeledClip], list[LabeledClip]]:
    """Seeded shuffle, then hold out ``validation_fraction`` of the clips."""
    if len(clips) < 2:
        raise TrainingConfigError(f"need at least 2 clips for a train/validation split, got {len(clips)}")
    order = np.random.default_rng([cfg.seed, 1]).permutation(len(clips))
    n_val = max(1, int(round(cfg.validation_fraction * len(clips))))
    n_val = min(n_val, len(clips) - 1)
    val = [clips[i] for i in sorted(order[:n_val])]
    train = [clips[i] for i in sorted(order[n_val:])]
    return train, val


def _stack(chunks: Sequence[LabeledChunk], dtype) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([c.features for c in chunks]).astype(dtype)
    y = np.stack([c.labels for c in chunks]).astype(dtype)
    return x, y


def evaluate_loss(model: MtfaModel, chunks: Sequence[LabeledChunk], batch_size: int) -> float:
    """Mean eval-mode BCE over ``chunks`` (weighted by chunk)."""
    total = 0.0
    for i in range(0, len(chunks), batch_size):
        x, y = _stack(chunks[i : i + batch_size], model.dtype)
        loss = nc.bce_loss(model(x, training=False), y)
        total += float(loss.data) * len(x)
    return total / len(chunks)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainResult:
    config: ModelConfig
    best_state: dict
    best_epoch: int
    best_val_loss: float
    history: list[EpochRecord] = field(default_factory=list)
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)

    def model(self) -> MtfaModel:
        m = MtfaModel(self.config)
        m.load_records(self.best_state)
        return m


def early_stop_epoch(val_losses: Sequence[float], patience: int) -> tuple[int, int]:
    """Replay the stopping rule; returns ``(stop_epoch, best_epoch)``, 1-based."""
    best, best_epoch = math.inf, 0
    for epoch, loss in enumerate(val_losses, 1):
        if loss < best:
            best, best_epoch = loss, epoch
        elif epoch - best_epoch >= patience:
            return epoch, best_epoch
    return len(val_losses), best_epoch


def train(
    clips: Sequence[LabeledClip],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    log_path=None,
) -> TrainResult:
    """Train one binary model; keep the weights of the best validation epoch.

    Each epoch shuffles the training chunks, runs mini-batches of
    ``batch_size`` through a train-mode forward, BCE and Adam, then scores
    the validation chunks in eval mode. Training stops once the validation
    loss has not improved for ``patience`` epochs, at ``max_epochs``, when
    ``stop_train_loss`` is reached, or once ``max_seconds`` have elapsed.
    """
    if not clips:
        raise TrainingConfigError("dataset is empty")
    train_clips, val_clips = split_clips(clips, cfg)
    size, shift = model_cfg.chunk_frames, model_cfg.chunk_shift
    train_chunks = [c for clip in train_clips for c in chunk(clip.spec, clip.labels, size, shift, clip.clip_id)]
    val_chunks = [c for clip in val_clips for c in chunk(clip.spec, clip.labels, size, shift, clip.clip_id)]
    if not val_chunks:
        raise TrainingConfigError("validation split is empty")

    model = MtfaModel(model_cfg)
    params = model.parameters()
    rng = np.random.default_rng([cfg.seed, 2])
    log_fh = open(log_path, "w") if log_path else None
    history: list[EpochRecord] = []
    best_val, best_epoch, best_state = math.inf, 0, model.snapshot()
    started = time.perf_counter()
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_chunks))
            running = 0.0
            for i in range(0, len(order), cfg.batch_size):
                batch = [train_chunks[j] for j in order[i : i + cfg.batch_size]]
                x, y = _stack(batch, model.dtype)
                for p in params:
                    p.zero_grad()
                with nc.Tape() as tape:
                    loss = nc.bce_loss(model(x, training=True, rng=rng), y)
                tape.backward(loss)
                adam_step(params, cfg)
                running += float(loss.data) * len(batch)
            train_loss = running / len(train_chunks)
            val_loss = evaluate_loss(model, val_chunks, cfg.batch_size)
            rec = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0)
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(asdict(rec)) + "\n")
                log_fh.flush()
            log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, train_loss, val_loss, rec.seconds)
            if val_loss < best_val:
                best_val, best_epoch, best_state = val_loss, epoch, model.snapshot()
            elif epoch - best_epoch >= cfg.patience:
                break
            if cfg.stop_train_loss is not None and train_loss < cfg.stop_train_loss:
                break
            if cfg.max_seconds is not None and time.perf_counter() - started > cfg.max_seconds:
                log.warning("time budget of %.0fs exhausted after epoch %d", cfg.max_seconds, epoch)
                break
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(
        model_cfg, best_state, best_epoch, best_val, history,
        [c.clip_id for c in train_clips], [c.clip_id for c in val_clips],
    )


def build_clips(
    spectrograms: dict[str, Spectrogram],
    annotations: dict[str, list[EventAnnotation]],
    class_name: str,
) -> list[LabeledClip]:
    """Frame labels for ``class_name`` on every spectrogram, sorted by clip id."""
    clips = []
    for clip_id in sorted(spectrograms):
        spec = spectrograms[clip_id]
        events = [e for e in annotations.get(clip_id, []) if e.label == class_name]
        labels = label_frames(spec.n_frames, spec.hop_seconds, events, spec.window_seconds)
        clips.append(LabeledClip(clip_id, spec, labels))
    return clips
