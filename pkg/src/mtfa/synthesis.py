"""Labelled mixture generation and synthetic stand-in audio.

A mixture places one scaled event at a random onset inside a background
excerpt. The event gain is chosen so that the RMS of the scaled event over
its full extent sits ``ebr_db`` decibels above the RMS of the background
clip; the gain, onset and ratio are written to a manifest for auditing.

The synthetic sources let the whole pipeline run without external audio:
``beep`` (amplitude-modulated tone, long and narrowband), ``burst``
(exponentially decaying noise transient) and ``sweep`` (fast broadband chirp).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.signal import chirp

from .features import AudioClip, write_wav
from .postproc import EventAnnotation, write_event_tsv

log = logging.getLogger(__name__)

DEFAULT_DURATIONS = {"beep": 2.25, "burst": 1.32, "sweep": 1.16}
EVENT_KINDS = tuple(DEFAULT_DURATIONS)
PEAK = 0.9
BACKGROUND_RMS = 0.05


class PlacementError(ValueError):
    """The event does not fit inside the background at the requested onset."""


class SynthesisConfigError(ValueError):
    pass


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def ebr_db(event: np.ndarray, gain: float, background: np.ndarray) -> float:
    """Event-to-background ratio of ``gain * event`` over ``background``, in dB."""
    return 20.0 * math.log10(gain * rms(event) / rms(background))


# ---------------------------------------------------------- synthetic sources


def synth_event(kind: str, duration_s: Optional[float] = None, sample_rate: int = 44100, seed: int = 0) -> AudioClip:
    if kind not in DEFAULT_DURATIONS:
        raise ValueError(f"unknown event kind {kind!r}; choose from {EVENT_KINDS}")
    duration_s = DEFAULT_DURATIONS[kind] if duration_s is None else duration_s
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    if kind == "beep":
        carrier = rng.uniform(400.0, 700.0)
        rate = rng.uniform(3.0, 6.0)
        envelope = 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        x = envelope * (np.sin(2 * np.pi * carrier * t) + 0.3 * np.sin(4 * np.pi * carrier * t))
    elif kind == "burst":
        # amplitude e^(-4t/d): energy at the end is e^-8 of the start
        x = rng.standard_normal(n) * np.exp(-4.0 * t / duration_s)
    else:
        f0 = rng.uniform(300.0, 800.0)
        f1 = min(rng.uniform(12000.0, 16000.0), 0.45 * sample_rate)
        period = duration_s / 4
        x = chirp(np.mod(t, period), f0=f0, t1=period, f1=f1, method="logarithmic")
        x = x * (1.0 - 0.5 * t / duration_s)
    # short fade avoids a click at the boundaries
    fade = min(n // 2, int(0.005 * sample_rate))
    if fade:
        ramp = np.linspace(0.0, 1.0, fade)
        x[:fade] *= ramp
        x[n - fade :] *= ramp[::-1]
    peak = np.max(np.abs(x)) if n else 0.0
    if peak > 0:
        x = x * (PEAK / peak)
    return AudioClip(x, sample_rate)


def synth_background(duration_s: float, sample_rate: int = 44100, seed: int = 0) -> AudioClip:
    """Pink-ish noise: random-phase low-frequency partials plus faint white noise."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    freqs = np.exp(rng.uniform(np.log(30.0), np.log(3000.0), 48))
    phases = rng.uniform(0, 2 * np.pi, 48)
    amps = 1.0 / np.sqrt(freqs)
    x = np.zeros(n)
    for f, p, a in zip(freqs, phases, amps):
        x += a * np.sin(2 * np.pi * f * t + p)
    x /= rms(x) if n else 1.0
    x += 0.1 * rng.standard_normal(n)
    if n:
        x *= BACKGROUND_RMS / rms(x)
    return AudioClip(x, sample_rate)


# -------------------------------------------------------------------- mixing


@dataclass
class MixResult:
    clip: AudioClip
    annotation: EventAnnotation
    gain: float
    clipped: bool


def mix(event: AudioClip, background: AudioClip, ebr: float, onset_s: float, label: str = "event") -> MixResult:
    """Add ``event`` into ``background`` at ``onset_s`` with the requested EBR.

    The onset is snapped to the nearest sample and the annotation reports the
    exact placement. If the sum leaves [-1, 1] the whole clip is passed
    through ``tanh`` and ``clipped`` is set.

    Raises:
        PlacementError: if the event would run past the end of the background.
    """
    if event.sample_rate != background.sample_rate:
        raise PlacementError("event and background sample rates differ")
    sr = background.sample_rate
    start = int(round(onset_s * sr))
    stop = start + len(event.samples)
    if start < 0 or stop > len(background.samples):
        raise PlacementError(
            f"event of {len(event.samples) / sr:.3f}s at {onset_s:.3f}s exceeds background of {background.duration:.3f}s"
        )
    gain = rms(background.samples) / rms(event.samples) * 10.0 ** (ebr / 20.0)
    out = background.samples.astype(np.float64).copy()
    out[start:stop] += gain * event.samples
    clipped = bool(np.max(np.abs(out)) > 1.0)
    if clipped:
        log.warning("mixture exceeds [-1, 1]; soft-clipping")
        out = np.tanh(out)
    ann = EventAnnotation(label, start / sr, stop / sr)
    return MixResult(AudioClip(out, sr), ann, gain, clipped)


@dataclass
class MixSpec:
    ebr_choices: Sequence[float] = (-6.0, 0.0, 6.0)
    presence_prob: float = 0.99
    seed: int = 0
    clip_seconds: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.presence_prob <= 1.0:
            raise SynthesisConfigError(f"presence probability must lie in [0, 1], got {self.presence_prob}")
        if not self.ebr_choices:
            raise SynthesisConfigError("need at least one EBR value")
        if self.clip_seconds <= 0:
            raise SynthesisConfigError("clip_seconds must be positive")


@dataclass
class MixtureRecord:
    """One row of the mixture manifest."""

    name: str
    label: str
    seed: list = field(default_factory=list)
    background: str = ""
    background_offset: float = 0.0
    event_file: str = ""
    ebr_db: Optional[float] = None
    onset: Optional[float] = None
    offset: Optional[float] = None
    gain: Optional[float] = None
    clipped: bool = False


MANIFEST_FIELDS = [
    "name", "label", "seed", "background", "background_offset",
    "event_file", "ebr_db", "onset", "offset", "gain", "clipped",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return "-".join(map(str, v))
    return str(v)


def plan_mixture(
    rng: np.random.Generator,
    events: Sequence[tuple[str, AudioClip]],
    backgrounds: Sequence[tuple[str, AudioClip]],
    spec: MixSpec,
    present: Optional[bool] = None,
):
    """Draw background excerpt, presence, event, EBR and onset for one mixture."""
    bg_name, bg = backgrounds[rng.integers(len(backgrounds))]
    sr = bg.sample_rate
    n = int(round(spec.clip_seconds * sr))
    if len(bg.samples) < n:
        raise SynthesisConfigError(f"background {bg_name} shorter than {spec.clip_seconds}s")
    bg_start = int(rng.integers(0, len(bg.samples) - n + 1))
    excerpt = AudioClip(bg.samples[bg_start : bg_start + n], sr)
    if present is None:
        present = bool(rng.random() < spec.presence_prob)
    if not present:
        return bg_name, bg_start / sr, excerpt, None
    ev_name, ev = events[rng.integers(len(events))]
    ebr = float(spec.ebr_choices[rng.integers(len(spec.ebr_choices))])
    room = (n - len(ev.samples)) / sr
    if room < 0:
        raise SynthesisConfigError(f"event {ev_name} longer than the clip")
    onset = float(rng.uniform(0.0, room))
    return bg_name, bg_start / sr, excerpt, (ev_name, ev, ebr, onset)


def generate_dataset(
    events: Mapping[str, Sequence[tuple[str, AudioClip]]],
    backgrounds: Sequence[tuple[str, AudioClip]],
    count_per_class: int,
    spec: MixSpec,
    out_dir,
    background_only: int = 0,
) -> list[MixtureRecord]:
    """Write mixtures, ``annotations.tsv`` and ``mixtures.tsv`` under ``out_dir``.

    ``events`` maps a class label to its pool of ``(name, clip)`` sources.
    Mixture ``i`` of class index ``c`` draws from its own generator seeded
    with ``(seed, c, i)``, so output does not depend on generation order.
    ``background_only`` extra clips never contain an event.
    """
    if not backgrounds:
        raise SynthesisConfigError("background pool is empty")
    if not events or any(len(pool) == 0 for pool in events.values()):
        raise SynthesisConfigError("every event class needs at least one source clip")
    out = Path(out_dir)
    audio_dir = out / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for ci, label in enumerate(sorted(events)):
        for i in range(count_per_class):
            jobs.append((f"{label}_{i:04d}", label, [spec.seed, ci, i], None))
    for i in range(background_only):
        jobs.append((f"background_{i:04d}", "", [spec.seed, len(events), i], False))

    records = []
    rows = []
    for name, label, seed, forced in jobs:
        rng = np.random.default_rng(seed)
        pool = events[label] if label else next(iter(events.values()))
        bg_name, bg_off, excerpt, placed = plan_mixture(rng, pool, backgrounds, spec, present=forced)
        rec = MixtureRecord(name=f"{name}.wav", label=label, seed=seed, background=bg_name, background_offset=bg_off)
        clip = excerpt
        if placed is not None:
            ev_name, ev, ebr, onset = placed
            res = mix(ev, excerpt, ebr, onset, label)
            clip = res.clip
            rec.event_file, rec.ebr_db, rec.gain, rec.clipped = ev_name, ebr, res.gain, res.clipped
            rec.onset, rec.offset = res.annotation.onset, res.annotation.offset
            rows.append((rec.name, res.annotation))
        write_wav(audio_dir / rec.name, clip)
        records.append(rec)

    write_event_tsv(out / "annotations.tsv", rows)
    with open(out / "mixtures.tsv", "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, f)) for f in MANIFEST_FIELDS])
    return records


def synthetic_sources(
    sample_rate: int = 44100,
    per_kind: int = 3,
    background_seconds: float = 60.0,
    n_backgrounds: int = 2,
    seed: int = 0,
) -> tuple[dict[str, list[tuple[str, AudioClip]]], list[tuple[str, AudioClip]]]:
    """Event pools for every synthetic kind plus background recordings."""
    events = {
        kind: [
            (f"{kind}_src{j}", synth_event(kind, sample_rate=sample_rate, seed=seed * 1000 + 10 * k + j))
            for j in range(per_kind)
        ]
        for k, kind in enumerate(EVENT_KINDS)
    }
    backgrounds = [
        (f"bg_src{j}", synth_background(background_seconds, sample_rate, seed=seed * 1000 + 500 + j))
        for j in range(n_backgrounds)
    ]
    return events, backgrounds
