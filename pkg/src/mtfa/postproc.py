"""From frame probabilities to timestamped detections."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .features import Spectrogram


@dataclass(frozen=True)
class EventAnnotation:
    """One event of class ``label`` spanning ``[onset, offset)`` seconds."""

    label: str
    onset: float
    offset: float

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"event onset must be >= 0, got {self.onset}")
        if not self.offset > self.onset:
            raise ValueError(f"event offset {self.offset} must exceed onset {self.onset}")


def pad_time_axis(spec: Spectrogram, multiple: int = 8) -> tuple[Spectrogram, int]:
    """Repeat the last frame until the frame count divides by ``multiple``."""
    t = spec.n_frames
    extra = (-t) % multiple
    if extra == 0:
        return spec, t
    tail = np.repeat(spec.frames[-1:], extra, axis=0)
    padded = np.concatenate([spec.frames, tail], axis=0)
    return Spectrogram(padded, spec.hop_seconds, spec.window_seconds), t


def binarize(probs, threshold: float) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(probs) >= threshold).astype(np.int8)


def median_filter(binary, width: int = 27) -> np.ndarray:
    """Majority vote over a centred window, replicating the edge values.

    For 0/1 input this is exactly a median filter of odd ``width``.
    """
    if width < 1 or width % 2 == 0:
        raise ValueError(f"median filter width must be odd and positive, got {width}")
    b = np.asarray(binary, dtype=np.int64)
    if b.size == 0:
        return b.astype(np.int8)
    half = width // 2
    padded = np.pad(b, half, mode="edge")
    csum = np.concatenate([[0], np.cumsum(padded)])
    window_sums = csum[width:] - csum[:-width]
    return (window_sums > half).astype(np.int8)


def median_width_frames(median_ms: float, hop_seconds: float = 0.020) -> int:
    """Window length in frames for a filter of ``median_ms``, forced odd."""
    width = int(round(median_ms / 1000.0 / hop_seconds))
    return max(1, width if width % 2 else width + 1)


def extract_events(binary, hop_seconds: float, label: str) -> list[EventAnnotation]:
    """Each maximal run of ones over frames ``a..b`` becomes ``[a*hop, (b+1)*hop)``."""
    b = np.asarray(binary, dtype=np.int8)
    edges = np.diff(np.concatenate([[0], b, [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return [
        EventAnnotation(label, round(a * hop_seconds, 9), round(e * hop_seconds, 9))
        for a, e in zip(starts, stops)
    ]


# ----------------------------------------------------------------- TSV files


def write_event_tsv(path, rows: Iterable[tuple[str, Optional[EventAnnotation]]]) -> None:
    """Write ``file, onset, offset, label`` lines with 6-decimal timestamps.

    A row whose event is ``None`` becomes a bare file-name line, marking a
    clip that was processed but holds no event.
    """
    lines = [
        f"{name}\n" if ev is None else f"{name}\t{ev.onset:.6f}\t{ev.offset:.6f}\t{ev.label}\n"
        for name, ev in rows
    ]
    Path(path).write_text("".join(lines))


def read_event_tsv(path) -> dict[str, list[EventAnnotation]]:
    """Parse an annotation/detection TSV into events grouped by file name.

    Lines holding only a file name (a clip with no event) register the file
    with an empty list.
    """
    events: dict[str, list[EventAnnotation]] = defaultdict(list)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row or not row[0].strip() or row[0].startswith("#"):
                continue
            name = row[0]
            if len(row) == 1 or all(not c.strip() for c in row[1:]):
                events.setdefault(name, [])
                continue
            if len(row) < 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            events[name].append(EventAnnotation(row[3], float(row[1]), float(row[2])))
    return dict(events)


def flatten(events: Mapping[str, list[EventAnnotation]]) -> list[tuple[str, EventAnnotation]]:
    return [(name, ev) for name in sorted(events) for ev in sorted(events[name], key=lambda e: (e.onset, e.label))]
