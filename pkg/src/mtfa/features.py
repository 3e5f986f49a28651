"""WAV loading and log-mel spectrogram extraction.

Frames are 40 ms Hamming windows advanced by 20 ms. A clip of ``n`` samples
yields ``n // hop + 1`` frames, the tail being zero-padded so the last frames
are complete; a 30 s clip at 44.1 kHz gives 1501 frames.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HOP_SECONDS = 0.020
WINDOW_SECONDS = 0.040
N_MELS = 128
LOG_FLOOR = 1e-10

_SPEC_MAGIC = b"MTFASPEC"
_SPEC_VERSION = 1


class AudioLoadError(IOError):
    """The file is not a readable PCM16 / float32 RIFF WAVE file."""


class FilterbankError(ValueError):
    """A mel filter has no positive weight at the requested FFT resolution."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """``T x D`` log-mel matrix; frame ``t`` covers ``[t*hop, t*hop + window)``."""

    frames: np.ndarray
    hop_seconds: float = HOP_SECONDS
    window_seconds: float = WINDOW_SECONDS

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


# ------------------------------------------------------------------ WAV I/O


def load_wav(path) -> AudioClip:
    """Read a mono or stereo PCM16 / IEEE float32 WAV file as mono floats.

    Raises:
        AudioLoadError: on a malformed header, an unsupported encoding, or a
            data chunk shorter than its declared size.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise AudioLoadError(f"{path}: {exc.strerror or exc}") from exc
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioLoadError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise AudioLoadError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            if len(body) < size:
                raise AudioLoadError(f"{path}: data chunk truncated ({len(body)} of {size} bytes)")
            data = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise AudioLoadError(f"{path}: missing fmt chunk")
    if data is None:
        raise AudioLoadError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if tag == 0xFFFE:  # WAVE_FORMAT_EXTENSIBLE: trust the bit depth
        tag = 3 if bits == 32 else 1
    if channels not in (1, 2):
        raise AudioLoadError(f"{path}: {channels} channels unsupported")
    if rate <= 0:
        raise AudioLoadError(f"{path}: invalid sample rate {rate}")
    if tag == 1 and bits == 16:
        samples = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        samples = np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise AudioLoadError(f"{path}: unsupported encoding (format {tag}, {bits} bit)")
    if len(samples) % channels:
        raise AudioLoadError(f"{path}: partial sample frame in data chunk")
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise AudioLoadError(f"{path}: non-finite samples")
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip) -> None:
    """Write a mono 16-bit PCM WAV; samples are clipped to [-1, 1)."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(clip.sample_rate))
        fh.writeframes(pcm.tobytes())


# ------------------------------------------------------------------ framing


def frame_params(sample_rate: int) -> tuple[int, int, int]:
    """Return ``(hop, window, n_fft)`` in samples for ``sample_rate``."""
    hop = int(round(HOP_SECONDS * sample_rate))
    window = int(round(WINDOW_SECONDS * sample_rate))
    n_fft = 1 << (window - 1).bit_length()
    return hop, window, n_fft


def frame_count(n_samples: int, sample_rate: int) -> int:
    hop, _, _ = frame_params(sample_rate)
    return n_samples // hop + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft_bins: int, n_mels: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters over ``n_fft_bins`` one-sided FFT bins.

    Centres are equally spaced in mel between 0 Hz and Nyquist, each triangle
    reaching zero at its neighbours' centres. Every row is scaled so its
    largest weight is exactly 1.

    Raises:
        FilterbankError: if some filter covers no FFT bin.
    """
    n_fft = 2 * (n_fft_bins - 1)
    bin_hz = np.arange(n_fft_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lo) / (mid - lo)
    falling = (hi - bin_hz) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    peaks = bank.max(axis=1)
    empty = np.flatnonzero(peaks <= 0)
    if empty.size:
        raise FilterbankError(
            f"mel filter {int(empty[0])} of {n_mels} has no FFT bin "
            f"(n_fft={n_fft}, rate={sample_rate})"
        )
    return bank / peaks[:, None]


def logmel(clip: AudioClip, n_mels: int = N_MELS) -> Spectrogram:
    """Log mel filterbank energies, ``frame_count x n_mels``."""
    hop, window, n_fft = frame_params(clip.sample_rate)
    n_frames = frame_count(len(clip.samples), clip.sample_rate)
    padded = np.zeros((n_frames - 1) * hop + window)
    padded[: len(clip.samples)] = clip.samples
    frames = np.lib.stride_tricks.sliding_window_view(padded, window)[::hop]
    spectrum = np.fft.rfft(frames * np.hamming(window), n=n_fft, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    bank = mel_filterbank(n_fft // 2 + 1, n_mels, clip.sample_rate)
    energies = power @ bank.T
    return Spectrogram(np.log(np.maximum(energies, LOG_FLOOR)))


# ---------------------------------------------------------------- cache file


def save_spectrogram(path, spec: Spectrogram) -> None:
    t, d = spec.frames.shape
    header = _SPEC_MAGIC + struct.pack("<IIId", _SPEC_VERSION, t, d, spec.hop_seconds)
    Path(path).write_bytes(header + spec.frames.astype("<f4").tobytes())


def load_spectrogram(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    head = len(_SPEC_MAGIC) + struct.calcsize("<IIId")
    if len(raw) < head or raw[: len(_SPEC_MAGIC)] != _SPEC_MAGIC:
        raise AudioLoadError(f"{path}: not a spectrogram cache file")
    version, t, d, hop = struct.unpack("<IIId", raw[len(_SPEC_MAGIC) : head])
    if version != _SPEC_VERSION:
        raise AudioLoadError(f"{path}: unsupported cache version {version}")
    body = raw[head:]
    if len(body) != 4 * t * d:
        raise AudioLoadError(f"{path}: expected {t}x{d} frames, found {len(body)} bytes")
    frames = np.frombuffer(body, dtype="<f4").reshape(t, d).astype(np.float64)
    return Spectrogram(frames, hop_seconds=hop)
