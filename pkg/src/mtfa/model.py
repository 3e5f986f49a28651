"""The MTFA network and its checkpoint format.

Data flow for a batch of log-mel chunks ``(N, T, D)``::

    stem (conv 1->C, BN, ReLU)
      -> feature branch (2 residual blocks)         = F
      -> mask branch (Hourglass over 4 scales) -> sigmoid = M
    A = (1 + M) * F
      -> mean over frequency -> (N, T, C)
      -> 2-layer bidirectional GRU -> (N, T, 2U)
      -> linear 2U->U, ReLU, dropout, linear U->1, sigmoid -> (N, T)

Feature maps are channel-last ``(N, T, D, C)`` throughout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import numcore as nc
from .features import Spectrogram
from .numcore import BatchNormState, ContractError, Parameter, Tensor
from .postproc import pad_time_axis

_CKPT_MAGIC = b"MTFACKPT"
_CKPT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint does not fit the architecture it describes."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the full-size model."""

    channels: int = 64
    units: int = 64
    gru_layers: int = 2
    n_mels: int = 128
    chunk_frames: int = 256
    chunk_shift: int = 128
    n_scales: int = 4
    dropout_rate: float = 0.3
    threshold: float = 0.4
    class_name: str = "event"
    use_mask_branch: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def time_multiple(self) -> int:
        return 2 ** (self.n_scales - 1)

    def validate(self) -> None:
        mult = self.time_multiple
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if self.chunk_frames % mult or self.n_mels % mult:
            raise ValueError(
                f"chunk_frames ({self.chunk_frames}) and n_mels ({self.n_mels}) must be divisible by {mult}"
            )
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if min(self.channels, self.units, self.gru_layers) < 1:
            raise ValueError("channels, units and gru_layers must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


@dataclass
class MtfaOutput:
    """Branch outputs for one clip, each ``C x T x D``."""

    F: np.ndarray
    M: np.ndarray
    A: np.ndarray
    mask_scales: list[np.ndarray] = field(default_factory=list)


@dataclass
class FramePrediction:
    probs: np.ndarray
    hop_seconds: float = 0.020


# ------------------------------------------------------------------- layers


class Module:
    """Walks attributes to enumerate parameters and batchnorm buffers."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module, BatchNormState)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, value in self._children():
            if isinstance(value, BatchNormState):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Parameter:
    bound = np.sqrt(1.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, shape).astype(dtype))


class Conv3x3(Module):
    def __init__(self, cin: int, cout: int, rng, dtype, bias: bool = True):
        fan_in = 9 * cin
        self.weight = _uniform(rng, (3, 3, cin, cout), fan_in, dtype)
        self.bias = _uniform(rng, (cout,), fan_in, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nc.conv2d_nhwc(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.stats = BatchNormState.fresh(channels, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return nc.batchnorm_nhwc(x, self.gamma, self.beta, self.stats, training)


class ResidualBlock(Module):
    """``relu(x + bn(conv(relu(bn(conv(x))))))`` with bias-free convolutions."""

    def __init__(self, channels: int, rng, dtype):
        self.conv1 = Conv3x3(channels, channels, rng, dtype, bias=False)
        self.bn1 = BatchNorm(channels, dtype)
        self.conv2 = Conv3x3(channels, channels, rng, dtype, bias=False)
        self.bn2 = BatchNorm(channels, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = nc.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        return nc.relu(nc.add(x, h))


class Stem(Module):
    """Lift the single-channel spectrogram to ``C`` channels."""

    def __init__(self, channels: int, rng, dtype):
        self.conv = Conv3x3(1, channels, rng, dtype)
        self.bn = BatchNorm(channels, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return nc.relu(self.bn(self.conv(x), training))


class FeatureBranch(Module):
    def __init__(self, channels: int, rng, dtype, n_blocks: int = 2):
        self.blocks = [ResidualBlock(channels, rng, dtype) for _ in range(n_blocks)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for block in self.blocks:
            x = block(x, training)
        return x


class MaskBranch(Module):
    """Hourglass: pool down ``n_scales - 1`` times, upsample back, merge skips.

    Encoder stage ``k`` runs a residual block at scale ``(T, D) / 2**k`` and
    then max-pools. Each encoder activation also passes through its own
    residual block on the skip path. The decoder upsamples, adds the skip
    tensor and runs a residual block. A final 3x3 convolution and sigmoid
    give a channel-wise mask in (0, 1).
    """

    def __init__(self, channels: int, n_scales: int, rng, dtype):
        levels = n_scales - 1
        self.encoders = [ResidualBlock(channels, rng, dtype) for _ in range(levels)]
        self.skips = [ResidualBlock(channels, rng, dtype) for _ in range(levels)]
        self.bottleneck = ResidualBlock(channels, rng, dtype)
        self.decoders = [ResidualBlock(channels, rng, dtype) for _ in range(levels)]
        self.out = Conv3x3(channels, channels, rng, dtype)

    def __call__(self, x: Tensor, training: bool, trace: Optional[dict] = None) -> Tensor:
        levels = len(self.encoders)
        skips = []
        h = x
        visited = []
        for k in range(levels):
            h = self.encoders[k](h, training)
            visited.append(h.shape[1:3])
            skips.append(self.skips[k](h, training))
            h = nc.maxpool2d_nhwc(h)
        h = self.bottleneck(h, training)
        visited.append(h.shape[1:3])
        per_scale = {levels: h}
        for k in reversed(range(levels)):
            h = nc.upsample_nearest2_nhwc(h)
            h = self.decoders[k](nc.add(h, skips[k]), training)
            per_scale[k] = h
        if trace is not None:
            trace["scales"] = visited
            trace["per_scale"] = [per_scale[k] for k in range(levels + 1)]
        return nc.sigmoid(self.out(h))


def attend(F: Tensor, M: Tensor) -> Tensor:
    """Residual attention ``(1 + M) * F``."""
    if F.shape != M.shape:
        raise ContractError(f"attend: F {F.shape} and M {M.shape} differ")
    return nc.add(F, nc.mul(M, F))


def temporal_collapse(A: Tensor) -> Tensor:
    """Average the frequency axis: ``(N, T, D, C) -> (N, T, C)``."""
    return nc.mean(A, axis=2)


class GRUDirection(Module):
    def __init__(self, n_in: int, hidden: int, rng, dtype):
        self.w_ih = _uniform(rng, (3 * hidden, n_in), n_in, dtype)
        self.w_hh = _uniform(rng, (3 * hidden, hidden), hidden, dtype)
        self.b_ih = _uniform(rng, (3 * hidden,), hidden, dtype)
        self.b_hh = _uniform(rng, (3 * hidden,), hidden, dtype)

    def __call__(self, seq: Tensor, reverse: bool) -> Tensor:
        return nc.gru_layer(seq, self.w_ih, self.w_hh, self.b_ih, self.b_hh, reverse=reverse)


class RNNHead(Module):
    """Stacked bidirectional GRU, ``(N, T, C) -> (N, T, 2U)``."""

    def __init__(self, n_in: int, units: int, layers: int, rng, dtype):
        self.forward_dirs = []
        self.backward_dirs = []
        for i in range(layers):
            width = n_in if i == 0 else 2 * units
            self.forward_dirs.append(GRUDirection(width, units, rng, dtype))
            self.backward_dirs.append(GRUDirection(width, units, rng, dtype))

    def __call__(self, seq: Tensor, dropout_rate: float, training: bool, rng) -> Tensor:
        for i, (fw, bw) in enumerate(zip(self.forward_dirs, self.backward_dirs)):
            if i > 0:
                seq = nc.dropout(seq, dropout_rate, training, rng)
            seq = nc.concat([fw(seq, False), bw(seq, True)], axis=-1)
        return seq


class Classifier(Module):
    def __init__(self, units: int, rng, dtype):
        self.fc1_w = _uniform(rng, (units, 2 * units), 2 * units, dtype)
        self.fc1_b = _uniform(rng, (units,), 2 * units, dtype)
        self.fc2_w = _uniform(rng, (1, units), units, dtype)
        self.fc2_b = _uniform(rng, (1,), units, dtype)

    def __call__(self, h: Tensor, dropout_rate: float, training: bool, rng) -> Tensor:
        z = nc.relu(nc.linear(h, self.fc1_w, self.fc1_b))
        z = nc.dropout(z, dropout_rate, training, rng)
        z = nc.linear(z, self.fc2_w, self.fc2_b)
        return nc.sigmoid(nc.reshape(z, z.shape[:-1]))


# -------------------------------------------------------------------- model


class MtfaModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dtype = np.dtype(config.dtype)
        c = config.channels
        self.stem = Stem(c, rng, dtype)
        self.feature = FeatureBranch(c, rng, dtype)
        self.mask = MaskBranch(c, config.n_scales, rng, dtype) if config.use_mask_branch else None
        self.rnn = RNNHead(c, config.units, config.gru_layers, rng, dtype)
        self.head = Classifier(config.units, rng, dtype)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def __call__(
        self,
        batch,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        trace: Optional[dict] = None,
    ) -> Tensor:
        """Frame probabilities ``(N, T)`` for a spectrogram batch ``(N, T, D)``.

        ``T`` and ``D`` must be multiples of ``2**(n_scales - 1)``. When
        ``trace`` is a dict it receives the branch tensors and mask-branch
        activations per scale, plus the recurrent output ``H``.
        """
        x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        if x.ndim != 3:
            raise ContractError(f"expected a (N, T, D) batch, got {x.shape}")
        mult = self.config.time_multiple
        if x.shape[1] % mult or x.shape[2] % mult:
            raise ContractError(f"T={x.shape[1]} and D={x.shape[2]} must be multiples of {mult}; pad first")
        inp = batch if isinstance(batch, Tensor) else Tensor(x.astype(self.dtype))
        inp = nc.reshape(inp, x.shape + (1,))
        h = self.stem(inp, training)
        F = self.feature(h, training)
        if self.mask is not None:
            M = self.mask(h, training, trace)
            A = attend(F, M)
        else:
            M = None
            A = F
        if trace is not None:
            trace.update(F=F, M=M, A=A)
        seq = self.rnn(temporal_collapse(A), self.config.dropout_rate, training, rng)
        if trace is not None:
            trace["H"] = seq
        return self.head(seq, self.config.dropout_rate, training, rng)

    def predict(self, spec: Spectrogram, want_attention: bool = False):
        """Eval-mode probabilities for a whole clip, cropped to its frame count.

        Returns a :class:`FramePrediction`, plus an :class:`MtfaOutput` in
        ``C x T x D`` layout when ``want_attention`` is set.
        """
        padded, original = pad_time_axis(spec, self.config.time_multiple)
        trace = {} if want_attention else None
        probs = self(padded.frames[None], training=False, trace=trace)
        pred = FramePrediction(probs.data[0, :original].astype(np.float64), spec.hop_seconds)
        if not want_attention:
            return pred

        def chw(t: Tensor) -> np.ndarray:
            return np.ascontiguousarray(t.data[0, :original].transpose(2, 0, 1))

        scales = [np.ascontiguousarray(t.data[0].transpose(2, 0, 1)) for t in trace.get("per_scale", [])]
        M = trace["M"]
        out = MtfaOutput(
            F=chw(trace["F"]),
            M=chw(M) if M is not None else np.zeros_like(chw(trace["F"])),
            A=chw(trace["A"]),
            mask_scales=scales,
        )
        return pred, out

    def state_records(self) -> list[tuple[str, np.ndarray]]:
        records = [(name, p.data) for name, p in self.named_parameters()]
        for name, st in self.named_buffers():
            records.append((f"{name}.running_mean", st.mean))
            records.append((f"{name}.running_var", st.var))
        return records

    def load_records(self, records: dict[str, np.ndarray]) -> None:
        """Copy named arrays into the model, validating names and shapes."""
        expected = dict(self.state_records())
        for name in records:
            if name not in expected:
                raise CheckpointError(f"unexpected parameter record {name!r}")
        for name, ref in expected.items():
            if name not in records:
                raise CheckpointError(f"missing parameter record {name!r}")
            if records[name].shape != ref.shape:
                raise CheckpointError(
                    f"parameter record {name!r} has shape {records[name].shape}, architecture expects {ref.shape}"
                )
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.data = records[name].astype(self.dtype).copy()
        for name, st in self.named_buffers():
            st.mean = records[f"{name}.running_mean"].astype(self.dtype).copy()
            st.var = records[f"{name}.running_var"].astype(self.dtype).copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state_records()}


# --------------------------------------------------------------- checkpoint


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, config: ModelConfig, records) -> None:
    """Write ``records`` (name -> array, or a model) with its config block."""
    if isinstance(records, MtfaModel):
        records = records.state_records()
    elif isinstance(records, dict):
        records = list(records.items())
    parts = [_CKPT_MAGIC, struct.pack("<I", _CKPT_VERSION), _pack_str(config.to_json())]
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.asarray(arr)
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(8) != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an MTFA checkpoint")
    version = u32()
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig.from_json(take(u32()).decode("utf-8"))
    records = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        rank = u32()
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        records[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
    return config, records


def load_checkpoint(path) -> MtfaModel:
    """Rebuild the model described by a checkpoint and load its weights.

    Raises:
        CheckpointError: if a record is missing, unexpected or misshapen.
    """
    config, records = read_checkpoint(path)
    model = MtfaModel(config)
    model.load_records(records)
    return model
