"""Differentiable operations.

Image-like tensors inside the network are batched and channel-last,
``(N, H, W, C)``; that layout turns a 3x3 convolution into nine contiguous
matrix products. :func:`conv2d`, :func:`maxpool2d`, :func:`upsample_nearest2`
and :func:`batchnorm2d` accept the ``C x H x W`` layout and delegate to the
``*_nhwc`` kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ContractError, Tensor, as_tensor, make_result  # noqa: F401

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BCE_CLAMP = 1e-7


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractError(msg)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    _check(a.shape == b.shape, f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_result(t, (x,), lambda g: (g * (1 - t * t),))


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    _check(0.0 <= rate < 1.0, f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    _check(rng is not None, "dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


# ------------------------------------------------------------------ structure


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),)
    )


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return make_result(
        np.concatenate([t.data for t in xs], axis=axis),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[index]), (x,), backward)


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return make_result(x.data.mean(axis=axis), (x,), backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    shape = x.shape
    return make_result(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(shape, g, dtype=x.dtype),),
    )


# ---------------------------------------------------------------- dense layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    _check(weight.ndim == 2, f"linear: weight must be 2-D, got {weight.shape}")
    n_out, n_in = weight.shape
    _check(x.shape[-1] == n_in, f"linear: input width {x.shape[-1]} != weight fan-in {n_in}")
    _check(bias.shape == (n_out,), f"linear: bias shape {bias.shape} != ({n_out},)")
    xd, wd = x.data, weight.data

    def backward(g):
        g2 = g.reshape(-1, n_out)
        return (g @ wd, g2.T @ xd.reshape(-1, n_in), g2.sum(axis=0))

    return make_result(xd @ wd.T + bias.data, (x, weight, bias), backward)


# ------------------------------------------------------------ convolution (NHWC)


def conv2d_nhwc(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.

    ``x`` is ``(N, H, W, C_in)``, ``weight`` is ``(3, 3, C_in, C_out)``;
    ``bias`` may be omitted.
    """
    _check(x.ndim == 4, f"conv2d: input must be (N, H, W, C), got {x.shape}")
    _check(weight.ndim == 4 and weight.shape[:2] == (3, 3), f"conv2d: kernel must be 3x3, got {weight.shape}")
    n, h, w, cin = x.shape
    _check(weight.shape[2] == cin, f"conv2d: weight expects {weight.shape[2]} input channels, input has {cin}")
    cout = weight.shape[3]
    if bias is not None:
        _check(bias.shape == (cout,), f"conv2d: bias shape {bias.shape} != ({cout},)")
    wp = w + 2
    rows = (h + 3) * wp
    # whole batch as one flat zero-padded image stack; the extra zero row
    # keeps every shifted window inside the buffer. Output row r reads input
    # rows r + off; rows that straddle two images are discarded.
    xp = np.zeros((n, h + 3, wp, cin), dtype=x.dtype)
    xp[:, 1 : h + 1, 1 : w + 1] = x.data
    flat = xp.reshape(n * rows, cin)
    length = n * rows - (2 * wp + 2)
    kd = weight.data
    acc = np.zeros((n * rows, cout), dtype=x.dtype)
    head = acc[:length]
    for dy in range(3):
        for dx in range(3):
            off = dy * wp + dx
            head += flat[off : off + length] @ kd[dy, dx]
    out = acc.reshape(n, h + 3, wp, cout)[:, :h, :w]
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gp = np.zeros((n, h + 3, wp, cout), dtype=g.dtype)
        gp[:, :h, :w] = g
        gf = gp.reshape(n * rows, cout)[:length]
        dflat = np.zeros_like(flat) if x.requires_grad else None
        dk = np.empty_like(kd)
        for dy in range(3):
            for dx in range(3):
                off = dy * wp + dx
                win = flat[off : off + length]
                if dflat is not None:
                    dflat[off : off + length] += gf @ kd[dy, dx].T
                dk[dy, dx] = win.T @ gf
        dx_ = None
        if dflat is not None:
            dx_ = np.ascontiguousarray(dflat.reshape(n, h + 3, wp, cin)[:, 1 : h + 1, 1 : w + 1])
        if bias is None:
            return (dx_, dk)
        return (dx_, dk, g.sum(axis=(0, 1, 2)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(out), parents, backward)


def maxpool2d_nhwc(x: Tensor) -> Tensor:
    """Disjoint 2x2 max pooling; ties route the gradient to the first element."""
    _check(x.ndim == 4, f"maxpool2d: input must be (N, H, W, C), got {x.shape}")
    n, h, w, c = x.shape
    _check(h % 2 == 0 and w % 2 == 0, f"maxpool2d: spatial dims must be even, got {h}x{w}")
    win = (
        x.data.reshape(n, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h // 2, w // 2, c, 4)
    )
    arg = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, arg, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, h // 2, w // 2, c, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg, g[..., None], axis=-1)
        gx = gw.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return (np.ascontiguousarray(gx).reshape(n, h, w, c),)

    return make_result(out, (x,), backward)


def upsample_nearest2_nhwc(x: Tensor) -> Tensor:
    _check(x.ndim == 4, f"upsample: input must be (N, H, W, C), got {x.shape}")
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return make_result(
        out, (x,), lambda g: (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)
    )


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm_nhwc(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool
) -> Tensor:
    """Per-channel normalization over every axis except the last."""
    c = x.shape[-1]
    _check(gamma.shape == (c,) and beta.shape == (c,), f"batchnorm: expected ({c},) affine params")
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    ones = np.ones(m, dtype=x.dtype)
    gd, bd = gamma.data, beta.data
    if training:
        mu = (ones @ x2) / m
        xhat = x2 - mu
        var = (ones @ (xhat * xhat)) / m
        inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
        xhat *= inv
        state.mean = (1 - state.momentum) * state.mean + state.momentum * mu
        state.var = (1 - state.momentum) * state.var + state.momentum * var
    else:
        inv = (1.0 / np.sqrt(state.var + state.eps)).astype(x.dtype)
        xhat = (x2 - state.mean.astype(x.dtype)) * inv
    out = xhat * gd
    out += bd

    def backward(g):
        g2 = g.reshape(-1, c)
        dbeta = ones @ g2
        dgamma = ones @ (g2 * xhat)
        dx = None
        if x.requires_grad:
            if training:
                dx = g2 - dbeta / m
                dx -= xhat * (dgamma / m)
                dx *= gd * inv
            else:
                dx = g2 * (gd * inv)
            dx = dx.reshape(x.shape)
        return (dx, dgamma, dbeta)

    return make_result(out.reshape(x.shape), (x, gamma, beta), backward)


# ------------------------------------------------- C x H x W facing wrappers


def _to_nhwc(x: Tensor) -> Tensor:
    _check(x.ndim == 3, f"expected a C x H x W tensor, got shape {x.shape}")
    return reshape(transpose(x, (1, 2, 0)), (1,) + tuple(x.shape[1:]) + (x.shape[0],))


def _from_nhwc(x: Tensor) -> Tensor:
    return transpose(reshape(x, x.shape[1:]), (2, 0, 1))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 same-size convolution of a ``C_in x H x W`` map.

    ``weight`` is ``C_out x C_in x 3 x 3``.
    """
    _check(weight.ndim == 4 and weight.shape[2:] == (3, 3), f"conv2d: kernel must be 3x3, got {weight.shape}")
    _check(x.ndim == 3 and weight.shape[1] == x.shape[0],
           f"conv2d: weight expects {weight.shape[1]} input channels, input shape {x.shape}")
    k = transpose(weight, (2, 3, 1, 0))
    return _from_nhwc(conv2d_nhwc(_to_nhwc(x), k, bias))


def maxpool2d(x: Tensor) -> Tensor:
    return _from_nhwc(maxpool2d_nhwc(_to_nhwc(x)))


def upsample_nearest2(x: Tensor) -> Tensor:
    return _from_nhwc(upsample_nearest2_nhwc(_to_nhwc(x)))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    return _from_nhwc(batchnorm_nhwc(_to_nhwc(x), gamma, beta, state, training))


# ------------------------------------------------------------------ recurrent


def gru_layer(
    seq: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    reverse: bool = False,
) -> Tensor:
    """Single-direction GRU over ``(N, T, N_in)`` or ``(T, N_in)`` input.

    Gate rows of the weight matrices are ordered reset, update, candidate.
    The initial hidden state is zero. With ``reverse`` the sequence is run
    back to front and the outputs are returned in the original time order.
    """
    squeeze = seq.ndim == 2
    x = seq.data[None] if squeeze else seq.data
    _check(x.ndim == 3, f"gru: input must be (T, N_in) or (N, T, N_in), got {seq.shape}")
    nb, steps, n_in = x.shape
    hid = w_hh.shape[1]
    _check(w_ih.shape == (3 * hid, n_in), f"gru: w_ih shape {w_ih.shape} != {(3 * hid, n_in)}")
    _check(w_hh.shape == (3 * hid, hid), f"gru: w_hh shape {w_hh.shape} != {(3 * hid, hid)}")
    _check(b_ih.shape == (3 * hid,) and b_hh.shape == (3 * hid,), "gru: bias shapes must be (3H,)")
    if reverse:
        x = x[:, ::-1]
    x = np.ascontiguousarray(x)
    wi, wh, bh = w_ih.data, w_hh.data, b_hh.data
    gi = x @ wi.T + b_ih.data
    dtype = gi.dtype
    hs = np.zeros((nb, steps + 1, hid), dtype=dtype)
    rs = np.empty((nb, steps, hid), dtype=dtype)
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    ghn = np.empty_like(rs)
    whT = wh.T.copy()
    for t in range(steps):
        h = hs[:, t]
        gh = h @ whT + bh
        r = _sigmoid(gi[:, t, :hid] + gh[:, :hid])
        z = _sigmoid(gi[:, t, hid : 2 * hid] + gh[:, hid : 2 * hid])
        cand = np.tanh(gi[:, t, 2 * hid :] + r * gh[:, 2 * hid :])
        hs[:, t + 1] = (1 - z) * cand + z * h
        rs[:, t], zs[:, t], ns[:, t], ghn[:, t] = r, z, cand, gh[:, 2 * hid :]
    out = hs[:, 1:]
    if reverse:
        out = out[:, ::-1]
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def backward(g):
        g = g[None] if squeeze else g
        if reverse:
            g = g[:, ::-1]
        dgi = np.empty((nb, steps, 3 * hid), dtype=dtype)
        dwh = np.zeros_like(wh)
        dbh = np.zeros_like(bh)
        dh_next = np.zeros((nb, hid), dtype=dtype)
        for t in range(steps - 1, -1, -1):
            r, z, cand, hprev = rs[:, t], zs[:, t], ns[:, t], hs[:, t]
            dh = g[:, t] + dh_next
            dcand = dh * (1 - z) * (1 - cand * cand)
            dz = dh * (hprev - cand) * z * (1 - z)
            dr = dcand * ghn[:, t] * r * (1 - r)
            dgh = np.concatenate([dr, dz, dcand * r], axis=1)
            dgi[:, t] = np.concatenate([dr, dz, dcand], axis=1)
            dwh += dgh.T @ hprev
            dbh += dgh.sum(axis=0)
            dh_next = dh * z + dgh @ wh
        dx = dgi @ wi
        if reverse:
            dx = dx[:, ::-1]
        dx = np.ascontiguousarray(dx[0] if squeeze else dx)
        dwi = dgi.reshape(-1, 3 * hid).T @ x.reshape(-1, n_in)
        return (dx, dwi, dwh, dgi.sum(axis=(0, 1)), dbh)

    return make_result(out, (seq, w_ih, w_hh, b_ih, b_hh), backward)


# ----------------------------------------------------------------------- loss


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    _check(y.shape == pred.shape, f"bce: target shape {y.shape} != prediction shape {pred.shape}")
    _check(bool(np.all((y == 0) | (y == 1))), "bce: targets must be 0 or 1")
    p = np.clip(pred.data, BCE_CLAMP, 1 - BCE_CLAMP)
    inside = (pred.data >= BCE_CLAMP) & (pred.data <= 1 - BCE_CLAMP)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))

    def backward(g):
        return (g * inside * (p - y) / (p * (1 - p)) / n,)

    return make_result(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


__all__ = [
    "BatchNormState",
    "add",
    "as_tensor",
    "batchnorm2d",
    "batchnorm_nhwc",
    "bce_loss",
    "concat",
    "conv2d",
    "conv2d_nhwc",
    "dropout",
    "gru_layer",
    "linear",
    "maxpool2d",
    "maxpool2d_nhwc",
    "mean",
    "mul",
    "relu",
    "reshape",
    "sigmoid",
    "slice_axis",
    "tanh",
    "total",
    "transpose",
    "upsample_nearest2",
    "upsample_nearest2_nhwc",
]
