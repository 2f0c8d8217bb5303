"""Dense NCHW tensors with tape-based reverse-mode differentiation.

Only the handful of operations the encoder-decoder needs are provided:
stride-1 convolution, 2x2 max pooling, pixel shuffle, batch normalization,
leaky ReLU, channel dropout, channel concatenation and mean squared error.

Operations executed while a :class:`Tape` is active, and that touch at least
one tensor with ``requires_grad`` set, are appended to the tape together with
a closure computing their vector-Jacobian product.  :func:`backward` replays
the tape in reverse.

    >>> w = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mse_loss(conv2d(x, w, b), y)
    >>> backward(tape, loss)
    >>> w.grad
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: BackwardFn


class Tape:
    """Ordered log of differentiable operations.

    Used as a context manager; while active, every recordable op appends a
    :class:`TapeRecord`.  Tapes nest, the innermost one receives records.
    """

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.records: list[TapeRecord] = []
        self.consumed = False
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def _append(self, rec: TapeRecord) -> None:
        self.records.append(rec)
        self._outputs.add(id(rec.output))


def _active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp: BackwardFn) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._append(TapeRecord(op, inputs, out, vjp))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int) -> np.ndarray:
    b, c = xp.shape[:2]
    if k == 1:
        return xp.transpose(0, 2, 3, 1).reshape(-1, c)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B,C,Ho,Wo,k,k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding and per-channel bias."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if padding not in (0, 1):
        raise ShapeError(f"padding must be 0 or 1, got {padding}")
    if wcin != cin:
        raise ShapeError(f"weight expects {wcin} input channels, input has {cin}")
    k = kh
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"non-positive output extent {ho}x{wo}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))

    def vjp(g: np.ndarray):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (gf.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        db = gf.sum(axis=0) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (gf @ wmat).reshape(b, ho, wo, cin, k, k)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + ho, j:j + wo] += dcols[..., i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return (dx, dw) if bias is None else (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", inputs, out, vjp)


# ---------------------------------------------------------------------------
# resampling


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route to the first row-major element."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g: np.ndarray):
        routed = (np.arange(4) == arg[..., None]) * g[..., None]
        dx = routed.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (dx.astype(g.dtype, copy=False),)

    return _record("maxpool2", (x,), out, vjp)


def _shuffle(a: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = a.shape
    return a.reshape(b, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c // (r * r), h * r, w * r)


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = a.shape
    return a.reshape(b, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """Depth-to-space: ``out[b, c, r*y+dy, r*x+dx] = in[b, c*r*r + dy*r + dx, y, x]``."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle needs channels divisible by {r * r}, got shape {x.shape}")
    out = _shuffle(x.data, r)
    return _record("pixel_shuffle", (x,), out, lambda g: (_unshuffle(g, r),))


def pixel_unshuffle(x: Tensor, r: int = 2) -> Tensor:
    """Space-to-depth, the exact inverse of :func:`pixel_shuffle`."""
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle needs extents divisible by {r}, got shape {x.shape}")
    out = _unshuffle(x.data, r)
    return _record("pixel_unshuffle", (x,), out, lambda g: (_shuffle(g, r),))


# ---------------------------------------------------------------------------
# normalization and activations


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]
    initialized: bool = False

    def __post_init__(self) -> None:
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=DEFAULT_DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=DEFAULT_DTYPE)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In training mode the batch statistics are used and the running estimates
    are updated in place (unbiased variance, as most frameworks do).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    b, c, h, w = x.shape
    if c != state.channels or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm over {c} channels got gamma {gamma.shape}, state for {state.channels}")
    g4 = gamma.data.reshape(1, c, 1, 1)
    n = b * h * w
    if training:
        if n < 2:
            raise ShapeError("batchnorm in training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        rdtype = state.running_mean.dtype
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(rdtype)
        state.running_var = ((1 - m) * state.running_var + m * var * (n / (n - 1))).astype(rdtype)
        state.initialized = True
    else:
        if not state.initialized:
            raise NumericError("batchnorm eval mode used before any running statistics exist")
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def vjp(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * g4
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = inv_std.reshape(1, c, 1, 1) / n * (n * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return _record("batchnorm", (x, gamma, beta), out, vjp)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))
    return _record("leaky_relu", (x,), out, lambda g: (np.where(pos, g, g * g.dtype.type(slope)),))


def dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Inverted channel-dropout mask of shape (B, C, 1, 1)."""
    b, c = shape[:2]
    keep = rng.random((b, c)) >= rate
    return (keep / (1.0 - rate)).astype(dtype).reshape(b, c, 1, 1)


def dropout2d(
    x: Tensor,
    rate: float,
    training: bool,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Zero whole channels per sample with probability ``rate``; identity in eval mode.

    ``mask`` overrides sampling, which makes a training-mode forward pass
    reproducible for gradient checks.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = _as_tensor(x)
    if not training or (rate == 0.0 and mask is None):
        return x
    if mask is None:
        if rng is None:
            raise ConfigError("dropout2d in training mode needs an rng or an explicit mask")
        mask = dropout_mask(x.shape, rate, rng, x.dtype)
    mask = mask.astype(x.dtype, copy=False)
    return _record("dropout2d", (x,), x.data * mask, lambda g: (g * mask,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-d tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _record("concat_channels", (a, b), out, lambda g: (g[:, :c1], g[:, c1:]))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def vjp(g: np.ndarray):
        d = (2.0 / n) * g * diff
        return d, -d

    return _record("mse_loss", (pred, target), out, vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.  Intermediate
    gradients are discarded, and the tape can only be replayed once.
    """
    if tape.consumed:
        raise NumericError("tape has already been consumed by a backward pass")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise NumericError("loss was not produced by an operation on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if not tape.produced(t):
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key].astype(t.dtype, copy=False).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
    tape.records.clear()
