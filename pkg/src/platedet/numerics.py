"""Dense 4-D tensor math with reverse-mode differentiation.

Every trainable computation in the detector is assembled from the
operations in this module: direct convolution, a handful of elementwise
maps, channel softmax, pooling, separable resampling, concatenation and
reductions. Arrays are always float64 with shape (batch, channels,
height, width); broadcasting is limited to stretching size-1 dimensions.

Gradients are recorded on an explicit tape:

    with Tape() as tape:
        y = conv2d(x, k, padding=1)
        loss = sum_all(mul(y, y))
    backward(loss, tape)

Leaves created with ``requires_grad=True`` accumulate into their
``.grad`` buffer; calling ``backward`` again without zeroing doubles the
gradient. Operations called outside a tape context record nothing and
are pure.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "scalar",
    "conv2d",
    "elementwise",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "log",
    "absolute",
    "clamp_min",
    "softmax_channels",
    "global_avg_pool",
    "resample",
    "concat_channels",
    "slice_channels",
    "sum_all",
    "sum_per_image",
    "mean_all",
    "backward",
    "grad_check",
    "set_debug_finite",
]

# When enabled, every tensor creation asserts that all values are finite.
DEBUG_FINITE = False


def set_debug_finite(enabled: bool) -> None:
    global DEBUG_FINITE
    DEBUG_FINITE = bool(enabled)


class Tensor:
    """A float64 (N, C, H, W) array, optionally a gradient leaf."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise DimensionError(f"tensor must be 4-D (N, C, H, W), got shape {arr.shape}")
        if DEBUG_FINITE and not np.all(np.isfinite(arr)):
            raise ContractError("non-finite values in tensor (debug mode)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named gradient leaf. Names must be unique within a model."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def scalar(value: float) -> Tensor:
    """A (1, 1, 1, 1) constant tensor."""
    return Tensor(np.full((1, 1, 1, 1), float(value)))


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of differentiable operations (a Wengert list).

    Entries are appended in execution order, so every operation's inputs
    were produced earlier or are leaves; ``backward`` walks the list in
    reverse. Use as a context manager around the forward pass.
    """

    def __init__(self):
        # (output tensor, backward closure). Holding the output keeps
        # ids unique for the lifetime of the tape.
        self._entries: list[tuple[Tensor, Callable[[np.ndarray, dict], None]]] = []
        self._flow: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._prev: Tape | None = None

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        global _ACTIVE
        _ACTIVE = self._prev
        return False


_ACTIVE: Tape | None = None


def _flows(t: Tensor) -> bool:
    """True when gradients must be routed through ``t`` on the active tape."""
    return _ACTIVE is not None and (t.requires_grad or id(t) in _ACTIVE._flow)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
    tape = _ACTIVE
    if tape is None:
        return
    for t in inputs:
        if t.requires_grad:
            tape._leaves[id(t)] = t
    tape._flow.add(id(out))
    tape._entries.append((out, backward_fn))


def _add_grad(grads: dict, t: Tensor, g: np.ndarray) -> None:
    tid = id(t)
    if tid in grads:
        grads[tid] = grads[tid] + g
    else:
        grads[tid] = g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` back down to ``shape`` along stretched size-1 dims."""
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d loss / d leaf into every recorded leaf's grad buffer."""
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"loss must be scalar (1, 1, 1, 1), got {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1))}
    for out, fn in reversed(tape._entries):
        g = grads.pop(id(out), None)
        if g is not None:
            fn(g, grads)
    for tid, leaf in tape._leaves.items():
        g = grads.get(tid)
        if g is not None:
            leaf.grad += g


# ---------------------------------------------------------------------------
# Convolution


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> Tensor:
    """Direct 2-D cross-correlation, differentiable in input and kernel.

    Output spatial size is floor((H + 2p - d*(k-1) - 1) / s) + 1. The
    computation loops over kernel taps, each tap a single BLAS matmul,
    so it stays exact (no FFT) while fast enough at desk scale.
    """
    if stride < 1 or dilation < 1 or padding < 0:
        raise ContractError(f"bad conv hyperparameters: stride={stride} padding={padding} dilation={dilation}")
    n, ci, h, w = x.shape
    co, ck, kh, kw = kernel.shape
    if ck != ci:
        raise DimensionError(
            f"kernel expects {ck} input channels but input has {ci} (input {x.shape}, kernel {kernel.shape})")
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"kernel {kernel.shape} does not fit input {x.shape} with padding={padding} dilation={dilation}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    kd = kernel.data
    out = np.zeros((n, co, ho, wo))
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :,
                       u * dilation: u * dilation + (ho - 1) * stride + 1: stride,
                       v * dilation: v * dilation + (wo - 1) * stride + 1: stride]
            out += np.matmul(kd[:, :, u, v], patch.reshape(n, ci, ho * wo)).reshape(n, co, ho, wo)
    result = Tensor(out)

    need_x, need_k = _flows(x), _flows(kernel)
    if not (need_x or need_k):
        return result

    def backward_fn(g: np.ndarray, grads: dict) -> None:
        gmat = g.reshape(n, co, ho * wo)
        gxp = np.zeros_like(xp) if need_x else None
        gk = np.zeros_like(kd) if need_k else None
        for u in range(kh):
            for v in range(kw):
                rows = slice(u * dilation, u * dilation + (ho - 1) * stride + 1, stride)
                cols = slice(v * dilation, v * dilation + (wo - 1) * stride + 1, stride)
                if need_k:
                    patch = xp[:, :, rows, cols].reshape(n, ci, ho * wo)
                    gk[:, :, u, v] = np.tensordot(gmat, patch, axes=([0, 2], [0, 2]))
                if need_x:
                    gxp[:, :, rows, cols] += np.matmul(kd[:, :, u, v].T, gmat).reshape(n, ci, ho, wo)
        if need_x:
            gx = gxp[:, :, padding: padding + h, padding: padding + w] if padding else gxp
            _add_grad(grads, x, gx)
        if need_k:
            _add_grad(grads, kernel, gk)

    _record(result, (x, kernel), backward_fn)
    return result


# ---------------------------------------------------------------------------
# Elementwise maps


def _binary(a: Tensor, b: Tensor, fwd, bwd_a, bwd_b) -> Tensor:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable")
    out = Tensor(fwd(a.data, b.data))
    need_a, need_b = _flows(a), _flows(b)
    if not (need_a or need_b):
        return out

    def backward_fn(g: np.ndarray, grads: dict) -> None:
        if need_a:
            _add_grad(grads, a, _unbroadcast(bwd_a(g), a.shape))
        if need_b:
            _add_grad(grads, b, _unbroadcast(bwd_b(g), b.shape))

    _record(out, (a, b), backward_fn)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.add, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.subtract, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, np.divide,
                   lambda g: g / b.data,
                   lambda g: -g * a.data / (b.data * b.data))


def _unary(x: Tensor, out_data: np.ndarray, grad_of) -> Tensor:
    out = Tensor(out_data)
    if not _flows(x):
        return out

    def backward_fn(g: np.ndarray, grads: dict) -> None:
        _add_grad(grads, x, grad_of(g))

    _record(out, (x,), backward_fn)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0), lambda g: g * mask)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _unary(x, y, lambda g: g * y * (1.0 - y))


def neg(x: Tensor) -> Tensor:
    return _unary(x, -x.data, lambda g: -g)


def log(x: Tensor) -> Tensor:
    return _unary(x, np.log(x.data), lambda g: g / x.data)


def absolute(x: Tensor) -> Tensor:
    return _unary(x, np.abs(x.data), lambda g: g * np.sign(x.data))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor
    return _unary(x, np.where(mask, x.data, floor), lambda g: g * mask)


_UNARY_KINDS = {"relu": relu, "sigmoid": sigmoid, "neg": neg, "log": log, "abs": absolute}
_BINARY_KINDS = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name. Unary kinds reject a second operand."""
    if kind in _UNARY_KINDS:
        if b is not None:
            raise ContractError(f"elementwise {kind!r} takes one operand")
        return _UNARY_KINDS[kind](a)
    if kind in _BINARY_KINDS:
        if b is None:
            raise ContractError(f"elementwise {kind!r} takes two operands")
        return _BINARY_KINDS[kind](a, b)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# Softmax, pooling, resampling, concatenation


def softmax_channels(x: Tensor) -> Tensor:
    """Channel softmax of a pooled (N, C, 1, 1) vector, max-stabilized."""
    n, c, h, w = x.shape
    if (h, w) != (1, 1):
        raise DimensionError(f"softmax_channels needs spatial size 1x1, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_of(g: np.ndarray) -> np.ndarray:
        s = (g * y).sum(axis=1, keepdims=True)
        return y * (g - s)

    return _unary(x, y, grad_of)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel, output (N, C, 1, 1)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _unary(x, out, lambda g: np.ascontiguousarray(np.broadcast_to(g / (h * w), x.shape)))


@lru_cache(maxsize=256)
def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """Row weights for 1-D bilinear resampling, align-corners-false."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        s = (i + 0.5) * scale - 0.5
        s = min(max(s, 0.0), src - 1.0)
        lo = int(np.floor(s))
        hi = min(lo + 1, src - 1)
        f = s - lo
        m[i, lo] += 1.0 - f
        m[i, hi] += f
    return m


@lru_cache(maxsize=256)
def _area_matrix(src: int, dst: int) -> np.ndarray:
    """Row weights for 1-D area averaging; exact block means when dst | src."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        a, b = i * scale, (i + 1) * scale
        for j in range(int(np.floor(a)), min(int(np.ceil(b)), src)):
            m[i, j] = (min(b, j + 1) - max(a, j)) / scale
    return m


def resample(x: Tensor, target_h: int, target_w: int, mode: str) -> Tensor:
    """Separable spatial resampling: bilinear_up or avg_down."""
    if target_h < 1 or target_w < 1:
        raise ContractError(f"target size must be positive, got {target_h}x{target_w}")
    n, c, h, w = x.shape
    if mode == "bilinear_up":
        a, b = _bilinear_matrix(h, target_h), _bilinear_matrix(w, target_w)
    elif mode == "avg_down":
        a, b = _area_matrix(h, target_h), _area_matrix(w, target_w)
    else:
        raise ContractError(f"unknown resample mode {mode!r}")
    out = np.matmul(np.matmul(a, x.data), b.T)
    return _unary(x, out, lambda g: np.matmul(a.T, np.matmul(g, b)))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Channel concatenation; gradients route back slice by slice."""
    if not xs:
        raise ContractError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        tn, _, th, tw = t.shape
        if (tn, th, tw) != (n, h, w):
            raise DimensionError(f"cannot concat shapes {xs[0].shape} and {t.shape}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    needed = [_flows(t) for t in xs]
    if not any(needed):
        return out
    offsets = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward_fn(g: np.ndarray, grads: dict) -> None:
        for t, need, lo, hi in zip(xs, needed, offsets[:-1], offsets[1:]):
            if need:
                _add_grad(grads, t, np.ascontiguousarray(g[:, lo:hi]))

    _record(out, tuple(xs), backward_fn)
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous channel slice [start, stop)."""
    n, c, h, w = x.shape
    if not (0 <= start < stop <= c):
        raise DimensionError(f"channel slice [{start}:{stop}) out of range for {c} channels")
    out_data = np.ascontiguousarray(x.data[:, start:stop])

    def grad_of(g: np.ndarray) -> np.ndarray:
        gx = np.zeros((n, c, h, w))
        gx[:, start:stop] = g
        return gx

    return _unary(x, out_data, grad_of)


# ---------------------------------------------------------------------------
# Reductions


def sum_all(x: Tensor) -> Tensor:
    """Sum over every element, output (1, 1, 1, 1)."""
    out = np.full((1, 1, 1, 1), x.data.sum())
    return _unary(x, out, lambda g: np.full(x.shape, g.reshape(())))


def sum_per_image(x: Tensor) -> Tensor:
    """Sum over channels and space, output (N, 1, 1, 1)."""
    out = x.data.sum(axis=(1, 2, 3), keepdims=True)
    return _unary(x, out, lambda g: np.ascontiguousarray(np.broadcast_to(g, x.shape)))


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, output (1, 1, 1, 1)."""
    size = x.data.size
    out = np.full((1, 1, 1, 1), x.data.mean())
    return _unary(x, out, lambda g: np.full(x.shape, g.reshape(()) / size))


# ---------------------------------------------------------------------------
# Verification


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must map one tensor to a scalar tensor and be pure. The error
    for each element is |analytic - numeric| / max(1, |analytic|,
    |numeric|); the maximum over elements is returned.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    backward(out, tape)
    analytic = probe.grad.copy()

    pert = x.data.copy()
    flat = pert.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(pert)).item()
        flat[i] = orig - eps
        fm = f(Tensor(pert)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * eps)
    numeric = numeric.reshape(analytic.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
