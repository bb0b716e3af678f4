"""Dense N×C×H×W tensors with reverse-mode automatic differentiation.

Implements exactly the layer vocabulary the segmentation networks need:
2-D convolution (1x1 and 3x3 kernels), 2x2 max pooling, nearest-neighbor
2x upsampling, ReLU, channel concatenation, elementwise add/multiply,
two-class softmax, and scalar reductions. Operations executed under an
active :class:`Tape` are recorded so :func:`backward` can replay them in
reverse and hand back one gradient per ``requires_grad`` leaf.

Precision is a process-global run configuration (:func:`set_precision`):
64-bit for verification, 32-bit for speed. Never mix modes within a run.
"""

from __future__ import annotations

import threading
from typing import Callable, Dict, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, UsageError

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_active_dtype = np.float64

_tls = threading.local()


def set_precision(mode: str) -> None:
    """Select the global float width, ``"f32"`` or ``"f64"``."""
    global _active_dtype
    if mode not in _PRECISIONS:
        raise ConfigurationError(f"unknown precision mode {mode!r}; expected 'f32' or 'f64'")
    _active_dtype = _PRECISIONS[mode]


def precision() -> str:
    return "f64" if _active_dtype is np.float64 else "f32"


def active_dtype() -> type:
    return _active_dtype


class Tensor:
    """A row-major dense array of floats plus a ``requires_grad`` flag.

    Data is held as a contiguous numpy array in the active precision.
    Tensors are immutable once created, except for in-place optimizer
    updates on parameters.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_active_dtype)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr.copy() if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# A grad function maps the gradient w.r.t. the op output to a tuple of
# gradients w.r.t. the op inputs (None for inputs with no gradient).
GradFn = Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of operations executed while the tape is active.

    Use as a context manager around a forward pass; a tape belongs to one
    logical thread of control at a time. Nested tapes record to the
    innermost one.
    """

    def __init__(self):
        self.entries: list[tuple[tuple[Tensor, ...], Tensor, GradFn]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record_op(inputs: Sequence[Tensor], output: Tensor, grad_fn: GradFn) -> None:
    """Record a differentiable operation on the active tape, if any.

    Extension point for modules that define fused operations (e.g. the
    cross-entropy loss) without adding them to this module's vocabulary.
    """
    tape = _current_tape()
    if tape is not None:
        tape.entries.append((tuple(inputs), output, grad_fn))


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, Tensor]:
    """Reverse-propagate from a scalar loss over a recorded tape.

    Returns a map from each ``requires_grad`` leaf that influenced the
    loss to its gradient tensor. Leaves the loss does not depend on are
    simply absent.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = {id(out) for _, out, _ in tape.entries}
    by_id: dict[int, Tensor] = {}
    for entry_inputs, _, _ in tape.entries:
        for t in entry_inputs:
            by_id[id(t)] = t

    for entry_inputs, out, grad_fn in reversed(tape.entries):
        gout = grads.get(id(out))
        if gout is None:
            continue
        input_grads = grad_fn(gout)
        for t, g in zip(entry_inputs, input_grads):
            if g is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    result: Dict[Tensor, Tensor] = {}
    for key, g in grads.items():
        t = by_id.get(key)
        if t is None or key in produced or not t.requires_grad:
            continue
        result[t] = Tensor(g)
    return result


# ---------------------------------------------------------------------------
# operations


def _check_4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{name} expects an NxCxHxW tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution with a square 1x1 or 3x3 kernel.

    With stride 1 and padding (k-1)//2 the spatial dimensions are
    preserved. Differentiable w.r.t. input, weight, and bias.
    """
    _check_4d(x, "conv2d input")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d weight must be Cout x Cin x k x k, got {weight.shape}")
    k = weight.shape[2]
    if k not in (1, 3):
        raise DimensionError(f"conv2d supports kernel sizes 1 and 3, got {k}")
    n, cin, h, w = x.shape
    cout, cin_w = weight.shape[0], weight.shape[1]
    if cin != cin_w:
        raise DimensionError(
            f"conv2d channel mismatch: input has {cin} channels, weight expects {cin_w}"
        )
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise DimensionError(f"conv2d output would be empty for input {x.shape} and kernel {k}")

    # One patch-matrix copy and a single GEMM each way keeps BLAS busy.
    sn, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(cin, k, k, n, h_out, w_out),
        strides=(sc, sh, sw, sn, stride * sh, stride * sw),
        writeable=False,
    )
    m = n * h_out * w_out
    cols = patches.reshape(cin * k * k, m)
    wmat = weight.data.reshape(cout, cin * k * k)
    out_flat = wmat @ cols  # (Cout, N*L)
    out_data = out_flat.reshape(cout, n, h_out, w_out).transpose(1, 0, 2, 3)
    out_data = out_data + bias.data[None, :, None, None]
    out = Tensor(out_data)

    def grad_fn(gout: np.ndarray) -> tuple:
        go = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(cout, m)
        gb = gout.sum(axis=(0, 2, 3))
        gw = (go @ cols.T).reshape(weight.shape)
        gcols = (wmat.T @ go).reshape(cin, k, k, n, h_out, w_out)
        gxp = np.zeros((cin, n, hp, wp), dtype=gout.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += (
                    gcols[:, i, j]
                )
        gx = gxp.transpose(1, 0, 2, 3)
        if padding:
            gx = gx[:, :, padding : padding + h, padding : padding + w]
        return np.ascontiguousarray(gx), gw, gb

    record_op((x, weight, bias), out, grad_fn)
    return out


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    The gradient routes to the window's argmax; ties break to the first
    element in row-major scan order.
    """
    _check_4d(x, "max_pool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2x2 needs even H and W, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    argmax = windows.argmax(axis=4)
    out = Tensor(np.take_along_axis(windows, argmax[..., None], axis=4)[..., 0])

    def grad_fn(gout: np.ndarray) -> tuple:
        gwin = np.zeros((n, c, h2, w2, 4), dtype=gout.dtype)
        np.put_along_axis(gwin, argmax[..., None], gout[..., None], axis=4)
        gx = gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    record_op((x,), out, grad_fn)
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; each input pixel becomes a 2x2 block."""
    _check_4d(x, "upsample2x")
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def grad_fn(gout: np.ndarray) -> tuple:
        gx = gout.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return (gx,)

    record_op((x,), out, grad_fn)
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient 0 at exactly 0."""
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))

    def grad_fn(gout: np.ndarray) -> tuple:
        return (gout * mask,)

    record_op((x,), out, grad_fn)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NxCxHxW tensors along the channel axis."""
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(
            f"concat_channels needs matching N,H,W: got {a.shape} and {b.shape}"
        )
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def grad_fn(gout: np.ndarray) -> tuple:
        return gout[:, :ca], gout[:, ca:]

    record_op((a, b), out, grad_fn)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def grad_fn(gout: np.ndarray) -> tuple:
        return gout, gout

    record_op((a, b), out, grad_fn)
    return out


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"multiply needs equal shapes, got {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)

    def grad_fn(gout: np.ndarray) -> tuple:
        return gout * b.data, gout * a.data

    record_op((a, b), out, grad_fn)
    return out


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply a tensor by a python scalar."""
    out = Tensor(x.data * factor)

    def grad_fn(gout: np.ndarray) -> tuple:
        return (gout * factor,)

    record_op((x,), out, grad_fn)
    return out


def reduce_sum(x: Tensor) -> Tensor:
    """Sum all elements into a scalar tensor."""
    out = Tensor(x.data.sum())

    def grad_fn(gout: np.ndarray) -> tuple:
        return (np.full_like(x.data, gout.reshape(())),)

    record_op((x,), out, grad_fn)
    return out


def softmax2(x: Tensor) -> Tensor:
    """Pixelwise two-class softmax over the channel axis.

    Numerically stabilized by per-pixel max subtraction, so logits of any
    magnitude produce valid probability pairs summing to 1.
    """
    _check_4d(x, "softmax2")
    if x.shape[1] != 2:
        raise DimensionError(f"softmax2 needs exactly 2 channels, got {x.shape[1]}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def grad_fn(gout: np.ndarray) -> tuple:
        inner = (gout * p).sum(axis=1, keepdims=True)
        return (p * (gout - inner),)

    record_op((x,), out, grad_fn)
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative discrepancy between analytic and central-difference grads.

    ``f`` must be a deterministic tensor-to-scalar function. Returns
    max over elements of |analytic - numeric| / max(1, |analytic|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
    grads = backward(tape, loss)
    analytic = grads[probe].data if probe in grads else np.zeros_like(probe.data)

    numeric = np.empty_like(probe.data)
    flat = probe.data.ravel()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(probe).item()
        flat[i] = orig - step
        down = f(probe).item()
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * step)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
