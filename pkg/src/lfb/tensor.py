"""Dense tensor math with tape-recorded reverse-mode gradients.

Values are plain numpy arrays. Every op computes its forward result eagerly
and, when a :class:`Tape` is active and some input requires a gradient,
records a closure that maps the output gradient back onto its inputs.
``Tape.backward`` replays those closures in reverse order. There is no graph
search: the model is a fixed pipeline, so recording order is already a valid
topological order.
"""

from __future__ import annotations

import contextvars
import zlib
from typing import Callable, Sequence

import numpy as np

# Additive mask constant; exp() of this underflows to exactly 0 in float32 and float64.
MASK_NEG = -1e30


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class MaskError(ValueError):
    """A softmax row has no unmasked entry."""


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "lfb_active_tape", default=None
)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.value.dtype})"


class Parameter(Tensor):
    """A learnable tensor. ``decay`` controls whether weight decay applies."""

    __slots__ = ("decay", "frozen")

    def __init__(self, value, name: str | None = None, decay: bool = True):
        super().__init__(np.array(value, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)
        self.decay = decay
        self.frozen = False

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


class Tape:
    """Records backward closures while active (use as a context manager)."""

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._entries.append((out, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.value.size != 1:
                raise ShapeError("backward() without grad needs a scalar loss")
            grad = np.ones_like(loss.value)
        loss.grad = np.asarray(grad, dtype=loss.value.dtype)
        for out, fn in reversed(self._entries):
            if out.grad is not None:
                fn(out.grad)
        self._entries.clear()


class RngStream:
    """Counter-based random stream keyed by ``(seed, purpose)``.

    Backed by numpy's Philox bit generator, whose output sequence is fixed
    across platforms. Distinct purposes ("dropout", "distractors", "data", ...)
    give independent streams from one run seed.
    """

    def __init__(self, seed: int, purpose: str = "default"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.purpose = purpose
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32, zlib.crc32(purpose.encode("utf-8"))]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, purpose: str) -> "RngStream":
        return RngStream(self.seed, f"{self.purpose}/{purpose}")

    def random(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad or (isinstance(t, Parameter) and t.frozen):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.value.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError("op produced non-finite values")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs_grad)
    tape = _active_tape.get()
    if needs_grad and tape is not None:
        tape.record(out, backward)
    return out


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ _swap(bv), av.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(_swap(av) @ g, bv.shape))

    return _result(av @ bv, (a, b), backward)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)

    def backward(g):
        _accum(a, _swap(g))

    return _result(_swap(a.value), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        _accum(a, g.reshape(src))

    return _result(a.value.reshape(shape), (a,), backward)


def row_slice(a, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` of the first axis."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.value)
        full[lo:hi] = g
        _accum(a, full)

    return _result(a.value[lo:hi], (a,), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a constant array."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} and {b.shape} do not broadcast") from exc
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * bv, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * av, b.shape))

    return _result(out, (a, b), backward)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accum(x, g * factor)

    return _result(x.value * factor, (x,), backward)


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xv, wv = x.value, w.value
    out = xv @ wv
    if b is not None:
        out = out + b.value

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ wv.T)
        if w.requires_grad:
            _accum(w, xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None and b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.value > 0

    def backward(g):
        _accum(x, g * keep)

    return _result(np.where(keep, x.value, 0.0).astype(x.value.dtype), (x,), backward)


def dropout(x, rate: float, rng: RngStream | None, training: bool) -> tuple[Tensor, np.ndarray | None]:
    """Inverted dropout. Returns the output and the keep mask (None when inactive).

    In eval mode, or with ``rate == 0``, the input tensor itself is returned.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an RngStream")
    keep = rng.random(x.shape) >= rate
    factor = keep / (1.0 - rate)

    def backward(g):
        _accum(x, g * factor)

    return _result(x.value * factor, (x,), backward), keep


def softmax_rows(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries are exactly 0.

    ``mask`` is boolean and broadcastable to ``x``; True marks a valid entry.
    """
    x = as_tensor(x)
    xv = x.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xv.shape)
        if not np.all(mask.any(axis=-1)):
            raise MaskError("softmax_rows: a row is fully masked")
        xv = xv + np.where(mask, 0.0, MASK_NEG)
    z = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.value.dtype)

    def backward(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), backward)


def layer_norm(x, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x = as_tensor(x)
    n = x.shape[-1]
    if n < 1 or gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
    xhat = (xv - mu) * inv
    out = xhat * gamma.value + beta.value

    def backward(g):
        if x.requires_grad:
            gh = g * gamma.value
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
            _accum(x, gx)
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, n).sum(axis=0))

    return _result(out, (x, gamma, beta), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                _accum(t, piece)

    return _result(out, ts, backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b`` (constant condition)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.value, b.value)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _result(out, (a, b), backward)


def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _result(np.asarray(x.value.sum()), (x,), backward)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"finite_diff_grad: f is non-finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|g_a - g_n| / max(1, max|g_n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(1.0, float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / denom
