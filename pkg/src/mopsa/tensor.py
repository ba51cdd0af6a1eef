"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Everything in this package computes with 64-bit floats: the corpus is desk
scale, so precision beats speed, and the finite-difference gradient checks
need the headroom.

Recording model (define-by-run): ops record a backward rule onto the
innermost active ``Tape`` whenever gradients are enabled and at least one
input requires grad.  ``backward(tape, loss)`` replays the tape in reverse;
the tape is in creation order, which is a topological order, so every node
is visited exactly once.  Inference code runs under ``no_grad()`` and leaves
the tape empty.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, EmptyLossError, InputTooShortError, ShapeError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small conveniences; all heavy lifting lives in the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor; modules collect these for optimizers."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    Usable as a context manager; ops record onto the innermost active tape.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _record(out_data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    recording = (_GRAD_ENABLED and _TAPE_STACK
                 and any(t.requires_grad for t in inputs))
    out = Tensor(out_data, requires_grad=bool(recording))
    if recording:
        _TAPE_STACK[-1].nodes.append((out, backward_fn))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate gradients of every requires-grad leaf reachable from loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        fn(g)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def back(g):
        _accum(a, g * s)

    return _record(out, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    out = a.data.T

    def back(g):
        _accum(a, g.T)

    return _record(out, (a,), back)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out = a.data.reshape(shape)

    def back(g):
        _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [t.data for t in tensors]
    out = np.concatenate(parts, axis=axis)
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _record(out, tuple(tensors), back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            _accum(a, full)

    return _record(out, (a,), back)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    out = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def back(g):
        if axis is None:
            _accum(a, np.full_like(a.data, float(g) / count))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g / count, axis), a.data.shape).copy())

    return _record(out, (a,), back)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation; smooth everywhere)."""
    x = a.data
    u = _SQRT_2_OVER_PI * (x + _GELU_C * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du
        _accum(a, g * d)

    return _record(out, (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    if a.data.ndim == 0 or a.data.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, s * (g - dot))

    return _record(s, (a,), back)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller decides train/eval by simply not calling it."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(np.float64) / (1.0 - p)
    out = a.data * keep

    def back(g):
        _accum(a, g * keep)

    return _record(out, (a,), back)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id."""
    idx = np.asarray(ids, dtype=np.int64)
    out = table.data[idx]

    def back(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            _accum(table, full)

    return _record(out, (table,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        _accum(beta, _unbroadcast(g, beta.data.shape))
        _accum(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (dxhat - m1 - xhat * m2) * inv)

    return _record(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# convolution / pooling / batch norm (channels x time layout)
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution of an (in_channels, T) input with an
    (out_channels, in_channels, k) kernel bank."""
    c_in, t = x.data.shape
    c_out, c_in_k, k = kernels.data.shape
    if c_in_k != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {x.data.shape} vs kernels {kernels.data.shape}")
    t_out = (t + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise InputTooShortError(
            f"conv1d input too short: T={t} with k={k}, stride={stride}, padding={padding}")
    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    out = np.zeros((c_out, t_out))
    for dk in range(k):
        out += kernels.data[:, :, dk] @ xp[:, dk:dk + stride * (t_out - 1) + 1:stride]

    def back(g):
        if kernels.requires_grad:
            dk_full = np.empty_like(kernels.data)
            for dk in range(k):
                dk_full[:, :, dk] = g @ xp[:, dk:dk + stride * (t_out - 1) + 1:stride].T
            _accum(kernels, dk_full)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for dk in range(k):
                dxp[:, dk:dk + stride * (t_out - 1) + 1:stride] += kernels.data[:, :, dk].T @ g
            _accum(x, dxp[:, padding:padding + t] if padding else dxp)

    return _record(out, (x, kernels), back)


def avgpool1d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping windows of width k averaged; remainder frames dropped."""
    c, t = x.data.shape
    if t < k:
        raise InputTooShortError(f"avgpool1d input too short: T={t} < k={k}")
    t_out = t // k
    out = x.data[:, :t_out * k].reshape(c, t_out, k).mean(axis=2)

    def back(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[:, :t_out * k] = np.repeat(g / k, k, axis=1)
            _accum(x, dx)

    return _record(out, (x,), back)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of an (C, T) input.

    Train mode normalizes over the time axis with the biased variance and
    updates the running buffers in place; eval mode uses the buffers only.
    """
    if training:
        if x.data.shape[1] < 2:
            raise ContractError(f"batchnorm1d train mode needs T >= 2, got T={x.data.shape[1]}")
        mu = x.data.mean(axis=1, keepdims=True)
        var = x.data.var(axis=1, keepdims=True)
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[:] = (1.0 - momentum) * running_var + momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        _accum(beta, g.sum(axis=1, keepdims=True))
        _accum(gamma, (g * xhat).sum(axis=1, keepdims=True))
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                _accum(x, (dxhat - m1 - xhat * m2) * inv)
            else:
                _accum(x, dxhat * inv)

    return _record(out, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked rows.

    ``ignore_mask[i] == True`` excludes row i from the loss and from the
    gradient entirely (special-token and prompt positions).
    """
    n, v = logits.data.shape
    idx = np.asarray(targets, dtype=np.int64)
    if idx.shape != (n,):
        raise ShapeError(f"cross_entropy targets shape {idx.shape} vs logits rows {n}")
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise ContractError(f"cross_entropy target id out of range [0, {v})")
    keep = np.ones(n, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise EmptyLossError("cross_entropy: every position is masked")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    rows = np.arange(n)
    losses = lse - logits.data[rows, idx]
    out = np.asarray(losses[keep].mean())

    def back(g):
        if logits.requires_grad:
            sm = np.exp(shifted)
            sm /= sm.sum(axis=1, keepdims=True)
            d = sm
            d[rows, idx] -= 1.0
            d[~keep] = 0.0
            _accum(logits, d * (float(g) / n_keep))

    return _record(out, (logits,), back)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mse shapes differ: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    out = np.asarray((diff ** 2).mean())

    def back(g):
        d = diff * (2.0 * float(g) / diff.size)
        _accum(a, d)
        _accum(b, -d)

    return _record(out, (a,), back) if not b.requires_grad else _record(out, (a, b), back)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over an explicit parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise ContractError(f"Adam.step: parameter {i} has no gradient")
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            m_hat = self._m[i] / c1
            v_hat = self._v[i] / c2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
