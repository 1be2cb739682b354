"""Dense float tensors with tape-based reverse-mode differentiation and Adam.

Only what a multilayer perceptron needs: matmul, broadcasting add/mul,
ReLU, and the three losses used by the hybrid model (MSE, fused softmax
cross-entropy, Gaussian KL) plus the VAE reparameterization.

Operations only record onto a :class:`GradientTape` when one is active and
at least one input requires a gradient::

    with GradientTape() as tape:
        loss = mse_loss(x, matmul(x, w))
    grads = backward(loss, tape)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeConsumedError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list["GradientTape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    """Row-major float array plus autodiff bookkeeping.

    ``trainable`` marks leaf parameters that :func:`backward` reports
    gradients for. ``requires_grad`` is set on any tensor derived from a
    trainable one while a tape was recording.
    """

    __slots__ = ("data", "trainable", "requires_grad", "name", "__weakref__")

    def __init__(self, data, trainable: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"dimensions must be positive, got {arr.shape}")
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.trainable = trainable
        self.requires_grad = trainable
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.trainable = False
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the buffer."""
        return self.data.reshape(-1)

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, trainable={self.trainable})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class _Entry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


class GradientTape:
    """Ordered record of executed operations; replayed once in reverse."""

    def __init__(self) -> None:
        self._entries: list[_Entry] = []
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], fn: BackwardFn) -> None:
        if self._consumed:
            raise TapeConsumedError("cannot record onto a consumed tape")
        self._entries.append(_Entry(output, inputs, fn))

    def gradient(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if self._consumed:
            raise TapeConsumedError("tape already consumed")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self._entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if inp.trainable:
                    leaves[key] = inp
        out = {t: grads[k].astype(t.dtype, copy=False) for k, t in leaves.items() if k in grads}
        if loss.trainable:
            out[loss] = np.ones_like(loss.data)
        self._entries.clear()
        return out


def backward(loss: Tensor, tape: GradientTape) -> dict[Tensor, np.ndarray]:
    """Gradients of ``loss`` for every trainable leaf reached by the tape."""
    return tape.gradient(loss)


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    _check_finite(arr, op)
    out = Tensor._wrap(arr)
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1].record(out, inputs, fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.data, b.data

    def fn(g):
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), fn, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _result(a.data.T, (a,), lambda g: (g.T,), "transpose")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    av, bv = a.data, b.data
    return _result(
        out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul"
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _result(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,), "relu")


def tensor_sum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def select(x, mask: np.ndarray) -> Tensor:
    """Keep entries where ``mask`` is true and write an exact +0.0 elsewhere."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"select: mask {mask.shape} vs {x.shape}")
    zero = x.dtype.type(0)
    return _result(np.where(mask, x.data, zero), (x,), lambda g: (np.where(mask, g, zero),), "select")


def linear(x, weight, bias, mask: np.ndarray | None = None) -> Tensor:
    """``x @ W.T + bias`` with W stored as [out x in], masked entries zeroed."""
    w = weight if mask is None else select(weight, mask)
    return add(matmul(x, transpose(w)), bias)


# ---------------------------------------------------------------------------
# losses


def mse_loss(x, x_hat) -> Tensor:
    """Mean of squared differences over every element of the batch."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"mse_loss: {x.shape} vs {x_hat.shape}")
    diff = x.data - x_hat.data
    n = diff.size

    def fn(g):
        d = (2.0 / n) * diff * g
        return d, -d

    with np.errstate(over="ignore"):
        value = np.asarray(np.mean(diff * diff), dtype=diff.dtype)
    return _result(value, (x, x_hat), fn, "mse_loss")


def per_instance_mse(x, x_hat) -> np.ndarray:
    """Row-wise MSE; not recorded on the tape."""
    xv = x.data if isinstance(x, Tensor) else np.asarray(x)
    hv = x_hat.data if isinstance(x_hat, Tensor) else np.asarray(x_hat)
    if xv.shape != hv.shape:
        raise ShapeError(f"per_instance_mse: {xv.shape} vs {hv.shape}")
    d = xv - hv
    with np.errstate(over="ignore"):
        return np.mean(d * d, axis=-1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits, labels) -> Tensor:
    """Fused softmax + negative log-likelihood, averaged over the batch."""
    logits = as_tensor(logits)
    z = logits.data if logits.data.ndim == 2 else logits.data.reshape(1, -1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = z.shape
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy_loss: {n} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    logp = log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    shape = logits.shape

    def fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return ((d * (g / n)).reshape(shape),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), fn, "cross_entropy_loss")


def _batch_rows(a: np.ndarray) -> int:
    return a.shape[0] if a.ndim >= 2 else 1


def kl_standard_normal(mu, log_var) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), summed over latent dims, averaged over rows."""
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    if mu.shape != log_var.shape:
        raise ShapeError(f"kl_standard_normal: {mu.shape} vs {log_var.shape}")
    m, lv = mu.data, log_var.data
    with np.errstate(over="ignore", invalid="ignore"):
        ev = np.exp(lv)
        n = _batch_rows(m)
        kl = -0.5 * np.sum(1.0 + lv - m * m - ev) / n

    def fn(g):
        return g * m / n, g * 0.5 * (ev - 1.0) / n

    return _result(np.asarray(kl, dtype=m.dtype), (mu, log_var), fn, "kl_standard_normal")


def reparameterize(mu, log_var, noise) -> Tensor:
    """z = mu + exp(log_var / 2) * noise, with caller-supplied standard-normal noise."""
    mu, log_var = as_tensor(mu), as_tensor(log_var)
    eps = noise.data if isinstance(noise, Tensor) else np.asarray(noise, dtype=mu.dtype)
    if not (mu.shape == log_var.shape == eps.shape):
        raise ShapeError(f"reparameterize: {mu.shape}, {log_var.shape}, {eps.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = np.exp(0.5 * log_var.data) * eps

    def fn(g):
        return g, g * 0.5 * scaled

    return _result((mu.data + scaled).astype(mu.dtype), (mu, log_var), fn, "reparameterize")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def reset(self) -> None:
        self.step = 0
        self.m.clear()
        self.v.clear()


def adam_step(params: Iterable[Tensor], grads: dict[Tensor, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``param.data``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    params = list(params)
    for p in params:
        g = grads.get(p)
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if p in state.m and state.m[p].shape != p.shape:
            raise ShapeError(f"Adam state shape {state.m[p].shape} does not match parameter {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(p)
        v = state.v.get(p)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[p] = m
        state.v[p] = v
        update = (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        new = p.data - update
        _check_finite(new, "adam_step")
        p.data = new
