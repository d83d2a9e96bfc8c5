"""Minimal reverse-mode differentiation over numpy arrays.

A `Tape` records every primitive applied while it is active; `Tape.backward`
walks the record in reverse and accumulates gradients into the inputs.
Parameters live in a `ParameterStore`, which hands out fresh leaf tensors
for each forward pass and owns the Adam state.

Typical use::

    leaves = store.bind()
    with Tape() as tape:
        loss = model(leaves, batch)
    tape.backward(loss)
    adam_step(store, lr=1e-3)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from .errors import NonFinite, ShapeMismatch, StaleTape

DEBUG = False  # when set, every forward value is checked for finiteness

_active: list["Tape"] = []


class Tensor:
    """An array value plus its gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __pow__(self, o):
        return pow(self, o)

    def __rpow__(self, o):
        return pow(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    rule: object  # callable: upstream grad -> tuple of input grads


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every tensor that requires it.

        Raises:
            StaleTape: the tape was already consumed by an earlier call.
        """
        if self._consumed:
            raise StaleTape("backward() already ran on this tape; record a new forward pass")
        if loss.value.size != 1:
            raise ShapeMismatch(f"loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value, inputs, rule) -> Tensor:
    if DEBUG and not np.all(np.isfinite(value)):
        raise NonFinite("non-finite value in forward pass")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs and _active:
        _active[-1].nodes.append(_Node(out, tuple(inputs), rule))
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fn, name):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = fn(a.value, b.value)
    except ValueError as exc:
        raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} are incompatible") from exc
    return a, b, value


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b, v = _binary(a, b, np.add, "add")
    return _record(v, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b, v = _binary(a, b, np.subtract, "sub")
    return _record(v, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b, v = _binary(a, b, np.multiply, "mul")
    return _record(
        v,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b, v = _binary(a, b, np.divide, "div")
    return _record(
        v,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * v / b.value, b.shape),
        ),
    )


def pow(a, b) -> Tensor:
    """a ** b, differentiable in both base and exponent (exponent rule needs a > 0)."""
    a, b, v = _binary(a, b, np.power, "pow")

    def rule(g):
        ga = g * b.value * np.power(a.value, b.value - 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(a.value > 0, np.log(np.where(a.value > 0, a.value, 1.0)), 0.0)
        return _unbroadcast(ga, a.shape), _unbroadcast(g * v * logs, b.shape)

    return _record(v, (a, b), rule)


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record(np.log(a.value), (a,), lambda g: (g / a.value,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    v = np.exp(a.value)
    return _record(v, (a,), lambda g: (g * v,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    v = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _record(v, (a,), lambda g: (g * v * (1.0 - v),))


def lgamma(a) -> Tensor:
    a = _as_tensor(a)
    return _record(gammaln(a.value), (a,), lambda g: (g * digamma(a.value),))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip into [lo, hi]; gradient is zero where clipping was active."""
    a = _as_tensor(a)
    v = np.clip(a.value, lo, hi)
    mask = v == a.value
    return _record(v, (a,), lambda g: (g * mask,))


def where(cond, a, b) -> Tensor:
    """Select from a where the constant mask is true, else from b."""
    cond = np.asarray(cond, dtype=bool)
    a, b, v = _binary(a, b, lambda x, y: np.where(cond, x, y), "where")
    return _record(
        v,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


# ---------------------------------------------------------------------------
# reductions and shape primitives
# ---------------------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    v = a.value.sum(axis=axis, keepdims=keepdims)
    return _record(v, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    v = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size // max(v.size, 1)
    return _record(
        v, (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,)
    )


def broadcast(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        v = np.broadcast_to(a.value, shape)
    except ValueError as exc:
        raise ShapeMismatch(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from exc
    return _record(v.copy(), (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def slice_(a, idx) -> Tensor:
    a = _as_tensor(a)

    def rule(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.value[idx], (a,), rule)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        v = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeMismatch(f"concat along axis {axis}: shapes {shapes}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(v, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def matmul(a, b) -> Tensor:
    """np.matmul semantics, including batch broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    try:
        v = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from exc

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _record(v, (a, b), rule)


def causal_conv1d(x, w, dilation: int = 1) -> Tensor:
    """Dilated causal convolution along axis -2.

    Args:
        x: input of shape (..., T, C_in).
        w: kernel of shape (K, C_in, C_out); tap K-1 multiplies the current
            step, tap K-1-i the step ``i * dilation`` earlier.
        dilation: spacing between taps.

    Returns:
        Tensor of shape (..., T, C_out). Steps before the start of the
        sequence are treated as zeros, so output t sees only inputs <= t.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"causal_conv1d: input {x.shape} vs kernel {w.shape}")
    k = w.shape[0]
    t = x.shape[-2]
    pad = (k - 1) * dilation
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, 0), (0, 0)]
    xp = np.pad(x.value, widths)
    taps = [xp[..., i * dilation : i * dilation + t, :] for i in range(k)]
    v = sum(np.matmul(taps[i], w.value[i]) for i in range(k))

    def rule(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros(w.shape) if w.requires_grad else None
        lead = tuple(range(x.ndim - 2))
        for i in range(k):
            if gx is not None:
                gx[..., i * dilation : i * dilation + t, :] += np.matmul(g, w.value[i].T)
            if gw is not None:
                gw[i] = np.tensordot(taps[i], g, axes=(lead + (x.ndim - 2,), lead + (x.ndim - 2,)))
        if gx is not None:
            gx = gx[..., pad:, :]
        return gx, gw

    return _record(v, (x, w), rule)


def dropout(x, rate: float, seed: int, training: bool) -> Tensor:
    """Inverted dropout: identity in evaluation mode, else zero units with prob. ``rate``."""
    x = _as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return _record(x.value * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------


@dataclass
class ParameterStore:
    """Named trainable arrays with their Adam moments."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    _bound: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def add(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def bind(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward pass; their grads feed `adam_step`."""
        self._bound = {
            n: Tensor(v.copy(), requires_grad=True, name=n) for n, v in self.params.items()
        }
        return self._bound

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {
            n: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for n, t in self._bound.items()
        }

    def l2(self) -> float:
        return float(sum(np.sum(v * v) for v in self.params.values()))

    def copy(self) -> "ParameterStore":
        out = ParameterStore(step=self.step)
        for n in self.params:
            out.params[n] = self.params[n].copy()
            out.m[n] = self.m[n].copy()
            out.v[n] = self.v[n].copy()
        return out


def adam_step(
    store: ParameterStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    l2_weight: float = 0.0,
) -> ParameterStore:
    """One bias-corrected Adam update of every parameter, in place.

    The L2 penalty ``l2_weight * sum(theta**2)`` enters as the extra
    gradient ``2 * l2_weight * theta``.
    """
    grads = store.grads
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for name, theta in store.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if l2_weight:
            g = g + 2.0 * l2_weight * theta
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        m_hat = store.m[name] / c1
        v_hat = store.v[name] / c2
        store.params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def finite_difference(fn, store: ParameterStore, step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite-difference gradient of the scalar ``fn(store)`` for every parameter."""
    out = {}
    for name, theta in store.params.items():
        g = np.zeros_like(theta)
        for i in np.ndindex(theta.shape):
            old = theta[i]
            theta[i] = old + step
            up = fn(store)
            theta[i] = old - step
            dn = fn(store)
            theta[i] = old
            g[i] = (up - dn) / (2.0 * step)
        out[name] = g
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


__all__ = [
    "DEBUG", "Tensor", "Tape", "ParameterStore", "adam_step", "finite_difference",
    "max_relative_error", "add", "sub", "mul", "div", "pow", "log", "exp", "relu",
    "sigmoid", "lgamma", "clamp", "where", "reduce_sum", "reduce_mean", "broadcast",
    "reshape", "transpose", "slice_", "concat", "matmul", "causal_conv1d", "dropout",
]
