"""Small dense-tensor library with tape-based reverse-mode differentiation.

Tensors wrap numpy arrays of rank <= 3.  Operations are recorded on the
active :class:`Tape` only when at least one input requires a gradient, so
plain inference runs without any bookkeeping::

    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    w.grad  # ones.T @ ... etc.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

MAX_RANK = 3

_state = threading.local()


def _dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with.

    float32 is the working precision; float64 exists for gradient checking.
    """
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _dtype():
            arr = arr.astype(_dtype())
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds maximum rank {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so walking them backwards is a
    valid reverse topological order and each node is visited once.
    """

    def __init__(self, seed: int = 0):
        self.nodes: list[_Node] = []
        self.rng_seed = seed
        self.rng = np.random.default_rng(seed)
        self._thread = threading.get_ident()

    def __enter__(self) -> "Tape":
        if threading.get_ident() != self._thread:
            raise RuntimeError("a Tape is confined to the thread that created it")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar loss")
            grad = np.ones_like(loss.data)
        loss.grad = grad.astype(loss.data.dtype)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"{node.op}: gradient shape {pg.shape} != parent shape {parent.shape}"
                    )
                if parent.grad is None:
                    # grads are never mutated in place, so sharing buffers is safe
                    parent.grad = pg if pg.dtype == parent.data.dtype else pg.astype(parent.data.dtype)
                else:
                    parent.grad = parent.grad + pg
        self.nodes.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    tape = current_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(_Node(op, out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(out, (a, b), backward, "div")


def tabs(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = a.data * a.data
    return _result(out, (a,), lambda g: (2.0 * g * a.data,), "square")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation, as in GPT-2."""
    x = a.data
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    inner = c * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError("transpose needs rank >= 2")
    return _result(
        np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose"
    )


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``a[..., start:stop]``."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop].copy(), (a,), backward, "take_cols")


def take_rows(a: Tensor, stop: int) -> Tensor:
    """First ``stop`` rows of a rank-2 tensor."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[:stop] = g
        return (full,)

    return _result(a.data[:stop].copy(), (a,), backward, "take_rows")


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)
    try:
        out = np.concatenate([p.data for p in parts], axis=-1)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def backward(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(out, tuple(parts), backward, "concat")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), backward, "embedding")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# normalisation, softmax, losses


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(out, (x, gain, bias), backward, "layer_norm")


@lru_cache(maxsize=16)
def _causal_mask(t_q: int, t_k: int) -> np.ndarray:
    return np.triu(np.ones((t_q, t_k), dtype=bool), k=1)


def softmax(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis; ``causal`` masks entries with column > row."""
    z = x.data
    if causal:
        z = np.where(_causal_mask(*z.shape[-2:]), -np.inf, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log likelihood in nats."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    lp = log_softmax_np(logits.data).reshape(-1, v)
    flat = targets.reshape(-1)
    n = flat.size
    loss = -lp[np.arange(n), flat].mean()

    def backward(g):
        p = np.exp(lp)
        p[np.arange(n), flat] -= 1.0
        return ((g * p / n).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# sparse activations


@dataclass(frozen=True)
class Relu:
    name: str = field(default="relu", init=False)


@dataclass(frozen=True)
class TopK:
    k: int
    name: str = field(default="topk", init=False)


@dataclass(frozen=True)
class JumpRelu:
    bandwidth: float = 1e-3
    name: str = field(default="jumprelu", init=False)


ActivationKind = Relu | TopK | JumpRelu


def relu(z: Tensor) -> Tensor:
    keep = z.data > 0
    return _result(np.where(keep, z.data, 0).astype(z.data.dtype), (z,), lambda g: (g * keep,), "relu")


def topk_mask(z: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lower index."""
    order = np.argsort(-z, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(z.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk(z: Tensor, k: int) -> Tensor:
    units = z.shape[-1]
    if not 1 <= k <= units:
        raise ConfigError(f"topk: k={k} outside [1, {units}]")
    keep = topk_mask(z.data, k)
    return _result(np.where(keep, z.data, 0).astype(z.data.dtype), (z,), lambda g: (g * keep,), "topk")


def jumprelu(z: Tensor, theta: Tensor, bandwidth: float = 1e-3) -> Tensor:
    """``z * 1[z > theta]`` with a rectangle-kernel straight-through estimate for theta."""
    if (theta.data < 0).any():
        raise ConfigError("jumprelu: thresholds must be non-negative")
    keep = z.data > theta.data
    out = np.where(keep, z.data, 0).astype(z.data.dtype)

    def backward(g):
        near = np.abs(z.data - theta.data) <= bandwidth / 2
        dtheta = g * z.data * near * (-1.0 / bandwidth)
        return g * keep, _unbroadcast(dtheta, theta.shape)

    return _result(out, (z, theta), backward, "jumprelu")


def activation(z: Tensor, kind: ActivationKind, theta: Tensor | None = None) -> Tensor:
    if isinstance(kind, Relu):
        return relu(z)
    if isinstance(kind, TopK):
        return topk(z, kind.k)
    if isinstance(kind, JumpRelu):
        if theta is None:
            raise ConfigError("jumprelu needs per-unit thresholds")
        return jumprelu(z, theta, kind.bandwidth)
    raise ConfigError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update; ``params`` are modified in place."""
    if len(params) != len(state.m) or any(p.shape != m.shape for p, m in zip(params, state.m)):
        raise DimensionError("Adam state does not match parameter shapes")
    for g in grads:
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient passed to adam_step")
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    state.step = step
    return state


class Adam:
    """Adam over a list of tensors, reading their ``.grad`` buffers."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    f: Callable[[list[Tensor]], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    tol: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    Both routes are evaluated in float64.  ``tol`` floors the denominator so
    coordinates whose true gradient is ~0 are compared absolutely.
    """
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    with precision(np.float64):
        ps = [Tensor(p.data.astype(np.float64), requires_grad=True) for p in params]
        with Tape() as tape:
            out = f(ps)
        tape.backward(out)
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in ps]
        worst = 0.0
        for p, a in zip(ps, analytic):
            flat = p.data.reshape(-1)
            agrad = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = f(ps).item()
                flat[i] = orig - step
                fm = f(ps).item()
                flat[i] = orig
                num = (fp - fm) / (2 * step)
                denom = max(abs(agrad[i]), abs(num), tol)
                worst = max(worst, abs(agrad[i] - num) / denom)
    return worst
