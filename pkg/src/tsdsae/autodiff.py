"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a backward rule on the output tensor; the
tape is the topological order recovered from the loss when ``backward`` runs.

Broadcasting follows numpy: shapes are aligned on their trailing axes and an
axis of extent 1 (or a missing leading axis) stretches to match. Gradients of
a broadcast operand are summed back over the stretched axes.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# binary ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be a plain 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    A, B = a.data, b.data
    flat = B.ndim == 2  # stacked rows times a weight: one 2-D GEMM
    if flat:
        k, n = B.shape
        out = (A.reshape(-1, k) @ B).reshape(A.shape[:-1] + (n,))
    else:
        out = np.matmul(A, B)

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ B.T).reshape(A.shape)
            if b.requires_grad:
                gb = A.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        return (
            unbroadcast(g * B, A.shape) if a.requires_grad else None,
            unbroadcast(g * A, B.shape) if b.requires_grad else None,
        )

    return _make(A * B, (a, b), backward)


def elementwise_binary(kind: str, a, b) -> Tensor:
    try:
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b)
    except KeyError:
        raise ContractError(f"unknown binary op {kind!r}") from None


# ---------------------------------------------------------------------------
# unary ops

def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log: input contains non-positive values")
    return _make(np.log(x), (a,), lambda g: (g / x,))


def negate(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log, "negate": negate, "square": square}


def elementwise_unary(kind: str, a: Tensor) -> Tensor:
    try:
        return _UNARY[kind](a)
    except KeyError:
        raise ContractError(f"unknown unary op {kind!r}") from None


# ---------------------------------------------------------------------------
# reductions and shape ops

def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[_norm_axis(axis, a.ndim)]
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reduce(kind: str, a: Tensor, axis: int | None = None) -> Tensor:
    if kind == "sum":
        return sum(a, axis)
    if kind == "mean":
        return mean(a, axis)
    raise ContractError(f"unknown reduction {kind!r}")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = np.broadcast_to(a.data, tuple(shape))
    except ValueError:
        raise DimensionError(f"broadcast_to: {old} does not broadcast to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (unbroadcast(g, old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: empty input list")
    if len(tensors) == 1:
        return tensors[0]
    ax = _norm_axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    n = len(tensors)
    return _make(out, tensors, lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


def slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    ax = _norm_axis(axis, a.ndim)
    if not 0 <= start <= stop <= a.shape[ax]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for extent {a.shape[ax]}")
    idx = (np.s_[:],) * ax + (np.s_[start:stop],)
    return getitem(a, idx)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (int/slice) indexing only; each source element is read at most once."""
    shape = a.shape
    out = a.data[idx]

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _make(out, (a,), backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate their gradients."""
    ax = _norm_axis(axis, a.ndim)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape
    out = np.take(a.data, idx, axis=ax)

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, (np.s_[:],) * ax + (idx,), g)
        return (full,)

    return _make(out, (a,), backward)


def concat_slice(op: str, *args, **kwargs) -> Tensor:
    if op == "concat":
        return concat(*args, **kwargs)
    if op == "slice":
        return slice(*args, **kwargs)
    raise ContractError(f"unknown op {op!r}")


# ---------------------------------------------------------------------------
# fused LSTM pointwise stage

def lstm_pointwise(gates: Tensor, c: Tensor) -> Tensor:
    """Gate nonlinearities and state update of an LSTM cell.

    ``gates`` holds pre-activations [..., 4H] in (input, forget, cell, output)
    order and ``c`` the previous cell state [..., H]. Returns [..., 2H] holding
    the new hidden state followed by the new cell state.
    """
    H = c.shape[-1]
    if gates.shape[-1] != 4 * H or gates.shape[:-1] != c.shape[:-1]:
        raise DimensionError(f"lstm_pointwise: gates {gates.shape} vs cell {c.shape}")
    G = gates.data
    i = _sigmoid(G[..., :H])
    f = _sigmoid(G[..., H : 2 * H])
    u = np.tanh(G[..., 2 * H : 3 * H])
    o = _sigmoid(G[..., 3 * H :])
    c_prev = c.data
    c_new = f * c_prev + i * u
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(g):
        gh, gc = g[..., :H], g[..., H:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dG = np.concatenate(
            [
                dc * u * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - u * u),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        return dG, dc * f

    return _make(np.concatenate([h_new, c_new], axis=-1), (gates, c), backward)


def _gate_affine(H: int) -> tuple[np.ndarray, np.ndarray]:
    # sigmoid(x) = 0.5 + 0.5 tanh(x / 2), so one tanh call covers all gates
    scale = np.full(4 * H, 0.5)
    scale[2 * H : 3 * H] = 1.0
    shift = np.full(4 * H, 0.5)
    shift[2 * H : 3 * H] = 0.0
    return scale, shift


def lstm_layer(xw: Tensor, w_hh: Tensor, reverse: bool = False) -> Tensor:
    """A whole LSTM layer from zero state as one node.

    ``xw`` [B, T, 4H] holds the input projections plus bias for every frame,
    gates in (input, forget, cell, output) order. Returns hidden states
    [B, T, H]; with ``reverse`` the recurrence runs from the last frame.
    The backward pass is full backpropagation through time.
    """
    if xw.ndim != 3 or w_hh.ndim != 2 or w_hh.shape[1] != 4 * w_hh.shape[0] or xw.shape[2] != w_hh.shape[1]:
        raise DimensionError(f"lstm_layer: projections {xw.shape} vs recurrent weights {w_hh.shape}")
    B, T, _ = xw.shape
    H = w_hh.shape[0]
    W = w_hh.data
    X = np.swapaxes(xw.data, 0, 1)  # [T, B, 4H] view
    scale, shift = _gate_affine(H)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    acts = np.empty((T, B, 4 * H))  # post-nonlinearity gates
    cs = np.empty((T, B, H))
    tcs = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in steps:
        a = np.tanh((X[t] + h @ W) * scale) * scale + shift
        c = a[:, H : 2 * H] * c + a[:, :H] * a[:, 2 * H : 3 * H]
        tc = np.tanh(c)
        h = a[:, 3 * H :] * tc
        acts[t], cs[t], tcs[t], hs[t] = a, c, tc, h

    def backward(g):
        g = np.swapaxes(g, 0, 1)
        order = list(steps)
        # gate nonlinearity slopes from their outputs: a(1-a) or 1-a^2
        slope = np.where(scale == 1.0, 1.0 - acts * acts, acts * (1.0 - acts))
        c_prev = np.zeros_like(cs)
        h_prev = np.zeros_like(hs)
        for n in range(1, T):
            c_prev[order[n]] = cs[order[n - 1]]
            h_prev[order[n]] = hs[order[n - 1]]
        i, f, u, o = acts[..., :H], acts[..., H : 2 * H], acts[..., 2 * H : 3 * H], acts[..., 3 * H :]
        dX = np.empty((T, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        WT = W.T
        for t in reversed(order):
            dh = g[t] + dh_next
            tc = tcs[t]
            dc = dc_next + dh * o[t] * (1.0 - tc * tc)
            da = dX[t]
            da[:, :H] = dc * u[t]
            da[:, H : 2 * H] = dc * c_prev[t]
            da[:, 2 * H : 3 * H] = dc * i[t]
            da[:, 3 * H :] = dh * tc
            da *= slope[t]
            dh_next = da @ WT
            dc_next = dc * f[t]
        dW = h_prev.reshape(-1, H).T @ dX.reshape(-1, 4 * H)
        return np.swapaxes(dX, 0, 1), dW

    return _make(np.ascontiguousarray(np.swapaxes(hs, 0, 1)), (xw, w_hh), backward)


# ---------------------------------------------------------------------------
# reverse pass

def build_tape(loss: Tensor) -> list[Tensor]:
    """Topological order of every node reachable from ``loss`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf.

    Tensors in ``params`` that the loss does not reach get an all-zero grad.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(build_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------------------
# optimiser

class Adam:
    """Bias-corrected Adam without weight decay.

    Each parameter keeps its own step count for bias correction, so tensors
    that sat out some steps (frozen groups) resume with their old moments.
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.steps = {k: 0 for k in params}

    def step(self, names: Iterable[str] | None = None) -> None:
        names = list(self.params) if names is None else list(names)
        for k in names:
            if self.params[k].grad is None:
                raise ContractError(f"adam_step: parameter {k!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in names:
            p = self.params[k]
            g = p.grad
            self.steps[k] += 1
            n = self.steps[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / (1.0 - b1**n)
            vhat = v / (1.0 - b2**n)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(state: Adam, names: Iterable[str] | None = None) -> None:
    state.step(names)


def normal_sample(rng, shape) -> Tensor:
    return Tensor(rng.normal(tuple(shape)))
