"""
Dense 2-D float64 tensors with a tape-based reverse-mode graph.

Operations only record onto a `Graph` when one is active in the current
context and at least one input requires gradients, so forward passes
outside `with Graph():` are plain numpy evaluation.
"""
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from abclust.utils import NumericalError, ShapeError

LAYER_NORM_EPS = 1e-5
PROB_CLAMP = 1e-7

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


@dataclass(eq=False)
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


_ACTIVE: ContextVar["Graph | None"] = ContextVar("abclust_graph", default=None)


@dataclass(eq=False)
class Graph:
    """Insertion-ordered tape. Backward walks it in exact reverse order."""
    nodes: list[Node] = field(default_factory=list)
    _token: object = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)  # type: ignore[arg-type]
        self._token = None

    def _propagate(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericalError(f"Non-finite loss {loss.item()!r}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
        return grads

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of `loss` for `params`, leaving every `.grad` untouched."""
        grads = self._propagate(loss)
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]

    def backward(self, loss: Tensor):
        grads = self._propagate(loss)
        produced = {id(n.output) for n in self.nodes}
        seen: set[int] = set()
        for node in self.nodes:
            for inp in node.inputs:
                key = id(inp)
                if key in produced or key in seen or not inp.requires_grad:
                    continue
                seen.add(key)
                g = grads.get(key)
                if g is None:
                    continue
                inp.grad = g.copy() if inp.grad is None else inp.grad + g


def active_graph() -> Graph | None:
    return _ACTIVE.get()


_CHECK_FINITE: ContextVar[bool] = ContextVar("abclust_check_finite", default=False)


def set_check_finite(enabled: bool):
    """Makes every recorded op raise NumericalError on a non-finite result"""
    _CHECK_FINITE.set(enabled)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if _CHECK_FINITE.get() and not np.isfinite(out_data).all():
        op = backward.__qualname__.split(".")[0]
        raise NumericalError(f"{op} produced non-finite values from inputs "
                             f"{[t.shape for t in inputs]}")
    out = Tensor(out_data)
    graph = _ACTIVE.get()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append(Node(inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g: np.ndarray):
        return g @ bd.T, ad.T @ g
    return _record(ad @ bd, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _record(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def backward(g: np.ndarray):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _record(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g: np.ndarray):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)
    return _record(ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g: np.ndarray):
        return (g * c,)
    return _record(x.data * c, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    def backward(g: np.ndarray):
        return (g.T,)
    return _record(x.data.T.copy(), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g: np.ndarray):
        return (np.full(shape, g[0, 0]),)
    return _record(np.array([[x.data.sum()]]), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    shape, size = x.shape, x.data.size

    def backward(g: np.ndarray):
        return (np.full(shape, g[0, 0] / size),)
    return _record(np.array([[x.data.mean()]]), (x,), backward)


def log(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g: np.ndarray):
        return (g / xd,)
    return _record(np.log(xd), (x,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ, {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def backward(g: np.ndarray):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]
    return _record(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def row_softmax(c: Tensor) -> Tensor:
    if not np.isfinite(c.data).all():
        raise NumericalError("row_softmax received non-finite input")
    shifted = c.data - c.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)
    return _record(y, (c,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row normalisation to zero mean and unit variance, then gain and bias."""
    d = x.cols
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match 1x{d}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    sigma = np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + eps)
    xhat = centered / sigma
    gd = gain.data

    def backward(g: np.ndarray):
        dxhat = g * gd
        dx = (dxhat - dxhat.mean(axis=1, keepdims=True)
              - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)) / sigma
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)
    return _record(xhat * gd + bias.data, (x, gain, bias), backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


# name -> (forward, derivative expressed through input x and output y)
ACTIVATIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray],
                             Callable[[np.ndarray, np.ndarray], np.ndarray]]] = {
    "relu": (lambda v: np.maximum(v, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ShapeError(f"Unknown activation {name!r}, expected one of {list(ACTIVATIONS)}") from None


def elementwise(x: Tensor, fn: str, clamp: bool = False) -> Tensor:
    """Applies relu, tanh or sigmoid per entry. `clamp` keeps sigmoid
    outputs within [PROB_CLAMP, 1 - PROB_CLAMP]; clamped entries take the
    sigmoid slope at the bound, so with BCE their logit gradient stays p - target."""
    forward, derivative = activation(fn)
    xd = x.data
    y = forward(xd)
    if clamp:
        if fn != "sigmoid":
            raise ShapeError("clamp is only defined for sigmoid outputs")
        y = np.clip(y, PROB_CLAMP, 1.0 - PROB_CLAMP)
    dy = derivative(xd, y)

    def backward(g: np.ndarray):
        return (g * dy,)
    return _record(y, (x,), backward)


def pairwise_additive(q: Tensor, k: Tensor, w: Tensor, act: str) -> Tensor:
    """C[i, j] = act(q_i + k_j) . w, fused so no 3-D tensor leaves this op."""
    if q.cols != k.cols:
        raise ShapeError(f"additive compat: query dim {q.cols} != key dim {k.cols}")
    if w.shape != (1, q.cols):
        raise ShapeError(f"additive compat: w {w.shape} does not match 1x{q.cols}")
    forward, derivative = activation(act)
    s = q.data[:, None, :] + k.data[None, :, :]
    a = forward(s)
    da = derivative(s, a)
    wv = w.data[0]

    def backward(g: np.ndarray):
        ds = g[:, :, None] * wv[None, None, :] * da
        dw = np.einsum("ij,ijd->d", g, a)[None, :]
        return ds.sum(axis=1), ds.sum(axis=0), dw
    return _record(a @ wv, (q, k, w), backward)


def binary_cross_entropy(s: Tensor, target: np.ndarray) -> Tensor:
    """Mean BCE over every cell; predictions are clamped away from 0 and 1."""
    if s.shape != target.shape:
        raise ShapeError(f"BCE: prediction {s.shape} vs target {target.shape}")
    p = np.clip(s.data, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (p == s.data).astype(np.float64)
    size = p.size
    value = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))

    def backward(g: np.ndarray):
        dp = -(target / p - (1.0 - target) / (1.0 - p)) / size
        return (g[0, 0] * dp * inside,)
    return _record(np.array([[value]]), (s,), backward)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5,
               floor: float = 1e-12) -> float:
    """Max relative error between analytic gradients and central differences.

    `f` rebuilds the scalar composite from the current parameter values on
    every call. Error per entry is |a - n| / max(floor, |a| + |n|), so entries
    with |a| + |n| below `floor` are held to an absolute bound of floor * result.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    with Graph() as graph:
        loss = f()
        analytic = graph.gradients(loss, params)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            fp = f().item()
            flat[idx] = orig - step
            fm = f().item()
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(
                    f"grad_check aborted: non-finite loss around entry {idx} of {p!r}")
            numeric = (fp - fm) / (2.0 * step)
            ai = a.reshape(-1)[idx]
            err = abs(ai - numeric) / max(floor, abs(ai) + abs(numeric))
            worst = max(worst, err)
    return worst


def glorot(rng: np.random.Generator, rows: int, cols: int, fan_in: int | None = None,
           fan_out: int | None = None) -> Tensor:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)), fans default to the shape."""
    fan_in = rows if fan_in is None else fan_in
    fan_out = cols if fan_out is None else fan_out
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(rows, cols)), requires_grad=True)


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=True)


def ones(rows: int, cols: int) -> Tensor:
    return Tensor(np.ones((rows, cols)), requires_grad=True)
