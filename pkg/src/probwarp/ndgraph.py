"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Only the operations needed by the matching losses and the toy encoder are
provided. A :class:`Graph` records every operation applied while it is the
active graph; ``Graph.backward`` then walks the records in reverse order.

    with Graph() as g:
        y = relu(matmul(w, x))
        loss = ce_with_constant_target(softmax_columns(y, 0.02), target, weights)
    g.backward(loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_EPS = 1e-12


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _not_scalar(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable | None


@dataclass
class Graph:
    """Append-only record of operations; node ids are list positions."""

    nodes: list = field(default_factory=list)
    _ids: dict = field(default_factory=dict, repr=False)

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def node_id(self, t: Tensor) -> int:
        key = id(t)
        nid = self._ids.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), t, None))
            self._ids[key] = nid
        return nid

    def record(self, op, inputs, out, backward):
        in_ids = tuple(self.node_id(t) for t in inputs)
        nid = len(self.nodes)
        self.nodes.append(Node(op, in_ids, out, backward))
        self._ids[id(out)] = nid
        return nid

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        start = self._ids.get(id(loss))
        if start is None:
            raise ContractError("loss tensor was not produced inside this graph")
        grads = {start: np.ones_like(loss.data)}
        for nid in range(start, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                if node.output.requires_grad:
                    node.output._accumulate(g)
                continue
            in_grads = node.backward(g)
            for in_id, ig in zip(node.inputs, in_grads):
                if ig is None:
                    continue
                prev = grads.get(in_id)
                grads[in_id] = ig if prev is None else prev + ig


class _State(threading.local):
    def __init__(self):
        self.stack = []


_state = _State()


def active_graph() -> Graph | None:
    return _state.stack[-1] if _state.stack else None


def _wants_grad(inputs) -> bool:
    return any(t.requires_grad for t in inputs)


# ops that only move or copy values cannot create non-finite numbers
_STRUCTURAL = frozenset({"transpose", "reshape", "take_columns", "take_rows", "append_constant_column"})


def _finish(op, inputs, data, backward) -> Tensor:
    if op not in _STRUCTURAL and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _wants_grad(inputs)
    g = active_graph()
    if g is not None and out.requires_grad:
        g.record(op, inputs, out, backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None,
                A.T @ g if b.requires_grad else None)

    return _finish("matmul", (a, b), A @ B, backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return _finish("transpose", (x,), x.data.T, lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(str(e)) from None
    return _finish("reshape", (x,), out, lambda g: (g.reshape(src),))


def take_columns(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise DimensionError("take_columns expects a matrix")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _finish("take_columns", (x,), x.data[:, idx], backward)


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if x.data.ndim != 2:
        raise DimensionError("take_rows expects a matrix")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _finish("take_rows", (x,), x.data[idx], backward)


def append_row(x: Tensor, value: Tensor) -> Tensor:
    """Append one row filled with the scalar ``value`` (e.g. a shared bin score)."""
    if x.data.ndim != 2 or value.data.size != 1:
        raise DimensionError("append_row expects a matrix and a scalar")
    row = np.full((1, x.shape[1]), value.data.reshape(()), dtype=x.dtype)

    def backward(g):
        return g[:-1], np.asarray(g[-1].sum(), dtype=value.dtype).reshape(value.shape)

    return _finish("append_row", (x, value), np.concatenate([x.data, row], 0), backward)


def append_constant_column(x: Tensor, column) -> Tensor:
    column = np.asarray(column, dtype=x.dtype).reshape(-1, 1)
    if x.data.ndim != 2 or column.shape[0] != x.shape[0]:
        raise DimensionError("constant column length must match the row count")
    return _finish("append_constant_column", (x,), np.concatenate([x.data, column], 1),
                   lambda g: (g[:, :-1],))


# ---------------------------------------------------------------------------
# elementwise


def _check_same(a, b, op):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} (only scalar broadcast)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _finish("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _finish("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    A, B = a.data, b.data
    return _finish("mul", (a, b), A * B,
                   lambda g: (_unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _finish("scale", (x,), x.data * x.dtype.type(c), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _finish("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def sqrt(x: Tensor, eps: float = 1e-12) -> Tensor:
    out = np.sqrt(x.data + eps)
    return _finish("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log of ``max(x, eps)``; the clamped region has zero gradient."""
    X = x.data
    live = X > eps
    out = np.log(np.maximum(X, eps))
    return _finish("log", (x,), out, lambda g: (np.where(live, g / np.maximum(X, eps), 0),))


def elementwise(op: str, *args, **kw) -> Tensor:
    table = {"add": add, "mul": mul, "relu": relu, "scale": scale, "sub": sub}
    try:
        return table[op](*args, **kw)
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}") from None


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _finish("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis)
    return _finish("sum_axis", (x,), out,
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def max_axis0(x: Tensor) -> Tensor:
    """Column-wise maximum; ties route the gradient to the first maximal row."""
    X = x.data
    idx = X.argmax(axis=0)
    cols = np.arange(X.shape[1])

    def backward(g):
        gx = np.zeros_like(X)
        gx[idx, cols] = g
        return (gx,)

    return _finish("max_axis0", (x,), X[idx, cols], backward)


# ---------------------------------------------------------------------------
# matching-specific


def softmax_columns(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if x.data.ndim != 2:
        raise DimensionError("softmax_columns expects a matrix")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=0, keepdims=True)) * y / temperature,)

    return _finish("softmax_columns", (x,), y, backward)


def log_softmax_columns(x: Tensor, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def backward(g):
        return ((g - y * g.sum(axis=0, keepdims=True)) / temperature,)

    return _finish("log_softmax_columns", (x,), out, backward)


def ce_with_log_probs(logp: Tensor, target, column_weights) -> Tensor:
    """Cross-entropy from log-probabilities; no clamp is needed."""
    T = np.asarray(target, dtype=logp.dtype)
    w = np.asarray(column_weights, dtype=logp.dtype).reshape(-1)
    if T.shape != logp.shape or w.shape[0] != logp.shape[1]:
        raise DimensionError(f"log-probs {logp.shape} vs target {T.shape} / {w.shape[0]} weights")
    wt = T * w[None, :]
    return _finish("ce_logp", (logp,), np.asarray(-(wt * logp.data).sum(), dtype=logp.dtype),
                   lambda g: (-g * wt,))


def bce_bin_from_scores(scores: Tensor, temperature: float, bin_row: int, p_target: float) -> Tensor:
    """Sum over columns of BCE(P(bin | j), p_target) with P the column softmax of ``scores``.

    Evaluated with log-sum-exp so the loss and its gradient stay exact when
    P(bin | j) underflows.
    """
    l = scores.data / scores.dtype.type(temperature)
    l = l - l.max(axis=0, keepdims=True)
    e = np.exp(l)
    tot = e.sum(axis=0, keepdims=True)
    rest_mask = np.ones(l.shape[0], dtype=bool)
    rest_mask[bin_row] = False
    rest_max = l[rest_mask].max(axis=0, keepdims=True)
    e_rest = np.exp(l[rest_mask] - rest_max)
    lse_all = np.log(tot)
    lse_rest = np.log(e_rest.sum(axis=0, keepdims=True)) + rest_max
    log_q = l[bin_row:bin_row + 1] - lse_all
    log_1q = lse_rest - lse_all
    val = -(p_target * log_q + (1 - p_target) * log_1q).sum()
    s = e / tot
    r = np.zeros_like(l)
    r[rest_mask] = e_rest / e_rest.sum(axis=0, keepdims=True)

    def backward(g):
        d = s.copy()                     # d/dl of -(p log q + (1-p) log(1-q))
        d[bin_row] -= p_target
        d -= (1 - p_target) * r
        return (g * d / temperature,)

    return _finish("bce_bin_scores", (scores,), np.asarray(val, dtype=scores.dtype), backward)


def ce_with_constant_target(pred: Tensor, target, column_weights) -> Tensor:
    """sum_j w_j * sum_i -target(i|j) * log(clamp(pred(i|j), eps, 1))."""
    T = np.asarray(target, dtype=pred.dtype)
    w = np.asarray(column_weights, dtype=pred.dtype).reshape(-1)
    P = pred.data
    if T.shape != P.shape or P.ndim != 2:
        raise DimensionError(f"pred {P.shape} vs target {T.shape}")
    if w.shape[0] != P.shape[1]:
        raise DimensionError(f"{w.shape[0]} column weights for {P.shape[1]} columns")
    Pc = np.clip(P, LOG_EPS, 1.0)
    wt = T * w[None, :]
    val = -(wt * np.log(Pc)).sum()
    live = (P > LOG_EPS) & (P <= 1.0)

    def backward(g):
        return (np.where(live, -g * wt / Pc, 0).astype(P.dtype),)

    return _finish("ce_const", (pred,), np.asarray(val, dtype=P.dtype), backward)


def bce_with_constant_target(prob: Tensor, p_target: float) -> Tensor:
    """Sum of -(p log q + (1-p) log(1-q)) over entries q of ``prob``."""
    Q = prob.data
    qa = np.maximum(Q, LOG_EPS)
    qb = np.maximum(1.0 - Q, LOG_EPS)
    val = -(p_target * np.log(qa) + (1 - p_target) * np.log(qb)).sum()

    def backward(g):
        da = np.where(Q > LOG_EPS, -p_target / qa, 0)
        db = np.where(1.0 - Q > LOG_EPS, (1 - p_target) / qb, 0)
        return ((g * (da + db)).astype(Q.dtype),)

    return _finish("bce_const", (prob,), np.asarray(val, dtype=Q.dtype), backward)


def l2_normalize_channels(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize a (c, h, w) or (n, c, h, w) map to unit norm along channels."""
    axis = x.data.ndim - 3
    X = x.data
    n = np.sqrt((X * X).sum(axis=axis, keepdims=True)) + eps
    y = X / n

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _finish("l2_normalize", (x,), y, backward)


# ---------------------------------------------------------------------------
# convolution


def _im2col(X, stride, ho, wo):
    n, c = X.shape[:2]
    Xp = np.pad(X, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=X.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = Xp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
    return cols


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation, zero padding 1; accepts (c,h,w) or batched (n,c,h,w)."""
    if stride not in (1, 2):
        raise ParameterError("stride must be 1 or 2")
    batched = x.data.ndim == 4
    X = x.data if batched else x.data[None]
    K = kernel.data
    if X.ndim != 4 or K.ndim != 4 or K.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d shapes {x.shape}, {kernel.shape}")
    n, cin, h, w = X.shape
    cout = K.shape[0]
    if K.shape[1] != cin:
        raise DimensionError(f"kernel expects {K.shape[1]} input channels, got {cin}")
    if h < 3 or w < 3:
        raise DimensionError("spatial dims must be at least 3")
    ho, wo = -(-h // stride), -(-w // stride)
    cols = _im2col(X, stride, ho, wo)  # n, cin, 3, 3, ho, wo
    cmat = cols.transpose(1, 2, 3, 0, 4, 5).reshape(cin * 9, n * ho * wo)
    kmat = K.reshape(cout, cin * 9)
    out = (kmat @ cmat).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)

    def backward(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gk = (gmat @ cmat.T).reshape(K.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(cin, 3, 3, n, ho, wo)
            gxp = np.zeros((n, cin, h + 2, w + 2), dtype=X.dtype)
            for dy in range(3):
                for dx in range(3):
                    gxp[:, :, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride] += \
                        gcols[:, dy, dx].transpose(1, 0, 2, 3)
            gx = gxp[:, :, 1:-1, 1:-1]
            if not batched:
                gx = gx[0]
        return gx, gk

    return _finish("conv2d", (x, kernel), out if batched else out[0], backward)


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(graph_builder: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
              step: float = 1e-3, floor: float = 1e-8) -> float:
    """Max relative error between analytic gradients and central differences.

    ``graph_builder(params)`` must return a scalar loss; it is called once
    inside a fresh graph for the analytic pass and twice per parameter entry
    (outside any graph) for the finite differences.
    """
    for p in params:
        p.zero_grad()
    with Graph() as g:
        loss = graph_builder(params)
    if loss.data.size != 1:
        raise ContractError(f"gradcheck needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        g.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(graph_builder(params).data)
            flat[k] = orig - step
            down = float(graph_builder(params).data)
            flat[k] = orig
            fd = (up - down) / (2 * step)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, err)
    return worst
