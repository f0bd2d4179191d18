"""Dense float64 arrays with a reverse-mode tape and an AdamW optimizer.

Every model equation in this package is written against :class:`Value`.
Operations are recorded on the active :class:`Tape` whenever one of their
inputs requires a gradient; outside a tape everything is evaluated eagerly and
nothing is recorded (inference mode).

>>> x = Value([[1.0, 2.0]], requires_grad=True)
>>> with Tape() as tape:
...     loss = (x * x).sum()
>>> backward(tape, loss)[x]
array([[2., 4.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Value:
    """An immutable dense array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "tape_id", "_tape", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Value":
        v = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.setflags(write=False)
        v.data = arr
        v.requires_grad = False
        v.tape_id = None
        v._tape = None
        v.name = None
        return v

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Value":
        return Value._wrap(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Value(shape={self.shape}{tag})"

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[Value, ...]
    output: Value
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved_bytes: int = 0


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; nodes are appended in execution order, so the
    list is topologically sorted by construction.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.live_bytes = 0
        self.peak_bytes = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind, inputs, out_data, backward_fn, saved=()) -> Value:
        out = Value._wrap(out_data)
        out.requires_grad = True
        out.tape_id = len(self.nodes)
        out._tape = self
        nbytes = out.data.nbytes + sum(a.nbytes for a in saved)
        self.nodes.append(TapeNode(kind, tuple(inputs), out, backward_fn, nbytes))
        self.live_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        return out


def _emit(kind, inputs, out_data, backward_fn, saved=()) -> Value:
    tape = active_tape()
    if tape is not None and any(v.requires_grad for v in inputs):
        return tape.record(kind, inputs, out_data, backward_fn, saved)
    return Value._wrap(out_data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a: Value, b: Value, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _emit("div", (a, b), out, bw)


def exp(x) -> Value:
    x = as_value(x)
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Value:
    x = as_value(x)
    xd = x.data
    return _emit("log", (x,), np.log(xd), lambda g: (g / xd,))


def tanh(x) -> Value:
    x = as_value(x)
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free, saturates to exactly 0/1 for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Value:
    x = as_value(x)
    out = _sigmoid(x.data)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def relu(x) -> Value:
    x = as_value(x)
    mask = x.data > 0
    return _emit("relu", (x,), x.data * mask, lambda g: (g * mask,))


# ------------------------------------------------------------------- linear


def matmul(a, b) -> Value:
    """Matrix product with numpy batching rules over leading axes."""
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    return _emit("matmul", (a, b), out, bw)


# ---------------------------------------------------------------- reductions


def vsum(x, axis=None, keepdims=False) -> Value:
    x = as_value(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    kept = np.sum(x.data, axis=axis, keepdims=True).shape

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _emit("sum", (x,), out, bw)


def mean(x, axis=None, keepdims=False) -> Value:
    x = as_value(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ShapeError(f"mean over an empty axis of shape {x.shape}")
    return vsum(x, axis, keepdims) * (1.0 / n)


# ------------------------------------------------------------------- shaping


def reshape(x, shape) -> Value:
    x = as_value(x)
    orig = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(orig),))


def transpose(x, axes=None) -> Value:
    x = as_value(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes),
                 lambda g: (np.transpose(g, inv),))


def getitem(x, idx) -> Value:
    """Basic or integer-array indexing; gradients scatter-add back."""
    x = as_value(x)
    if isinstance(idx, list):
        idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape
    out = x.data[idx]

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", (x,), out, bw)


def take_rows(x, rows) -> Value:
    return getitem(x, np.asarray(rows, dtype=np.intp))


def concat(values: Sequence, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    if not values:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _emit("concat", tuple(values), out,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(values: Sequence, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    out = np.stack([v.data for v in values], axis=axis)
    n = len(values)
    return _emit("stack", tuple(values), out,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def broadcast_to(x, shape) -> Value:
    x = as_value(x)
    orig = x.shape
    return _emit("broadcast", (x,), np.broadcast_to(x.data, shape).copy(),
                 lambda g: (_unbroadcast(g, orig),))


# ------------------------------------------------------------------ softmax


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Value:
    """Numerically stable softmax; ``mask`` (bool, broadcastable) marks allowed entries."""
    x = as_value(x)
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis of shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax: a slice has no unmasked entries")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, bw)


def bce_with_logits(logits, labels) -> Value:
    """Elementwise binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    logits = as_value(logits)
    b = np.asarray(labels, dtype=DTYPE)
    if b.shape != logits.shape:
        raise ShapeError(f"bce: logits {logits.shape} vs labels {b.shape}")
    e = logits.data
    out = np.maximum(e, 0.0) - b * e + np.log1p(np.exp(-np.abs(e)))
    p = _sigmoid(e)
    return _emit("bce", (logits,), out, lambda g: (g * (p - b),))


# --------------------------------------------------------------- attention


def _heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def _unheads(x: np.ndarray) -> np.ndarray:
    *lead, h, n, dz = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, n, h * dz)


def _sum_to(grad: np.ndarray, shape) -> np.ndarray:
    return grad.reshape(-1, *shape).sum(axis=0) if grad.shape != tuple(shape) else grad


def attention(queries, keys, wq, wk, wv, heads: int, mask: np.ndarray | None = None,
              return_weights: bool = False):
    """Fused multi-head scaled dot-product attention.

    queries [..., n_q, d], keys [..., n_k, d], projections [d, d]. ``mask`` is a
    boolean array broadcastable to [..., n_q, n_k] (True = attend). Head outputs
    are concatenated back to width d; there is no output projection.
    """
    queries, keys, wq, wk, wv = (as_value(v) for v in (queries, keys, wq, wk, wv))
    d = queries.shape[-1]
    if keys.shape[-1] != d or any(w.shape != (d, d) for w in (wq, wk, wv)):
        raise ShapeError(f"attention: queries {queries.shape}, keys {keys.shape}, "
                         f"projections {wq.shape}/{wk.shape}/{wv.shape}")
    if d % heads:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    if keys.shape[-2] == 0:
        raise ShapeError("attention over an empty key set")
    xq, xk = queries.data, keys.data
    Q, K, V = _heads(xq @ wq.data, heads), _heads(xk @ wk.data, heads), _heads(xk @ wv.data, heads)
    scale = 1.0 / np.sqrt(d // heads)
    S = (Q @ np.swapaxes(K, -1, -2)) * scale
    if mask is not None:
        m = np.expand_dims(np.asarray(mask, dtype=bool), -3)
        m = np.broadcast_to(m, S.shape)
        if not m.any(axis=-1).all():
            raise ShapeError("attention: a query has no unmasked keys")
        S = np.where(m, S, -np.inf)
    S = S - S.max(axis=-1, keepdims=True)
    A = np.exp(S)
    A /= A.sum(axis=-1, keepdims=True)
    out = _unheads(A @ V)
    if return_weights:
        return A

    def bw(g):
        dO = _heads(g, heads)
        dA = dO @ np.swapaxes(V, -1, -2)
        dV = np.swapaxes(A, -1, -2) @ dO
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dQ = _unheads(dS @ K)
        dK = _unheads(np.swapaxes(dS, -1, -2) @ Q)
        dV = _unheads(dV)
        dxq = dQ @ wq.data.T
        dxk = dK @ wk.data.T + dV @ wv.data.T
        flat = lambda a: a.reshape(-1, a.shape[-1])
        dwq = flat(np.broadcast_to(xq, dQ.shape[:-1] + (d,))).T @ flat(dQ)
        xk_b = flat(np.broadcast_to(xk, dK.shape[:-1] + (d,)))
        dwk = xk_b.T @ flat(dK)
        dwv = xk_b.T @ flat(dV)
        return (_unbroadcast(dxq, xq.shape), _unbroadcast(dxk, xk.shape), dwq, dwk, dwv)

    return _emit("attention", (queries, keys, wq, wk, wv), out, bw, saved=(Q, K, V, A))


# --------------------------------------------------------------------- LSTM


def lstm(x, w_in, w_rec, bias, reverse: bool = False) -> Value:
    """Single-direction LSTM over a [T x d] sequence, zero initial state.

    Gate layout along the 4H axis is (input, forget, cell, output).
    """
    x, w_in, w_rec, bias = (as_value(v) for v in (x, w_in, w_rec, bias))
    T = x.shape[0]
    H = w_rec.shape[0]
    if x.ndim != 2 or w_in.shape != (x.shape[1], 4 * H) or w_rec.shape != (H, 4 * H) \
            or bias.shape != (4 * H,):
        raise ShapeError(
            f"lstm: x {x.shape}, w_in {w_in.shape}, w_rec {w_rec.shape}, bias {bias.shape}")
    order = list(range(T - 1, -1, -1)) if reverse else list(range(T))
    xw = x.data @ w_in.data + bias.data
    U = w_rec.data
    act = np.empty((T, 4 * H))   # sigmoid gates with the cell candidate in slot 2
    cs = np.empty((T, H))
    tcs = np.empty((T, H))
    hs = np.empty((T, H))
    hprev = np.zeros((T, H))
    cprev = np.zeros((T, H))
    h = np.zeros(H)
    c = np.zeros(H)
    for t in order:
        a = xw[t] + h @ U
        s = 0.5 * (1.0 + np.tanh(0.5 * a))
        s[2 * H:3 * H] = np.tanh(a[2 * H:3 * H])
        hprev[t], cprev[t] = h, c
        c = s[H:2 * H] * c + s[:H] * s[2 * H:3 * H]
        tc = np.tanh(c)
        h = s[3 * H:] * tc
        act[t], cs[t], tcs[t], hs[t] = s, c, tc, h
    xd, Wd = x.data, w_in.data

    def bw(g):
        d_a = np.empty((T, 4 * H))
        i, f, ch, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in reversed(order):
            dh = g[t] + dh_next
            tc = tcs[t]
            dc = dc_next + dh * o[t] * (1.0 - tc * tc)
            da = d_a[t]
            da[:H] = dc * ch[t] * i[t] * (1.0 - i[t])
            da[H:2 * H] = dc * cprev[t] * f[t] * (1.0 - f[t])
            da[2 * H:3 * H] = dc * i[t] * (1.0 - ch[t] * ch[t])
            da[3 * H:] = dh * tc * o[t] * (1.0 - o[t])
            dh_next = U @ da
            dc_next = dc * f[t]
        return d_a @ Wd.T, xd.T @ d_a, hprev.T @ d_a, d_a.sum(axis=0)

    return _emit("lstm", (x, w_in, w_rec, bias), hs, bw, saved=(act, cs, tcs, hprev, cprev))


def bilstm(x, fw: Sequence, bw: Sequence) -> Value:
    """Forward and backward LSTMs over the same [T x d] sequence, outputs concatenated [T x 2H].

    ``fw`` and ``bw`` are (w_in, w_rec, bias) triples; both directions advance
    in one loop so the per-step interpreter cost is paid once.
    """
    x = as_value(x)
    fw = [as_value(v) for v in fw]
    bw_ = [as_value(v) for v in bw]
    T = x.shape[0]
    H = fw[1].shape[0]
    for w_in, w_rec, b in (fw, bw_):
        if x.ndim != 2 or w_in.shape != (x.shape[1], 4 * H) or w_rec.shape != (H, 4 * H) \
                or b.shape != (4 * H,):
            raise ShapeError(f"bilstm: x {x.shape}, w_in {w_in.shape}, w_rec {w_rec.shape}, "
                             f"bias {b.shape}")
    xd = x.data
    W = np.stack([fw[0].data, bw_[0].data])            # [2, d, 4H]
    U = np.stack([fw[1].data, bw_[1].data])            # [2, H, 4H]
    xw = np.einsum("td,kdg->ktg", xd, W) + np.stack([fw[2].data, bw_[2].data])[:, None, :]
    tidx = np.stack([np.arange(T), np.arange(T - 1, -1, -1)])  # [2, T] position at loop step
    rows = np.arange(2)
    act = np.empty((2, T, 4 * H))
    tcs = np.empty((2, T, H))
    hs = np.empty((2, T, H))
    hprev = np.zeros((2, T, H))
    cprev = np.zeros((2, T, H))
    h = np.zeros((2, H))
    c = np.zeros((2, H))
    for k in range(T):
        ts = tidx[:, k]
        a = xw[rows, ts] + np.matmul(h[:, None, :], U)[:, 0]
        s = 0.5 * (1.0 + np.tanh(0.5 * a))
        s[:, 2 * H:3 * H] = np.tanh(a[:, 2 * H:3 * H])
        hprev[rows, ts], cprev[rows, ts] = h, c
        c = s[:, H:2 * H] * c + s[:, :H] * s[:, 2 * H:3 * H]
        tc = np.tanh(c)
        h = s[:, 3 * H:] * tc
        act[rows, ts], tcs[rows, ts], hs[rows, ts] = s, tc, h
    out = np.concatenate([hs[0], hs[1]], axis=1)

    def backward_fn(g):
        gk = np.stack([g[:, :H], g[:, H:]])
        i, f, ch, o = act[..., :H], act[..., H:2 * H], act[..., 2 * H:3 * H], act[..., 3 * H:]
        d_a = np.empty((2, T, 4 * H))
        dh_next = np.zeros((2, H))
        dc_next = np.zeros((2, H))
        Ut = np.swapaxes(U, 1, 2)
        for k in range(T - 1, -1, -1):
            ts = tidx[:, k]
            dh = gk[rows, ts] + dh_next
            tc, it, ft, cht, ot = tcs[rows, ts], i[rows, ts], f[rows, ts], ch[rows, ts], o[rows, ts]
            dc = dc_next + dh * ot * (1.0 - tc * tc)
            da = np.concatenate([dc * cht * it * (1.0 - it),
                                 dc * cprev[rows, ts] * ft * (1.0 - ft),
                                 dc * it * (1.0 - cht * cht),
                                 dh * tc * ot * (1.0 - ot)], axis=1)
            d_a[rows, ts] = da
            dh_next = np.matmul(da[:, None, :], Ut)[:, 0]
            dc_next = dc * ft
        dx = np.einsum("ktg,kdg->td", d_a, W)
        dW = np.einsum("td,ktg->kdg", xd, d_a)
        dU = np.einsum("kth,ktg->khg", hprev, d_a)
        db = d_a.sum(axis=1)
        return dx, dW[0], dU[0], db[0], dW[1], dU[1], db[1]

    return _emit("bilstm", (x, *fw, *bw_), out, backward_fn, saved=(act, tcs, hs, hprev, cprev))


# ------------------------------------------------------------------ backward


class Gradients(dict):
    """Leaf -> gradient map; leaves that did not participate read as zeros."""

    def __missing__(self, key: Value) -> np.ndarray:
        return np.zeros_like(key.data)


def backward(tape: Tape, loss: Value) -> Gradients:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape or loss.tape_id is None:
        raise ValueError("loss was not recorded on this tape")
    node_grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.data)}
    leaf_grads = Gradients()
    for idx in range(loss.tape_id, -1, -1):
        g = node_grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape and inp.tape_id is not None:
                key = inp.tape_id
                node_grads[key] = node_grads[key] + gi if key in node_grads else gi
            elif inp._tape is None:
                if inp in leaf_grads:
                    leaf_grads[inp] = leaf_grads[inp] + gi
                else:
                    leaf_grads[inp] = np.array(gi, dtype=DTYPE)
    return leaf_grads


def value_and_grad(fn: Callable[[], Value], params: Iterable[Value]):
    """Evaluate ``fn`` under a fresh tape and return (loss, [grad per param])."""
    with Tape() as tape:
        loss = fn()
    grads = backward(tape, loss)
    return loss.item(), [grads[p] for p in params]


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Value], grads: dict[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> tuple[dict[str, Value], AdamState]:
    """One AdamW update (decoupled weight decay, bias-corrected moments).

    Returns fresh parameter Values; the inputs are left untouched. ``lr``
    overrides ``state.learning_rate`` for schedules.
    """
    if state.step < 0:
        raise ValueError("AdamState.step must be non-negative")
    lr = state.learning_rate if lr is None else lr
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    m_new, v_new, out = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=DTYPE)
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad for {name!r} has shape {g.shape}, param {p.shape}")
        m = state.first_moment.get(name, np.zeros(p.shape))
        v = state.second_moment.get(name, np.zeros(p.shape))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        data = p.data * (1.0 - lr * state.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        out[name] = Value(data, requires_grad=p.requires_grad, name=name)
        m_new[name], v_new[name] = m, v
    new_state = AdamState(state.learning_rate, b1, b2, state.epsilon, state.weight_decay,
                          step, m_new, v_new)
    return out, new_state


def linear_warmup_decay(step: int, total: int, warmup_frac: float) -> float:
    """Multiplier on the base learning rate: linear ramp up, then linear decay to 0."""
    warm = int(round(total * warmup_frac))
    if warm > 0 and step < warm:
        return (step + 1) / warm
    return max(0.0, (total - step) / max(1, total - warm))


# ------------------------------------------------------------ finite differences


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, index, h: float = 1e-4) -> float:
    """Central difference of ``fn`` along one coordinate of ``x`` (x itself is not modified)."""
    xp = np.array(x, dtype=DTYPE)
    xm = np.array(x, dtype=DTYPE)
    xp[index] += h
    xm[index] -= h
    return (fn(xp) - fn(xm)) / (2.0 * h)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))
