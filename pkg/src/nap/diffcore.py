"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded together with
their vector-Jacobian products; outside a tape they run eagerly with no
bookkeeping, which is what rollouts and evaluation use.

    with Tape():
        w = Tensor(np.array(3.0), requires_grad=True)
        loss = w * w
    value, grads = value_and_grad(loss, {"w": w})   # 9.0, {"w": 6.0}
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "Tape",
    "Tensor",
    "as_tensor",
    "value_and_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "linear",
    "tanh",
    "relu",
    "exp",
    "log",
    "layer_norm",
    "softmax",
    "logsumexp",
    "attention",
    "history_attention",
    "getitem",
    "gather",
    "concat",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "clip",
    "minimum",
]


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class NumericError(FloatingPointError):
    """A primitive produced a non-finite value."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"non-finite output in op '{op}'" + (f": {detail}" if detail else ""))


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Ordered record of primitive applications, confined to the creating thread."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, root: "Tensor", seed: np.ndarray | float = 1.0) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(root): np.broadcast_to(np.asarray(seed, dtype=np.float64), root.shape)}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = _unbroadcast(gi, inp.shape)
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return grads


def _current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "tape")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, key: getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericError(op)
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.records.append((out, tuple(inputs), vjp))
    return out


def _broadcast_shape(op: str, *shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as err:
        raise ShapeError(f"{op}: cannot broadcast shapes {shapes}") from err


# ----------------------------------------------------------------------------
# element-wise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data
    return _emit("div", out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _emit("log", out, (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a.shape, b.shape)
    take_a = a.data <= b.data
    return _emit(
        "minimum",
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (g * take_a, g * ~take_a),
    )


# ----------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # one GEMM over the flattened leading axes
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def vjp2(g):
            g2 = g.reshape(-1, b.shape[1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _emit("matmul", out, (a, b), vjp2)
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

    def vjp(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _emit("matmul", a.data @ b.data, (a, b), vjp)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for a 2-D weight, as a single recorded op."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes x={x.shape} w={w.shape} b={b.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    out += b.data
    out = out.reshape(x.shape[:-1] + (w.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _emit("linear", out, (x, w, b), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: expected gain/bias of shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), vjp)


def _softmax_data(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    s = _softmax_data(x.data, axis)
    return _emit("softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def logsumexp(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Reduce ``log(sum(exp(x)))`` over ``axis``; entries where ``mask`` is False are excluded."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericError("logsumexp", "empty or non-finite reduction")
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    w = e / s

    def vjp(g):
        return (np.expand_dims(g, axis) * w,)

    return _emit("logsumexp", out, (x,), vjp)


def attention(q, k, v, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention, ``mask[..., i, j]`` True iff query i may read key j.

    q, k, v are ``(..., L, d)``; the mask broadcasts against ``(..., L, L)`` and every
    row must allow at least one key.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention: shapes q={q.shape} k={k.shape} v={v.shape}")
    mask = np.asarray(mask, dtype=bool)
    n = q.shape[-2]
    if mask.shape[-2:] != (n, n):
        raise ShapeError(f"attention: mask {mask.shape} does not cover {n} tokens")
    if not mask.any(axis=-1).all():
        raise ShapeError("attention: a query row has no admissible key")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    scores = np.where(mask, scores, -np.inf)
    p = _softmax_data(scores, -1)
    out = p @ v.data

    def vjp(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv

    return _emit("attention", out, (q, k, v), vjp)


def history_attention(q, k, v, h_max: int, hist_valid: np.ndarray) -> Tensor:
    """Attention under the history/query layout, without materialising query-query scores.

    Tokens ``[:h_max]`` are history slots (``hist_valid`` ``(B, h_max)`` marks real ones) and
    the rest are queries. Real history rows read real history keys; query rows read real
    history keys plus their own key; padded history rows read only themselves. The result
    equals :func:`attention` with the corresponding full mask.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1] or q.ndim != 4:
        raise ShapeError(f"history_attention: shapes q={q.shape} k={k.shape} v={v.shape}")
    hv = np.asarray(hist_valid, dtype=bool)
    if hv.shape != (q.shape[0], h_max):
        raise ShapeError(f"history_attention: hist_valid {hv.shape} != {(q.shape[0], h_max)}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    qh, kh, vh = qd[:, :, :h_max], kd[:, :, :h_max], vd[:, :, :h_max]
    qq, kq, vq = qd[:, :, h_max:], kd[:, :, h_max:], vd[:, :, h_max:]
    key_ok = hv[:, None, None, :]

    # history block: real keys, plus self for padded rows
    eye = np.eye(h_max, dtype=bool)[None, None]
    hh_mask = (key_ok & hv[:, None, :, None]) | (eye & ~hv[:, None, :, None])
    s_hh = np.where(hh_mask, (qh @ np.swapaxes(kh, -1, -2)) * scale, -np.inf)
    p_hh = _softmax_data(s_hh, -1) if h_max else s_hh
    out_h = p_hh @ vh

    # query block: [history keys | self]
    s_qh = np.where(key_ok, (qq @ np.swapaxes(kh, -1, -2)) * scale, -np.inf)
    s_self = (qq * kq).sum(-1, keepdims=True) * scale
    p_all = _softmax_data(np.concatenate([s_qh, s_self], axis=-1), -1)
    p_qh, p_self = p_all[..., :h_max], p_all[..., h_max:]
    out_q = p_qh @ vh + p_self * vq
    out = np.concatenate([out_h, out_q], axis=2)

    def vjp(g):
        gh, gq = g[:, :, :h_max], g[:, :, h_max:]
        # history rows
        gp = gh @ np.swapaxes(vh, -1, -2)
        gs_hh = p_hh * (gp - (gp * p_hh).sum(-1, keepdims=True)) * scale
        g_qh = gs_hh @ kh
        g_kh = np.swapaxes(gs_hh, -1, -2) @ qh
        g_vh = np.swapaxes(p_hh, -1, -2) @ gh
        # query rows
        gp_qh = gq @ np.swapaxes(vh, -1, -2)
        gp_self = (gq * vq).sum(-1, keepdims=True)
        dot = (gp_qh * p_qh).sum(-1, keepdims=True) + gp_self * p_self
        gs_qh = p_qh * (gp_qh - dot) * scale
        gs_self = p_self * (gp_self - dot) * scale
        g_qq = gs_qh @ kh + gs_self * kq
        g_kh = g_kh + np.swapaxes(gs_qh, -1, -2) @ qq
        g_kq = gs_self * qq
        g_vh = g_vh + np.swapaxes(p_qh, -1, -2) @ gq
        g_vq = p_self * gq
        return (
            np.concatenate([g_qh, g_qq], axis=2),
            np.concatenate([g_kh, g_kq], axis=2),
            np.concatenate([g_vh, g_vq], axis=2),
        )

    return _emit("history_attention", out, (q, k, v), vjp)


# ----------------------------------------------------------------------------
# indexing and structure


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data[key]
    except IndexError as err:
        raise ShapeError(f"getitem: {err}") from err
    basic = _is_basic_key(key)

    def vjp(g):
        z = np.zeros_like(x.data)
        if basic:
            z[key] += g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _emit("getitem", out, (x,), vjp)


def gather(x, index: np.ndarray, axis: int = -1) -> Tensor:
    """``np.take_along_axis`` with accumulation of repeated indices in the backward pass."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != x.ndim:
        raise ShapeError(f"gather: index rank {index.ndim} != input rank {x.ndim}")
    out = np.take_along_axis(x.data, index, axis=axis)
    axis = axis % x.ndim

    def vjp(g):
        z = np.zeros_like(x.data)
        grids = list(np.indices(index.shape, sparse=True))
        grids[axis] = index
        np.add.at(z, tuple(grids), g)
        return (z,)

    return _emit("gather", out, (x,), vjp)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from err
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _emit("mean", out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: {err}") from err
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


# ----------------------------------------------------------------------------


def value_and_grad(loss: Tensor, params: Mapping[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
    """Backpropagate a scalar ``loss`` to every tensor in ``params``.

    Parameters the loss does not depend on receive zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"value_and_grad: loss must be a scalar, got shape {loss.shape}")
    value = float(loss.data)
    if loss.tape is None:
        return value, {k: np.zeros_like(p.data) for k, p in params.items()}
    grads = loss.tape.backward(loss)
    out = {}
    for k, p in params.items():
        g = grads.get(id(p))
        out[k] = np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
    return value, out
