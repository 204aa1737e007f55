"""Dense float64 tensors with tape-based reverse-mode differentiation.

Tensors created without a tape are plain values; operations on them skip all
bookkeeping, which is what evaluation paths use. A :class:`Tape` records every
operation whose inputs depend on a parameter, and :func:`backward` replays the
record in reverse creation order.

Broadcasting is deliberately narrow. ``add``, ``sub`` and ``mul`` accept either
equal shapes or a right operand whose shape equals the trailing dimensions of
the left one (bias-style). ``matmul`` lets the right operand's batch dims match
the trailing batch dims of the left operand.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "tape", "node", "requires_grad", "name")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None,
                 requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node = node
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar, same rules as the functions below
    def __add__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __mul__(self, other): return mul(self, other)
    def __matmul__(self, other): return matmul(self, other)


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    backward: Backward | None
    name: str | None = None


@dataclass
class Tape:
    """Ordered record of operations; nodes are appended in creation order."""

    nodes: list[_Node] = field(default_factory=list)
    params: dict[str, int] = field(default_factory=dict)
    _param_shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered on this tape")
        t = Tensor(value, tape=self, requires_grad=True, name=name)
        t.node = self._append(_Node("param", (), None, name))
        self.params[name] = t.node
        self._param_shapes[name] = t.shape
        return t

    def constant(self, value) -> Tensor:
        return Tensor(value, tape=self)

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)


Gradients = dict[str, np.ndarray]


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: Backward) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{op}: inputs belong to different tapes")
            tape = t.tape
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data, tape=tape)
    node = tape._append(_Node(op, tuple(t.node if t.requires_grad else None for t in inputs), backward))
    return Tensor(data, tape=tape, node=node, requires_grad=True)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode gradients of a scalar ``loss`` for every parameter on ``tape``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not None and loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[loss.node] = np.ones_like(loss.data)
        for idx in range(loss.node, -1, -1):
            g = grads.get(idx)
            node = tape.nodes[idx]
            if g is None or node.backward is None:
                continue
            for src, gin in zip(node.inputs, node.backward(g)):
                if src is None or gin is None:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gin
                else:
                    grads[src] = gin
    out: Gradients = {}
    for name, idx in tape.params.items():
        g = grads.get(idx)
        out[name] = np.zeros(tape._param_shapes[name]) if g is None else np.asarray(g, dtype=np.float64).reshape(tape._param_shapes[name])
    return out


# ---------------------------------------------------------------- elementwise

def _check_trailing(op: str, a: Tensor, b: Tensor) -> int:
    """Number of leading dims of ``a`` that ``b`` broadcasts over."""
    if a.shape == b.shape:
        return 0
    lead = a.data.ndim - b.data.ndim
    if lead > 0 and a.shape[lead:] == b.shape:
        return lead
    raise ValueError(f"shape mismatch in {op}: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, lead: int) -> np.ndarray:
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    lead = _check_trailing("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, _unbroadcast(g, lead)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    lead = _check_trailing("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -_unbroadcast(g, lead)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    lead = _check_trailing("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, _unbroadcast(g * ad, lead)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0  # subgradient 0 at exactly 0
    return _emit("relu", (a,), np.where(on, a.data, 0.0), lambda g: (g * on,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    k = np.where(on, 1.0, slope)
    return _emit("leaky_relu", (a,), a.data * k, lambda g: (g * k,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * s,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"shape mismatch in matmul: {a.shape} vs {b.shape} (need ndim >= 2)")
    lead = a.data.ndim - b.data.ndim
    if lead < 0 or a.shape[-1] != b.shape[-2] or a.shape[lead:-2] != b.shape[:-2]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out = ad @ bd

    def back(g):
        if bd.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        if lead == 0:
            return ga, np.swapaxes(ad, -1, -2) @ g
        # fold the extra leading dims into the row axis
        qa = np.moveaxis(ad.reshape((-1,) + ad.shape[lead:]), 0, -3)
        qg = np.moveaxis(g.reshape((-1,) + g.shape[lead:]), 0, -3)
        qa = qa.reshape(qa.shape[:-3] + (-1, qa.shape[-1]))
        qg = qg.reshape(qg.shape[:-3] + (-1, qg.shape[-1]))
        return ga, np.swapaxes(qa, -1, -2) @ qg

    return _emit("matmul", (a, b), out, back)


def conv1d(x, kernel) -> Tensor:
    """Valid 1-D convolution over axis -2.

    ``x`` is ``[..., L, C_in]`` and ``kernel`` is ``[W, C_in, C_out]``; the
    result is ``[..., L - W + 1, C_out]``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.data.ndim != 3 or x.data.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise ValueError(f"shape mismatch in conv1d: {x.shape} vs {kernel.shape}")
    width = kernel.shape[0]
    length = x.shape[-2] - width + 1
    if length < 1:
        raise ValueError(f"shape mismatch in conv1d: kernel width {width} exceeds length {x.shape[-2]}")
    xd, kd = x.data, kernel.data
    out = xd[..., 0:length, :] @ kd[0]
    for w in range(1, width):
        out = out + xd[..., w:w + length, :] @ kd[w]

    def back(g):
        gx = np.zeros_like(xd)
        gk = np.empty_like(kd)
        g2 = g.reshape(-1, g.shape[-1])
        for w in range(width):
            gx[..., w:w + length, :] += g @ kd[w].T
            gk[w] = xd[..., w:w + length, :].reshape(-1, xd.shape[-1]).T @ g2
        return gx, gk

    return _emit("conv1d", (x, kernel), out, back)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ValueError(f"shape mismatch in reshape: {a.shape} vs {tuple(shape)}") from None
    src = a.shape
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ValueError(f"shape mismatch in transpose: {a.shape} vs axes {axes}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing: ints and slices only."""
    a = as_tensor(a)
    if not isinstance(index, tuple):
        index = (index,)
    if not all(isinstance(i, (int, slice)) or i is Ellipsis for i in index):
        raise TypeError("slice_ supports ints, slices and Ellipsis only")
    out = a.data[index]
    src = a.shape

    def back(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _emit("slice", (a,), np.array(out, dtype=np.float64), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of empty sequence")
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ValueError(f"shape mismatch in concat: {ts[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])
    out = np.concatenate([t.data for t in ts], axis=ax)

    def back(g):
        return tuple(np.take(g, range(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(ts)))

    return _emit("concat", ts, out, back)


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    if axis is None:
        return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % a.data.ndim
    return _emit("sum", (a,), a.data.sum(axis=ax),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),))


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- attention

def masked_softmax(scores, mask) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0.

    ``mask`` must broadcast to ``scores`` (a ``[N, N]`` adjacency mask is fine
    for ``[..., N, N]`` scores). Every row needs at least one true entry.
    """
    scores = as_tensor(scores)
    try:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    except ValueError:
        raise ValueError(f"shape mismatch in masked_softmax: {scores.shape} vs {np.shape(mask)}") from None
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no unmasked entries")
    s = scores.data
    top = np.max(np.where(m, s, -np.inf), axis=-1, keepdims=True)
    e = np.where(m, np.exp(np.where(m, s - top, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("masked_softmax", (scores,), y, back)


# ---------------------------------------------------------------- verification

def grad_check(fn: Callable, point, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``point`` is an array (``fn`` receives one Tensor) or a mapping of names to
    arrays (``fn`` receives a dict of Tensors). The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    named = isinstance(point, dict)
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()} if named \
        else {"x": np.array(point, dtype=np.float64)}

    def call(values, tape=None):
        if tape is None:
            args = {k: Tensor(v) for k, v in values.items()}
        else:
            args = {k: tape.param(k, v) for k, v in values.items()}
        out = fn(args) if named else fn(args["x"])
        out = as_tensor(out)
        if out.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise ValueError("grad_check: non-finite function value")
        return out

    tape = Tape()
    loss = call(base, tape)
    analytic = backward(tape, loss)
    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = call(base).item()
            flat[k] = orig - eps
            down = call(base).item()
            flat[k] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(ga[k] - numeric) / max(1.0, abs(ga[k]))
            worst = max(worst, err)
    return worst
