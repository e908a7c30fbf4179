"""Dense float64 tensors with a reverse-mode gradient tape.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and
at least one input requires gradients, the operation appends a node to the
tape holding its inputs and a closure computing the vector-Jacobian
product. :meth:`Tape.gradient` walks the nodes in reverse append order.

Without an active tape every op is a plain numpy computation, which is what
generation and evaluation use.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, log_softmax

from ..errors import ContractError, ShapeError

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    # make numpy defer to our reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("kind", "out", "inputs", "backward")

    def __init__(self, kind, out, inputs, backward):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records differentiable operations executed while it is active.

    Usage::

        with Tape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)

    A tape is single-writer; do not share one across threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Return d(target)/d(source) for each source.

        ``seed`` defaults to ones, so a non-scalar target is differentiated
        as the sum of its elements. Sources the target does not depend on
        get exact zeros.
        """
        if seed is None:
            seed = np.ones_like(target.data)
        grads: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=np.float64)}
        source_ids = {id(s) for s in sources}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
            # keep gradients of sources that are also intermediate results
            if id(node.out) in source_ids:
                grads[id(node.out)] = g
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _record(kind: str, out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    tracked = bool(_ACTIVE) and any(isinstance(x, Tensor) and x.requires_grad for x in inputs)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        _ACTIVE[-1].nodes.append(_Node(kind, out, inputs, backward))
    return out


def record_op(kind: str, out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Public hook for fused operations defined outside this module.

    ``backward(g)`` must return one gradient (or None) per entry of ``inputs``.
    """
    return _record(kind, out_data, inputs, backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _record("div", out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _record("relu", out, (a,), lambda g: (g * (out > 0),))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if bd.ndim == 2 and ad.ndim > 2:
            # shared right operand: fold the batch axes into one product
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(g.shape[:-1] + (bd.shape[0],))
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g2
        elif ad.ndim == 2 and bd.ndim > 2:
            if a.requires_grad:
                ga = np.einsum("...in,...jn->ij", g, bd, optimize=True)
            if b.requires_grad:
                gb = ad.T @ g
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(bd, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(ad, -1, -2) @ g
        return (None if ga is None else _unbroadcast(ga, ad.shape),
                None if gb is None else _unbroadcast(gb, bd.shape))

    if bd.ndim == 2 and ad.ndim > 2:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        out = ad @ bd
    return _record("matmul", out, (a, b), backward)


def einsum(spec: str, *operands) -> Tensor:
    """Explicit-output einsum.

    Each operand index must appear in the output or in another operand, and
    no operand may repeat an index; that covers contractions and batched
    products, which is all the model needs.
    """
    ops = tuple(as_tensor(x) for x in operands)
    lhs, out_sub = spec.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ShapeError(f"einsum spec {spec!r} expects {len(in_subs)} operands, got {len(ops)}")
    for i, s in enumerate(in_subs):
        if len(set(s)) != len(s):
            raise ShapeError(f"einsum operand {i} repeats an index in {spec!r}")
        others = out_sub + "".join(in_subs[:i] + in_subs[i + 1:])
        if any(c not in others for c in s):
            raise ShapeError(f"einsum operand {i} sums out an index unique to it in {spec!r}")
    try:
        out = np.einsum(spec, *(o.data for o in ops), optimize=len(ops) > 2)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    datas = [o.data for o in ops]

    def backward(g):
        grads = []
        for i, s in enumerate(in_subs):
            if not ops[i].requires_grad:
                grads.append(None)
                continue
            rest = [datas[j] for j in range(len(ops)) if j != i]
            rest_subs = [in_subs[j] for j in range(len(ops)) if j != i]
            sub_spec = ",".join([out_sub] + rest_subs) + "->" + s
            grads.append(np.einsum(sub_spec, g, *rest, optimize=len(rest) > 1))
        return tuple(grads)

    return _record("einsum", out, ops, backward)


def gru_step(gx, h, w_h, b_h) -> Tensor:
    """Fused GRU state update.

    ``gx`` holds the input projections ``x @ W_x + b_x`` laid out as
    ``[reset | update | candidate]`` ``(B, 3H)``; ``h`` is the previous state
    ``(B, H)``. Computes::

        r, z = sigmoid(gx_r + gh_r), sigmoid(gx_z + gh_z)
        n = tanh(gx_n + r * gh_n)
        h' = (1 - z) * n + z * h

    with ``gh = h @ w_h + b_h``.
    """
    gx, h, w_h, b_h = (as_tensor(t) for t in (gx, h, w_h, b_h))
    hd = h.shape[-1]
    if gx.shape[-1] != 3 * hd or w_h.shape != (hd, 3 * hd) or b_h.shape != (3 * hd,):
        raise ShapeError(f"gru_step: gx {gx.shape}, h {h.shape}, w_h {w_h.shape}, b_h {b_h.shape} disagree")
    hp = h.data
    gh = hp @ w_h.data + b_h.data
    gxd = gx.data
    rz = expit(gxd[..., : 2 * hd] + gh[..., : 2 * hd])
    r, z = rz[..., :hd], rz[..., hd:]
    gh_n = gh[..., 2 * hd:]
    n = np.tanh(gxd[..., 2 * hd:] + r * gh_n)
    out = n + z * (hp - n)

    def backward(g):
        da_n = g * (1.0 - z) * (1.0 - n * n)
        da_r = da_n * gh_n * r * (1.0 - r)
        da_z = g * (hp - n) * z * (1.0 - z)
        dgx = np.concatenate([da_r, da_z, da_n], axis=-1)
        dgh = np.concatenate([da_r, da_z, da_n * r], axis=-1)
        dh = g * z + dgh @ w_h.data.T if h.requires_grad else None
        dw = hp.reshape(-1, hd).T @ dgh.reshape(-1, 3 * hd) if w_h.requires_grad else None
        db = dgh.reshape(-1, 3 * hd).sum(axis=0) if b_h.requires_grad else None
        return dgx, dh, dw, db

    return _record("gru_step", out, (gx, h, w_h, b_h), backward)


def gru_scan(gx, h0, w_h, b_h) -> Tensor:
    """:func:`gru_step` applied along axis 1 of ``gx`` ``(B, T, 3H)``.

    Returns every state ``(B, T, H)``; the backward pass runs
    backpropagation through time inside one tape node.
    """
    gx, h0, w_h, b_h = (as_tensor(t) for t in (gx, h0, w_h, b_h))
    hd = h0.shape[-1]
    if gx.ndim != 3 or gx.shape[-1] != 3 * hd or w_h.shape != (hd, 3 * hd) or b_h.shape != (3 * hd,):
        raise ShapeError(f"gru_scan: gx {gx.shape}, h0 {h0.shape}, w_h {w_h.shape}, b_h {b_h.shape} disagree")
    steps = gx.shape[1]
    wd, bd, gxd = w_h.data, b_h.data, gx.data
    prev = np.empty((steps,) + h0.shape)
    rs, zs, ns, ghn = (np.empty((steps,) + h0.shape) for _ in range(4))
    h = h0.data
    out = np.empty(gx.shape[:2] + (hd,))
    for t in range(steps):
        prev[t] = h
        gh = h @ wd + bd
        rz = expit(gxd[:, t, : 2 * hd] + gh[:, : 2 * hd])
        rs[t], zs[t] = rz[:, :hd], rz[:, hd:]
        ghn[t] = gh[:, 2 * hd:]
        ns[t] = np.tanh(gxd[:, t, 2 * hd:] + rs[t] * ghn[t])
        h = ns[t] + zs[t] * (h - ns[t])
        out[:, t] = h

    def backward(g):
        dgx = np.empty(gxd.shape)
        dgh_all = np.empty((steps,) + h0.shape[:-1] + (3 * hd,))
        carry = np.zeros(h0.shape)
        for t in reversed(range(steps)):
            gt = g[:, t] + carry
            r, z, n, hp = rs[t], zs[t], ns[t], prev[t]
            da_n = gt * (1.0 - z) * (1.0 - n * n)
            da_r = da_n * ghn[t] * r * (1.0 - r)
            da_z = gt * (hp - n) * z * (1.0 - z)
            dgx[:, t, :hd] = da_r
            dgx[:, t, hd:2 * hd] = da_z
            dgx[:, t, 2 * hd:] = da_n
            dgh = dgh_all[t]
            dgh[:, :hd] = da_r
            dgh[:, hd:2 * hd] = da_z
            dgh[:, 2 * hd:] = da_n * r
            carry = gt * z + dgh @ wd.T
        flat = dgh_all.reshape(-1, 3 * hd)
        dw = prev.reshape(-1, hd).T @ flat if w_h.requires_grad else None
        db = flat.sum(axis=0) if b_h.requires_grad else None
        return dgx, carry, dw, db

    return _record("gru_scan", out, (gx, h0, w_h, b_h), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; backward scatters with ``np.add.at``."""
    a = as_tensor(a)
    shape = a.shape

    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("getitem", a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    n = len(ts)
    return _record("stack", out, ts,
                   lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))


# ---------------------------------------------------------------------------
# reductions and scans
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)
    return tsum(a, axis, keepdims) * (1.0 / count)


def cumsum(a, axis: int = 0) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _record("cumsum", np.cumsum(a.data, axis=axis), (a,), backward)


# ---------------------------------------------------------------------------
# softmax and losses
# ---------------------------------------------------------------------------


def masked_softmax(logits, mask) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is true.

    Disallowed entries are exactly zero and receive no gradient. A row with
    no allowed entry raises :class:`ContractError`.
    """
    logits = as_tensor(logits)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax: a row has no allowed entries")
    x = np.where(mask, logits.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(x), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("masked_softmax", p, (logits,), backward)


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``target``."""
    logits = as_tensor(logits)
    x = logits.data
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), x.shape)
    elem = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def backward(g):
        return (g * (expit(x) - t) / n,)

    return _record("bce_with_logits", np.asarray(elem.mean()), (logits,), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy; ``logits`` is (B, C), ``labels`` int (B,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (B, C) logits and (B,) labels, got "
                         f"{logits.shape} and {labels.shape}")
    lsm = log_softmax(logits.data, axis=-1)
    rows = np.arange(labels.size)
    n = labels.size

    def backward(g):
        d = np.exp(lsm)
        d[rows, labels] -= 1.0
        return (g * d / n,)

    return _record("cross_entropy", np.asarray(-lsm[rows, labels].mean()), (logits,), backward)

