"""Dense float64 tensors with reverse-mode differentiation.

Every operation builds its output eagerly and, when any input requires a
gradient, records a closure that maps the output adjoint to input adjoints.
``Tensor.backward`` replays those closures in reverse topological order.

Broadcasting is deliberately limited: binary elementwise ops accept equal
shapes or a 0-d operand. Everything else (biases, positional tables, batch
expansion) goes through an explicitly named op so that shape bugs fail loudly.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, NonFiniteProbe, NotScalar, ShapeMismatch, TapeConsumed

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op or 'tensor'} produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = ""
        self._consumed = False

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        """Wrap a freshly computed array as the output of a recorded op.

        ``backward`` receives the output adjoint and returns one adjoint (or
        None) per parent, in order.
        """
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        out.data = arr
        out.grad = None
        out._op = op
        out._consumed = False
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'!r})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    # -- differentiation ---------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires it.

        The graph is consumed: intermediate closures are dropped, and a second
        call on this tensor (or on any graph sharing its interior) raises
        TapeConsumed.
        """
        if self._consumed:
            raise TapeConsumed("this graph has already been back-propagated")
        if self.ndim != 0:
            raise NotScalar(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        if self._backward is None:
            self._accumulate(np.ones((), dtype=np.float64))
            return
        order = build_tape(self)
        adjoints: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeMismatch(f"adjoint shape {pg.shape} != {parent.shape} in {node._op}")
                if parent._backward is None:
                    parent._accumulate(pg)
                else:
                    prev = adjoints.get(id(parent))
                    adjoints[id(parent)] = pg if prev is None else prev + pg
        for node in order:
            node._backward = None
            node._parents = ()
            node._consumed = True

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.array(g, dtype=np.float64)
        self.grad = g if self.grad is None else self.grad + g


def build_tape(loss: Tensor) -> list[Tensor]:
    """Recorded interior nodes reachable from ``loss``, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed:
            raise TapeConsumed("graph shares nodes with an already back-propagated graph")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._backward is not None or p._consumed:
                if id(p) not in seen:
                    stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only the scalar-with-tensor case reaches here
    return np.asarray(g.sum())


def _binary_check(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape != y.shape and x.ndim != 0 and y.ndim != 0:
        raise ShapeMismatch(f"{op}: shapes {x.shape} and {y.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _binary_check(x, y, "add")

    def backward(g):
        return _reduce_to(g, x.shape), _reduce_to(g, y.shape)

    return Tensor.from_op(x.data + y.data, (x, y), backward, "add")


def sub(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _binary_check(x, y, "sub")

    def backward(g):
        return _reduce_to(g, x.shape), _reduce_to(-g, y.shape)

    return Tensor.from_op(x.data - y.data, (x, y), backward, "sub")


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    _binary_check(x, y, "mul")

    def backward(g):
        return _reduce_to(g * y.data, x.shape), _reduce_to(g * x.data, y.shape)

    return Tensor.from_op(x.data * y.data, (x, y), backward, "mul")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form is exact at 0 and saturates without overflow
    return 0.5 + 0.5 * np.tanh(0.5 * a)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError below
        out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,), "exp")


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return Tensor.from_op(x.data * s, (x,), backward, "silu")


_UNARY = {"sigmoid": sigmoid, "softplus": softplus, "silu": silu, "exp": exp}
_BINARY = {"add": add, "mul": mul}


def elementwise(f: str, x: Tensor, y: Tensor | None = None) -> Tensor:
    """Dispatch a pointwise op by name."""
    if f in _UNARY:
        if y is not None:
            raise TypeError(f"{f} is unary")
        return _UNARY[f](x)
    if f in _BINARY:
        if y is None:
            raise TypeError(f"{f} needs two operands")
        return _BINARY[f](x, y)
    raise ValueError(f"unknown elementwise op {f!r}")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading dims of ``a`` are treated as rows."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    k, n = b.shape

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return Tensor.from_op(out, (a, b), backward, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` to every trailing block of ``x`` whose shape equals ``b.shape``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeMismatch(f"add_bias: {b.shape} does not match trailing dims of {x.shape}")

    def backward(g):
        return g, g.reshape((-1,) + b.shape).sum(axis=0)

    return Tensor.from_op(x.data + b.data, (x, b), backward, "add_bias")


def broadcast_leading(x: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Tile ``x`` to shape ``lead + x.shape``."""
    lead = tuple(lead)
    if not lead:
        return x
    out = np.broadcast_to(x.data, lead + x.shape).copy()
    return Tensor.from_op(out, (x,), lambda g: (g.reshape((-1,) + x.shape).sum(axis=0),), "broadcast_leading")


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``x`` by ``s`` where ``s.shape`` is a prefix of ``x.shape``."""
    if x.shape[: s.ndim] != s.shape:
        raise ShapeMismatch(f"scale_rows: {s.shape} is not a prefix of {x.shape}")
    se = s.data.reshape(s.shape + (1,) * (x.ndim - s.ndim))

    def backward(g):
        gs = (g * x.data).reshape(s.shape + (-1,)).sum(axis=-1)
        return g * se, gs

    return Tensor.from_op(x.data * se, (x, s), backward, "scale_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def backward(g):
        gxhat = g * gamma.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).reshape(-1, c).sum(axis=0), g.reshape(-1, c).sum(axis=0)

    return Tensor.from_op(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Causal per-channel convolution along the token axis.

    ``x[..., L, D]``, ``w[D, K]``, ``b[D]``; output row t sees inputs t-K+1..t.
    """
    *_, length, d = x.shape
    if w.ndim != 2 or w.shape[0] != d or b.shape != (d,):
        raise ShapeMismatch(f"depthwise_conv1d: x {x.shape}, w {w.shape}, b {b.shape}")
    k = w.shape[1]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (k - 1, 0)
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(b.data, x.shape).copy()
    for j in range(k):
        out += xp[..., j : j + length, :] * w.data[:, j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for j in range(k):
            gxp[..., j : j + length, :] += g * w.data[:, j]
            gw[:, j] = (g * xp[..., j : j + length, :]).reshape(-1, d).sum(axis=0)
        return gxp[..., k - 1 :, :], gw, g.reshape(-1, d).sum(axis=0)

    return Tensor.from_op(out, (x, w, b), backward, "depthwise_conv1d")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor.from_op(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.flip(x.data, axis=axis).copy()
    return Tensor.from_op(out, (x,), lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``start:stop`` along ``axis``."""
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return Tensor.from_op(out, (x,), backward, "narrow")


def select(x: Tensor, axis: int, i: int) -> Tensor:
    """Take index ``i`` along ``axis``, dropping that axis."""
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = i
    index = tuple(index)
    out = x.data[index].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return Tensor.from_op(out, (x,), backward, "select")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    nd = parts[0].ndim
    axis = axis % nd
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != nd or any(p.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise ShapeMismatch(f"concat: {[q.shape for q in parts]} along axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return Tensor.from_op(out, parts, backward, "concat")


def concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    """Stack the rows of ``a`` before the rows of ``b`` (token axis is -2)."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"concat_tokens: {a.shape} and {b.shape}")
    return concat([a, b], axis=-2)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x: Tensor) -> Tensor:
    return Tensor.from_op(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum_all")


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ValueError("mean_all of an empty tensor")
    n = x.size
    return Tensor.from_op(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean_all")


def mean(x: Tensor, axes: Iterable[int]) -> Tensor:
    axes = tuple(sorted(a % x.ndim for a in axes))
    n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise ValueError("mean over an empty extent")
    out = x.data.mean(axis=axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / n,)

    return Tensor.from_op(out, (x,), backward, "mean")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, K]`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / len(labels)),)

    return Tensor.from_op(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference oracle


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)))


def _probe(f: Callable[[], Tensor]) -> float:
    with no_grad():
        v = f()
    v = float(v.data) if isinstance(v, Tensor) else float(v)
    if not np.isfinite(v):
        raise NonFiniteProbe(f"probe evaluated to {v}")
    return v


def _check_step(h: float, stencil: int = 2) -> None:
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"step h={h} outside (0, 1e-2]")
    if stencil not in _STENCILS:
        raise ValueError(f"stencil must be one of {sorted(_STENCILS)}, got {stencil}")


# central-difference weights: offset (in units of h) -> coefficient, divided by h
_STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12)),
}


def _central(at: Callable[[float], float], h: float, stencil: int) -> float:
    """Central-difference slope of ``at`` at offset 0. The 4-point stencil has O(h^4) truncation error."""
    return sum(w * at(k * h) for k, w in _STENCILS[stencil]) / h


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, coords=None, stencil: int = 2) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. ``coords``
    restricts the comparison to those flat indices.
    """
    _check_step(h, stencil)
    base = np.array(x.data, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    f(xt).backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    idx = np.arange(base.size) if coords is None else np.asarray(coords, dtype=np.int64)
    numeric = np.empty(len(idx))
    for j, i in enumerate(idx):
        def at(offset, i=i):
            moved = base.copy()
            moved.flat[i] += offset
            return _probe(lambda: f(Tensor(moved)))

        numeric[j] = _central(at, h, stencil)
    return _relative_error(analytic.reshape(-1)[idx], numeric)


def param_grad_check(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, coords_per_param=None, rng=None, stencil: int = 2
) -> float:
    """Finite-difference check of ``loss_fn`` against gradients of leaf params.

    Each param's ``data`` is perturbed in place and restored. With
    ``coords_per_param`` set, that many flat indices per param are sampled
    from ``rng``.
    """
    _check_step(h, stencil)
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        if coords_per_param is None or coords_per_param >= p.size:
            idx = np.arange(p.size)
        else:
            idx = np.sort(rng.choice(p.size, size=coords_per_param, replace=False))
        original = p.data
        numeric = np.empty(len(idx))
        try:
            for j, i in enumerate(idx):
                def at(offset, i=i):
                    p.data = original.copy()
                    p.data.flat[i] += offset
                    return _probe(loss_fn)

                numeric[j] = _central(at, h, stencil)
        finally:
            p.data = original
        worst = max(worst, _relative_error(analytic[idx], numeric))
    return worst
