"""Dense tensors plus a recorded-trace reverse-mode gradient engine.

Values are immutable numpy arrays (f32 or f64). While a Tape is active,
every operation appends a node to it; Tape.backward walks the trace in
reverse and returns per-leaf adjoints. With no tape active the same ops
run as plain numpy, which is what inference uses.
"""

from __future__ import annotations

import numpy as np

from .errors import AxisOutOfRange, DivisionDomain, NonScalarRoot, ShapeMismatch

Array = np.ndarray

_FLOATS = (np.float32, np.float64)

# ---------------------------------------------------------------------------
# tape machinery
# ---------------------------------------------------------------------------

_tape_stack: list["Tape"] = []


def current_tape() -> "Tape | None":
    return _tape_stack[-1] if _tape_stack else None


class Node:
    """One recorded operation: parents by node index, value, and a vjp."""

    __slots__ = ("op", "parents", "needs", "vjp", "value")

    def __init__(self, op, parents, needs, vjp, value):
        self.op = op
        self.parents = parents  # tuple[int | None], aligned with op inputs
        self.needs = needs      # tuple[bool], which inputs want gradients
        self.vjp = vjp          # callable(g, needs) -> tuple[Array | None]
        self.value = value


class Tape:
    """Append-only trace of operations; append order is topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.adjoints: list[Array | None] | None = None
        self._leaves: dict[int, int] = {}  # id(tensor) -> node index
        self._leaf_refs: list["Tensor"] = []  # keeps ids stable for _leaves

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def watch(self, t: "Tensor") -> int:
        """Register t as a leaf (done automatically for requires_grad inputs)."""
        idx = self._leaves.get(id(t))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(Node("leaf", (), (), None, t.data))
            self._leaves[id(t)] = idx
            self._leaf_refs.append(t)
            t._tape = self
            t._node = idx
        return idx

    def backward(self, root: "Tensor") -> "Gradients":
        """Reverse-traverse from root (scalar) and return the adjoint map."""
        if root._tape is not self or root._node is None:
            raise NonScalarRoot("root value was not recorded on this tape")
        if root.data.size != 1:
            raise NonScalarRoot(f"root must be scalar, got shape {root.shape}")
        adj: list[Array | None] = [None] * len(self.nodes)
        adj[root._node] = np.ones_like(root.data)
        for i in range(root._node, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            grads = node.vjp(g, node.needs)
            for pi, gp in zip(node.parents, grads):
                if pi is None or gp is None:
                    continue
                if adj[pi] is None:
                    adj[pi] = gp
                else:
                    adj[pi] = adj[pi] + gp
        self.adjoints = adj
        return Gradients(self, adj)


class Gradients:
    """Adjoints of one backward pass, queryable per tensor."""

    def __init__(self, tape: Tape, adjoints):
        self._tape = tape
        self._adjoints = adjoints

    def grad(self, t: "Tensor") -> Array:
        """Adjoint of t; zeros for leaves the root never reached."""
        idx = self._tape._leaves.get(id(t))
        if idx is None and t._tape is self._tape:
            idx = t._node
        if idx is None or self._adjoints[idx] is None:
            return np.zeros_like(t.data)
        g = self._adjoints[idx]
        if g.shape != t.shape:  # size-1 root bookkeeping
            g = g.reshape(t.shape)
        return np.ascontiguousarray(g)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Immutable dense array; `requires_grad` marks it as a trainable leaf."""

    __slots__ = ("data", "requires_grad", "_tape", "_node")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._node = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _wrap(arr: Array) -> "Tensor":
        t = Tensor.__new__(Tensor)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = False
        t._tape = None
        t._node = None
        return t

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad=False):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- plumbing --------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def _index_on(self, tape: Tape) -> int | None:
        """Node index on tape, registering a leaf for trainable tensors."""
        if self._tape is tape and self._node is not None:
            return self._node
        idx = tape._leaves.get(id(self))
        if idx is not None:
            return idx
        if self.requires_grad:
            return tape.watch(self)
        return None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # -- operator sugar --------------------------------------------------------

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

    def __pow__(self, p):
        return power(self, p)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------


def apply_op(op_name: str, out_data: Array, inputs, vjp) -> Tensor:
    """Record one operation on the active tape (if any) and wrap its output.

    `vjp(g, needs)` must return one gradient array per input, in order;
    entries whose `needs` flag is False may be None. This is the extension
    point higher modules use for composite ops (conv, scans, pooling...).
    """
    tape = current_tape()
    out_data = np.asarray(out_data)
    if not out_data.flags["C_CONTIGUOUS"]:
        out_data = np.ascontiguousarray(out_data)
    if tape is None:
        return Tensor._wrap(out_data)
    parents = tuple(t._index_on(tape) for t in inputs)
    needs = tuple(p is not None for p in parents)
    if not any(needs):
        return Tensor._wrap(out_data)
    idx = len(tape.nodes)
    tape.nodes.append(Node(op_name, parents, needs, vjp, out_data))
    out = Tensor._wrap(out_data)
    out._tape = tape
    out._node = idx
    return out


def _binary_shapes(a: Tensor, b: Tensor):
    """Allowed broadcasting: identical shapes or size-1 against anything."""
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return np.broadcast_shapes(a.shape, b.shape)
    raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(g: Array, shape) -> Array:
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape).astype(g.dtype)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _binary_shapes(a, b)
    out = a.data + b.data

    def vjp(g, needs):
        ga = _unbroadcast(g, a.shape) if needs[0] else None
        gb = _unbroadcast(g, b.shape) if needs[1] else None
        return ga, gb

    return apply_op("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _binary_shapes(a, b)
    out = a.data - b.data

    def vjp(g, needs):
        ga = _unbroadcast(g, a.shape) if needs[0] else None
        gb = _unbroadcast(-g, b.shape) if needs[1] else None
        return ga, gb

    return apply_op("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _binary_shapes(a, b)
    out = a.data * b.data

    def vjp(g, needs):
        ga = _unbroadcast(g * b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(g * a.data, b.shape) if needs[1] else None
        return ga, gb

    return apply_op("mul", out, (a, b), vjp)


def div(a, b, strict=False) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _binary_shapes(a, b)
    if strict and np.any(b.data == 0):
        raise DivisionDomain("division by exact zero in strict mode")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g, needs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / b.data
        ga = _unbroadcast(g * inv, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * a.data * inv * inv, b.shape) if needs[1] else None
        return ga, gb

    return apply_op("div", out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", -a.data, (a,), lambda g, needs: (-g,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g, needs: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return apply_op("log", out, (a,), lambda g, needs: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return apply_op("sqrt", out, (a,), lambda g, needs: (g * (0.5 / out),))


def absolute(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)
    # subgradient 0 at the kink
    return apply_op("abs", out, (a,), lambda g, needs: (g * np.sign(a.data),))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a scalar exponent p."""
    a = as_tensor(a)
    p = float(p)
    out = np.power(a.data, p)

    def vjp(g, needs):
        d = p * np.power(a.data, p - 1.0)
        if p < 1.0:
            # x**p has an unbounded slope at 0; pin the subgradient to 0
            d = np.where(a.data == 0.0, 0.0, d)
        return (g * d,)

    return apply_op("pow", out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g, needs):
        return (g * out * (1.0 - out),)

    return apply_op("sigmoid", out, (a,), vjp)


def silu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid_arr(x)
    out = x * s

    def vjp(g, needs):
        return (g * (s + x * s * (1.0 - s)),)

    return apply_op("silu", out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype)

    def vjp(g, needs):
        return (g * _sigmoid_arr(a.data),)

    return apply_op("softplus", out, (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through inside the interval."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def vjp(g, needs):
        mask = (a.data >= lo) & (a.data <= hi)
        return (g * mask,)

    return apply_op("clip", out, (a,), vjp)


def _sigmoid_arr(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "pow": power,
    "abs": absolute,
    "sqrt": sqrt,
    "silu": silu,
    "sigmoid": sigmoid,
}


def elementwise(op: str, a, b=None, **kw) -> Tensor:
    """Dispatch by name; binary ops require b, unary ops forbid it."""
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op {op!r}")
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return fn(a, b, **kw)
    if op == "pow":
        return fn(a, b, **kw)
    if b is not None:
        raise TypeError(f"{op} takes one operand")
    return fn(a, **kw)


# ---------------------------------------------------------------------------
# matmul / reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return apply_op("matmul", out, (a, b), vjp)


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    norm = []
    for ax in axes:
        if ax < -ndim or ax >= ndim:
            raise AxisOutOfRange(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise AxisOutOfRange("duplicate reduction axes")
    return tuple(sorted(norm))


def reduce(op: str, a: Tensor, axes=None, keepdims=False) -> Tensor:
    """sum/mean/min/max over axes; min/max ties route to first occurrence."""
    a = as_tensor(a)
    axes = _norm_axes(axes, a.data.ndim)
    if op in ("sum", "mean"):
        out = getattr(np, op)(a.data, axis=axes, keepdims=keepdims)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
        scale = 1.0 / count if op == "mean" else 1.0

        def vjp(g, needs):
            gg = g if keepdims else np.expand_dims(g, axes)
            return (np.broadcast_to(gg * scale, a.shape).astype(a.dtype),)

        return apply_op(op, np.asarray(out), (a,), vjp)

    if op not in ("min", "max"):
        raise ValueError(f"unknown reduction {op!r}")

    # move reduced axes last so argmin/argmax picks the first occurrence
    kept = tuple(i for i in range(a.data.ndim) if i not in axes)
    perm = kept + axes
    moved = np.transpose(a.data, perm)
    kept_shape = moved.shape[: len(kept)]
    flat = moved.reshape(kept_shape + (-1,)) if kept else moved.reshape(1, -1)
    pick = np.argmin(flat, axis=-1) if op == "min" else np.argmax(flat, axis=-1)
    vals = np.take_along_axis(flat, pick[..., None], axis=-1)[..., 0]
    out = vals.reshape(kept_shape)
    if keepdims:
        out = np.expand_dims(out, axes)

    def vjp(g, needs):
        gg = g if keepdims else np.expand_dims(g, axes)
        gg = np.transpose(gg, perm).reshape(flat.shape[:-1] + (1,))
        z = np.zeros_like(flat)
        np.put_along_axis(z, pick[..., None], gg, axis=-1)
        z = z.reshape(moved.shape)
        return (np.transpose(z, np.argsort(perm)),)

    return apply_op(op, np.asarray(out), (a,), vjp)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g, needs):
        return (g.reshape(a.shape),)

    return apply_op("reshape", out, (a,), vjp)


def transpose(a: Tensor, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def vjp(g, needs):
        return (np.transpose(g, inv),)

    return apply_op("transpose", out, (a,), vjp)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op("concat", out, tuple(tensors), vjp)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (view-style) indexing; gradient scatters back into zeros."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g, needs):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return apply_op("getitem", np.ascontiguousarray(out), (a,), vjp)


def pad_nd(a: Tensor, pad_width, mode: str = "zero") -> Tensor:
    """Pad with zeros or reflection; pad_width as for numpy.pad."""
    a = as_tensor(a)
    pad_width = tuple((int(l), int(r)) for l, r in pad_width)
    if mode == "zero":
        out = np.pad(a.data, pad_width)
        slices = tuple(
            slice(l, l + s) for (l, _), s in zip(pad_width, a.shape)
        )

        def vjp(g, needs):
            return (g[slices],)

        return apply_op("pad", out, (a,), vjp)

    if mode != "reflect":
        raise ValueError(f"unknown pad mode {mode!r}")
    idx = np.pad(
        np.arange(a.size, dtype=np.intp).reshape(a.shape),
        pad_width,
        mode="reflect",
    )
    out = a.data.reshape(-1)[idx]

    def vjp(g, needs):
        z = np.zeros(a.size, dtype=g.dtype)
        np.add.at(z, idx.reshape(-1), g.reshape(-1))
        return (z.reshape(a.shape),)

    return apply_op("pad", out, (a,), vjp)


def take_tokens(a: Tensor, perm: Array, axis: int = 1) -> Tensor:
    """Permute along one axis by a bijection; gradient is the inverse take."""
    a = as_tensor(a)
    perm = np.asarray(perm, dtype=np.intp)
    out = np.take(a.data, perm, axis=axis)
    inv = np.argsort(perm, kind="stable")

    def vjp(g, needs):
        return (np.take(g, inv, axis=axis),)

    return apply_op("take_tokens", out, (a,), vjp)
