"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every model and loss computation in this package runs on `Tensor` objects
through a fixed registry of primitives. Forward evaluation is eager (numpy);
when a `Tape` is active, each primitive application is recorded so that
`backward` can replay the record in reverse and accumulate vector-Jacobian
products.

Scope is deliberately small:

* float32 (training default) and float64 (verification) only, never mixed
  inside one operation;
* broadcasting is limited to scalar-vs-tensor (an operand with exactly one
  element); anything batched is expressed with explicit stacked matrices or
  `gather_rows`;
* no higher-order derivatives, no in-place mutation of tensors that are on
  a tape.

One deliberate trade: matmul does not call BLAS in the forward direction.
It accumulates rank-1 updates in index order, so each output element's
value is independent of the other array extents and of row position. That
costs throughput but makes batched computation bit-identical to per-row
computation, which turns several model guarantees (exact permutation
invariance, exact isolated path replay) from approximate into exact.
Gradients still use BLAS: they only need determinism at fixed shapes.

A tape may be consumed by `backward` any number of times; it is a pure
record, not a one-shot resource.
"""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.2  # fixed negative slope for leaky_relu

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatchError(ValueError):
    """Inputs do not conform to a primitive's shape rule."""


class UnknownPrimitiveError(ValueError):
    """Requested op-kind is not in the primitive registry."""


class Tensor:
    """Dense real array with an optional gradient-tracking flag.

    `data` is always a contiguous numpy array of float32 or float64.
    Python lists and integer arrays are converted to float32 unless an
    explicit dtype is given or the input is already float64.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not np.issubdtype(arr.dtype, np.floating):
            raise TypeError(f"Tensor requires a float dtype, got {arr.dtype}")
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; python numbers become constants of the tensor's dtype
    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Tensor(np.full((), other, dtype=self.dtype))
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Tensor(np.full((), other, dtype=self.dtype))
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return (-self).__add__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value, dtype=np.float32) -> Tensor:
    """Non-differentiable tensor holding `value`."""
    return Tensor(np.asarray(value, dtype=dtype))


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


class TapeEntry:
    """One recorded primitive application."""

    __slots__ = ("kind", "inputs", "output", "saved", "attrs")

    def __init__(self, kind, inputs, output, saved, attrs):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.saved = saved
        self.attrs = attrs


_tape_stack: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Used as a context manager; while entered it is the active tape and every
    primitive whose inputs carry `requires_grad` is appended. Entries are in
    topological order by construction (eager evaluation).
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self.entries)

    def replay(self) -> bool:
        """Re-run every entry from its inputs' current data.

        Returns True when all recomputed outputs are bit-identical to the
        recorded ones. With unchanged leaf data this always holds: the
        primitives are deterministic.
        """
        for entry in self.entries:
            fwd, _ = _REGISTRY[entry.kind]
            out, _ = fwd([t.data for t in entry.inputs], entry.attrs)
            if not np.array_equal(out, entry.output.data):
                return False
        return True


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


# ---------------------------------------------------------------------------
# primitive registry
#
# Each forward takes (arrays, attrs) and returns (out_array, saved); each vjp
# takes (grad, arrays, saved, attrs) and returns one gradient array (or None)
# per input. Shape rules are enforced in the forward.
# ---------------------------------------------------------------------------


def _shape_error(kind, arrays, msg):
    shapes = ", ".join(str(a.shape) for a in arrays)
    raise ShapeMismatchError(f"{kind}: {msg} (got shapes {shapes})")


def _check_dtypes(kind, arrays):
    dts = {a.dtype for a in arrays}
    if len(dts) > 1:
        raise TypeError(f"{kind}: mixed dtypes {sorted(str(d) for d in dts)}")


def _binary_out_shape(kind, a, b):
    if a.shape == b.shape:
        return a.shape
    if a.size == 1 or b.size == 1:
        return b.shape if a.size == 1 else a.shape
    _shape_error(kind, (a, b), "shapes must match or one operand must be scalar")


def _unbroadcast(grad, shape):
    # reduce a full-shape gradient back onto a scalar-like operand
    if grad.shape == shape:
        return grad
    return grad.sum().reshape(shape) if np.prod(shape, dtype=int) == 1 else grad.reshape(shape)


def _fwd_add(arrays, attrs):
    a, b = arrays
    _binary_out_shape("add", a, b)
    return a + b, None


def _vjp_add(grad, arrays, saved, attrs):
    a, b = arrays
    return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)


def _fwd_mul(arrays, attrs):
    a, b = arrays
    _binary_out_shape("mul", a, b)
    return a * b, None


def _vjp_mul(grad, arrays, saved, attrs):
    a, b = arrays
    return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


def _fwd_div(arrays, attrs):
    a, b = arrays
    _binary_out_shape("div", a, b)
    return a / b, None


def _vjp_div(grad, arrays, saved, attrs):
    a, b = arrays
    ga = _unbroadcast(grad / b, a.shape)
    gb = _unbroadcast(-grad * a / (b * b), b.shape)
    return ga, gb


def _fwd_scale(arrays, attrs):
    (a,) = arrays
    return a * a.dtype.type(attrs["factor"]), None


def _vjp_scale(grad, arrays, saved, attrs):
    (a,) = arrays
    return (grad * a.dtype.type(attrs["factor"]),)


def _fwd_matmul(arrays, attrs):
    # Accumulates strictly in index order along the contraction axis, one
    # rank-1 update at a time. Each output element is then a fixed chain of
    # multiply-then-add roundings that depends only on the participating
    # operand values, never on the other extents or on row position. Batched
    # products therefore agree bit-for-bit with their per-row counterparts,
    # which several structural guarantees of the generator lean on (exact
    # encoder permutation invariance, exact isolated replay of one point's
    # expansion path). BLAS would not give that.
    a, b = arrays
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        _shape_error("matmul", arrays, "operands must be 1-D or 2-D")
    if a.shape[-1] != b.shape[0]:
        _shape_error("matmul", arrays, "inner dimensions differ")
    inner = a.shape[-1]
    if inner == 0:
        _shape_error("matmul", arrays, "empty contraction axis")
    if a.ndim == 2 and b.ndim == 2:
        out = a[:, 0:1] * b[0, :]
        for k in range(1, inner):
            out += a[:, k : k + 1] * b[k, :]
    elif a.ndim == 2:
        out = a[:, 0] * b[0]
        for k in range(1, inner):
            out += a[:, k] * b[k]
    elif b.ndim == 2:
        out = a[0] * b[0, :]
        for k in range(1, inner):
            out += a[k] * b[k, :]
    else:
        out = a[0] * b[0]
        for k in range(1, inner):
            out = out + a[k] * b[k]
    return out, None


def _vjp_matmul(grad, arrays, saved, attrs):
    a, b = arrays
    if a.ndim == 2 and b.ndim == 2:
        return grad @ b.T, a.T @ grad
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(grad, b), a.T @ grad
    if a.ndim == 1 and b.ndim == 2:
        return b @ grad, np.outer(a, grad)
    return grad * b, grad * a  # 1-D @ 1-D, grad is scalar


def _fwd_tanh(arrays, attrs):
    out = np.tanh(arrays[0])
    return out, out


def _vjp_tanh(grad, arrays, saved, attrs):
    return (grad * (1.0 - saved * saved),)


def _fwd_sigmoid(arrays, attrs):
    x = arrays[0]
    # exp of a non-positive argument never overflows, for either sign branch
    z = np.exp(np.where(x >= 0, -x, x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return out.astype(x.dtype, copy=False), out


def _vjp_sigmoid(grad, arrays, saved, attrs):
    return (grad * saved * (1.0 - saved),)


def _fwd_exp(arrays, attrs):
    out = np.exp(arrays[0])
    return out, out


def _vjp_exp(grad, arrays, saved, attrs):
    return (grad * saved,)


def _fwd_leaky_relu(arrays, attrs):
    x = arrays[0]
    return np.where(x >= 0, x, x.dtype.type(LEAKY_SLOPE) * x), None


def _vjp_leaky_relu(grad, arrays, saved, attrs):
    x = arrays[0]
    # slope 1 on the boundary x == 0
    return (grad * np.where(x >= 0, x.dtype.type(1.0), x.dtype.type(LEAKY_SLOPE)),)


def _fwd_square(arrays, attrs):
    x = arrays[0]
    return x * x, None


def _vjp_square(grad, arrays, saved, attrs):
    return (grad * 2.0 * arrays[0],)


def _fwd_norm(arrays, attrs):
    x = arrays[0]
    if x.ndim == 0:
        _shape_error("norm", arrays, "operand must have at least one axis")
    out = np.sqrt(np.sum(x * x, axis=-1))
    return out, out


def _vjp_norm(grad, arrays, saved, attrs):
    x = arrays[0]
    n = saved
    # subgradient 0 where the norm vanishes
    safe = np.where(n > 0, n, 1.0)
    coef = np.where(n > 0, grad / safe, 0.0)
    return (coef[..., np.newaxis] * x if x.ndim > 1 or n.ndim > 0 else coef * x,)


def _fwd_sum(arrays, attrs):
    return np.sum(arrays[0]), None


def _vjp_sum(grad, arrays, saved, attrs):
    x = arrays[0]
    return (np.full(x.shape, grad, dtype=x.dtype),)


def _fwd_mean(arrays, attrs):
    return np.mean(arrays[0]), None


def _vjp_mean(grad, arrays, saved, attrs):
    x = arrays[0]
    return (np.full(x.shape, grad / x.size, dtype=x.dtype),)


def _fwd_max_reduce(arrays, attrs):
    x = arrays[0]
    if x.ndim == 0 or x.shape[-1] == 0:
        _shape_error("max_reduce", arrays, "last axis must be non-empty")
    idx = np.argmax(x, axis=-1)  # first occurrence: ties route to lowest index
    return np.max(x, axis=-1), idx


def _vjp_max_reduce(grad, arrays, saved, attrs):
    x = arrays[0]
    gx = np.zeros_like(x)
    np.put_along_axis(
        gx, saved[..., np.newaxis], np.asarray(grad)[..., np.newaxis].astype(x.dtype), axis=-1
    )
    return (gx,)


def _fwd_concat(arrays, attrs):
    axis = attrs["axis"]
    nd = arrays[0].ndim
    for a in arrays:
        if a.ndim != nd:
            _shape_error("concat", arrays, "operands must share rank")
    if not 0 <= axis < nd:
        _shape_error("concat", arrays, f"axis {axis} out of range for rank {nd}")
    ref = list(arrays[0].shape)
    for a in arrays:
        s = list(a.shape)
        s[axis] = ref[axis] = 0
        if s != ref:
            _shape_error("concat", arrays, "extents differ off the concat axis")
    return np.concatenate(arrays, axis=axis), [a.shape[axis] for a in arrays]


def _vjp_concat(grad, arrays, saved, attrs):
    offsets = np.cumsum(saved)[:-1]
    return tuple(np.ascontiguousarray(g) for g in np.split(grad, offsets, axis=attrs["axis"]))


def _fwd_reshape(arrays, attrs):
    x = arrays[0]
    shape = tuple(attrs["shape"])
    if np.prod(shape, dtype=int) != x.size:
        _shape_error("reshape", arrays, f"cannot reshape to {shape}")
    return x.reshape(shape), None


def _vjp_reshape(grad, arrays, saved, attrs):
    return (grad.reshape(arrays[0].shape),)


def _fwd_transpose(arrays, attrs):
    x = arrays[0]
    if x.ndim != 2:
        _shape_error("transpose", arrays, "operand must be 2-D")
    return np.ascontiguousarray(x.T), None


def _vjp_transpose(grad, arrays, saved, attrs):
    return (np.ascontiguousarray(grad.T),)


def _fwd_gather_rows(arrays, attrs):
    x = arrays[0]
    idx = attrs["indices"]
    if x.ndim == 0:
        _shape_error("gather_rows", arrays, "operand must have at least one axis")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        _shape_error("gather_rows", arrays, "index out of range")
    return x[idx], None


def _vjp_gather_rows(grad, arrays, saved, attrs):
    gx = np.zeros_like(arrays[0])
    np.add.at(gx, attrs["indices"], grad)
    return (gx,)


_REGISTRY = {
    "matmul": (_fwd_matmul, _vjp_matmul),
    "add": (_fwd_add, _vjp_add),
    "mul": (_fwd_mul, _vjp_mul),
    "scale": (_fwd_scale, _vjp_scale),
    "div": (_fwd_div, _vjp_div),
    "tanh": (_fwd_tanh, _vjp_tanh),
    "sigmoid": (_fwd_sigmoid, _vjp_sigmoid),
    "exp": (_fwd_exp, _vjp_exp),
    "leaky_relu": (_fwd_leaky_relu, _vjp_leaky_relu),
    "square": (_fwd_square, _vjp_square),
    "norm": (_fwd_norm, _vjp_norm),
    "sum": (_fwd_sum, _vjp_sum),
    "mean": (_fwd_mean, _vjp_mean),
    "max_reduce": (_fwd_max_reduce, _vjp_max_reduce),
    "concat": (_fwd_concat, _vjp_concat),
    "reshape": (_fwd_reshape, _vjp_reshape),
    "transpose": (_fwd_transpose, _vjp_transpose),
    "gather_rows": (_fwd_gather_rows, _vjp_gather_rows),
}


def primitive_kinds() -> tuple:
    """All registered op-kinds."""
    return tuple(_REGISTRY)


def apply_primitive(kind: str, inputs, **attrs) -> Tensor:
    """Apply one primitive to `inputs` and record it on the active tape.

    Recording happens only when a tape is active and at least one input has
    `requires_grad`. Attribute arguments (`axis`, `shape`, `indices`,
    `factor`) parameterize the primitive and are never differentiated.
    """
    if kind not in _REGISTRY:
        raise UnknownPrimitiveError(
            f"unknown primitive {kind!r}; known kinds: {', '.join(sorted(_REGISTRY))}"
        )
    inputs = tuple(inputs)
    arrays = [t.data for t in inputs]
    _check_dtypes(kind, arrays)
    if "indices" in attrs:
        attrs["indices"] = np.ascontiguousarray(attrs["indices"], dtype=np.int64)
    fwd, _ = _REGISTRY[kind]
    out_array, saved = fwd(arrays, attrs)
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_array, requires_grad=needs_grad)
    tape = _active_tape()
    if tape is not None and needs_grad:
        tape.entries.append(TapeEntry(kind, inputs, out, saved, attrs))
    return out


def backward(loss: Tensor, tape: Tape, leaves=None) -> dict:
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf on the tape.

    `loss` must be a single-element tensor reachable from the tape's
    recorded outputs. When `leaves` is given, the returned map has exactly
    one entry per leaf, with zero tensors for leaves the loss does not
    reach; otherwise the map covers every requires_grad tensor that feeds
    the tape without being produced by it.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(e.output) for e in tape.entries}
    found: dict[int, Tensor] = {}

    for entry in reversed(tape.entries):
        grad = adjoint.pop(id(entry.output), None)
        if grad is None:
            continue
        _, vjp = _REGISTRY[entry.kind]
        grads = vjp(grad, [t.data for t in entry.inputs], entry.saved, entry.attrs)
        for inp, g in zip(entry.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = g
            if key not in produced:
                found[key] = inp

    if leaves is None:
        leaves = list(found.values())
    result = {}
    for leaf in leaves:
        g = adjoint.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        result[leaf] = Tensor(np.asarray(g, dtype=leaf.data.dtype))
    return result


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def add(a, b):
    return apply_primitive("add", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def scale(a, factor: float):
    return apply_primitive("scale", (a,), factor=float(factor))


def div(a, b):
    return apply_primitive("div", (a, b))


def tanh(a):
    return apply_primitive("tanh", (a,))


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def exp(a):
    return apply_primitive("exp", (a,))


def leaky_relu(a):
    return apply_primitive("leaky_relu", (a,))


def square(a):
    return apply_primitive("square", (a,))


def norm(a):
    return apply_primitive("norm", (a,))


def tensor_sum(a):
    return apply_primitive("sum", (a,))


def tensor_mean(a):
    return apply_primitive("mean", (a,))


def max_reduce(a):
    return apply_primitive("max_reduce", (a,))


def concat(tensors, axis: int = 0):
    return apply_primitive("concat", tensors, axis=int(axis))


def reshape(a, shape):
    return apply_primitive("reshape", (a,), shape=tuple(int(s) for s in shape))


def transpose(a):
    return apply_primitive("transpose", (a,))


def gather_rows(a, indices):
    return apply_primitive("gather_rows", (a,), indices=indices)
