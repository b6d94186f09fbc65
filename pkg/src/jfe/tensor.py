"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable computation in the package goes through
:func:`apply_primitive`.  A primitive application on operands that need
gradients produces a :class:`Record`; records are numbered in creation order,
so sorting the records reachable from a root by index gives a valid
topological order for the backward sweep.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, NumericDomainError

LOG_FLOOR = 1e-12

_state = threading.local()
_record_ids = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run the enclosed block without recording anything on the tape."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A float64 array, an optional gradient slot and a link to its producing record."""

    __array_priority__ = 1000
    __slots__ = ("data", "grad", "requires_grad", "name", "_record", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ContractViolation(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._record: Record | None = None

    # -- introspection ---------------------------------------------------
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
        return self._record is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return tabs(self)

    def sqrt(self):
        return sqrt(self)

    def softmax(self):
        return softmax(self)


def _not_scalar(t: Tensor):
    raise ContractViolation(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# Tape


@dataclass(eq=False)
class Record:
    """One primitive application: the op instance (holding saved forward values),
    its operands, and the id of the tensor it produced."""

    index: int
    op: "Primitive"
    inputs: tuple[Tensor, ...]
    output_id: int


@dataclass
class Tape:
    """Ordered records that contribute to a root tensor."""

    records: list[Record] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        found: list[Record] = []
        stack = [root]
        while stack:
            t = stack.pop()
            rec = t._record
            if rec is None or rec.index in seen:
                continue
            seen.add(rec.index)
            found.append(rec)
            stack.extend(inp for inp in rec.inputs if inp.requires_grad)
        found.sort(key=lambda r: r.index)
        return cls(found)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def backward(root: Tensor) -> None:
    """Populate ``grad`` of every leaf that ``root`` depends on.

    Gradients accumulate into existing ``grad`` arrays, both across several
    uses of a leaf inside one graph and across repeated calls.
    """
    if root.data.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
    if root._record is None:
        if not root.requires_grad:
            raise ContractViolation("backward root was not produced on the tape")
        _accumulate(root, np.ones_like(root.data))
        return

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for rec in reversed(Tape.from_root(root).records):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        input_grads = rec.op.backward(g)
        for inp, ig in zip(rec.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ContractViolation(
                    f"{rec.op.name}: backward produced shape {ig.shape} for operand {inp.shape}"
                )
            if inp._record is None:
                _accumulate(inp, ig)
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    leaf.grad = np.array(g, dtype=np.float64) if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# Primitive machinery

PRIMITIVES: dict[str, type["Primitive"]] = {}


def register(cls):
    PRIMITIVES[cls.name] = cls
    return cls


class Primitive:
    """Base class: subclasses define ``forward`` on arrays and ``backward`` on the
    upstream gradient, returning one gradient (or None) per operand."""

    name = ""
    arity: int | None = None

    def __init__(self, **attrs):
        self.attrs = attrs
        self.saved: tuple = ()

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> tuple:
        raise NotImplementedError


def apply_primitive(op_id: str, operands: Sequence, **attrs) -> Tensor:
    """Evaluate primitive ``op_id`` on ``operands`` and record it when needed."""
    try:
        cls = PRIMITIVES[op_id]
    except KeyError:
        raise ContractViolation(f"unknown primitive {op_id!r}") from None
    tensors = tuple(as_tensor(o) for o in operands)
    if cls.arity is not None and len(tensors) != cls.arity:
        raise ContractViolation(f"{op_id}: expected {cls.arity} operands, got {len(tensors)}")
    op = cls(**attrs)
    out = Tensor(op.forward(*(t.data for t in tensors)))
    if is_grad_enabled() and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._record = Record(next(_record_ids), op, tensors, id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class _Binary(Primitive):
    arity = 2

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        self.saved = (a, b)
        return self._f(a, b)


@register
class Add(_Binary):
    name = "add"

    def _f(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@register
class Sub(_Binary):
    name = "sub"

    def _f(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@register
class Mul(_Binary):
    name = "mul"

    def _f(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register
class Div(_Binary):
    name = "div"

    def _f(self, a, b):
        if np.any(b == 0):
            raise NumericDomainError("div: divisor contains zeros")
        return a / b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


@register
class Neg(Primitive):
    name = "neg"
    arity = 1

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


@register
class MatMul(Primitive):
    """Matrix product over the last two axes, leading axes broadcast."""

    name = "matmul"
    arity = 2

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        try:
            out = a @ b
        except ValueError:
            raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from None
        self.saved = (a, b)
        return out

    def backward(self, g):
        a, b = self.saved
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class _Unary(Primitive):
    arity = 1


@register
class Exp(_Unary):
    name = "exp"

    def forward(self, a):
        out = np.exp(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        return (g * self.saved[0],)


@register
class Log(_Unary):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise NumericDomainError("log: argument must be strictly positive")
        self.saved = (a,)
        return np.log(a)

    def backward(self, g):
        return (g / self.saved[0],)


@register
class LogFloored(_Unary):
    """log(max(x, floor)); the gradient is zero where the floor is active."""

    name = "log_floored"

    def forward(self, a):
        floor = self.attrs.get("floor", LOG_FLOOR)
        if np.any(a < 0):
            raise NumericDomainError("log_floored: argument must be nonnegative")
        active = a > floor
        self.saved = (a, active)
        return np.log(np.where(active, a, floor))

    def backward(self, g):
        a, active = self.saved
        safe = np.where(active, a, 1.0)
        return (np.where(active, g / safe, 0.0),)


@register
class Tanh(_Unary):
    name = "tanh"

    def forward(self, a):
        out = np.tanh(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        y = self.saved[0]
        return (g * (1.0 - y * y),)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@register
class Sigmoid(_Unary):
    name = "sigmoid"

    def forward(self, a):
        out = _sigmoid(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        y = self.saved[0]
        return (g * y * (1.0 - y),)


@register
class Relu(_Unary):
    name = "relu"

    def forward(self, a):
        self.saved = (a > 0,)
        return np.where(a > 0, a, 0.0)

    def backward(self, g):
        return (g * self.saved[0],)


@register
class LeakyRelu(_Unary):
    name = "leaky_relu"

    def forward(self, a):
        slope = self.attrs.get("slope", 0.01)
        pos = a > 0
        self.saved = (pos, slope)
        return np.where(pos, a, slope * a)

    def backward(self, g):
        pos, slope = self.saved
        return (np.where(pos, g, slope * g),)


def _softmax(a: np.ndarray, axis: int = -1) -> np.ndarray:
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@register
class Softmax(_Unary):
    name = "softmax"

    def forward(self, a):
        if a.ndim == 0:
            raise ContractViolation("softmax: needs at least one axis")
        out = _softmax(a, self.attrs.get("axis", -1))
        self.saved = (out,)
        return out

    def backward(self, g):
        y = self.saved[0]
        axis = self.attrs.get("axis", -1)
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


@register
class Sum(_Unary):
    name = "sum"

    def forward(self, a):
        self.saved = (a.shape,)
        return np.asarray(a.sum(axis=self.attrs.get("axis"), keepdims=self.attrs.get("keepdims", False)))

    def backward(self, g):
        shape = self.saved[0]
        axis = self.attrs.get("axis")
        if axis is not None and not self.attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)


@register
class Mean(_Unary):
    name = "mean"

    def forward(self, a):
        axis = self.attrs.get("axis")
        n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        self.saved = (a.shape, n)
        return np.asarray(a.mean(axis=axis, keepdims=self.attrs.get("keepdims", False)))

    def backward(self, g):
        shape, n = self.saved
        axis = self.attrs.get("axis")
        if axis is not None and not self.attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)


@register
class Concat(Primitive):
    name = "concat"

    def forward(self, *xs):
        axis = self.attrs.get("axis", -1)
        try:
            out = np.concatenate(xs, axis=axis)
        except (ValueError, np.exceptions.AxisError):
            raise ContractViolation(
                f"concat: cannot join shapes {[x.shape for x in xs]} on axis {axis}"
            ) from None
        self.saved = ([x.shape[axis] for x in xs],)
        return out

    def backward(self, g):
        sizes = self.saved[0]
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.attrs.get("axis", -1)))


@register
class GetItem(_Unary):
    """Basic or advanced indexing; the backward pass scatter-adds."""

    name = "getitem"

    def forward(self, a):
        index = self.attrs["index"]
        try:
            out = a[index]
        except IndexError as exc:
            raise ContractViolation(f"getitem: {exc} for shape {a.shape}") from None
        self.saved = (a.shape,)
        return np.array(out, dtype=np.float64)

    def backward(self, g):
        full = np.zeros(self.saved[0])
        np.add.at(full, self.attrs["index"], g)
        return (full,)


@register
class Take(_Unary):
    """Gather along one axis with an integer index array of any shape."""

    name = "take"

    def forward(self, a):
        idx = np.asarray(self.attrs["indices"])
        axis = self.attrs.get("axis", 0) % a.ndim
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
            raise ContractViolation(f"take: indices out of range for axis of size {a.shape[axis]}")
        self.saved = (a.shape, idx, axis)
        return np.take(a, idx, axis=axis)

    def backward(self, g):
        shape, idx, axis = self.saved
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)


@register
class Transpose(_Unary):
    name = "transpose"

    def forward(self, a):
        axes = self.attrs.get("axes")
        if axes is None:
            if a.ndim < 2:
                raise ContractViolation("transpose: needs at least 2 axes")
            axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
        self.saved = (tuple(axes),)
        return np.transpose(a, axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.saved[0])),)


@register
class Reshape(_Unary):
    name = "reshape"

    def forward(self, a):
        try:
            out = a.reshape(self.attrs["shape"])
        except ValueError:
            raise ContractViolation(f"reshape: cannot view {a.shape} as {self.attrs['shape']}") from None
        self.saved = (a.shape,)
        return out

    def backward(self, g):
        return (g.reshape(self.saved[0]),)


@register
class Abs(_Unary):
    name = "abs"

    def forward(self, a):
        self.saved = (np.sign(a),)
        return np.abs(a)

    def backward(self, g):
        return (g * self.saved[0],)


@register
class Sqrt(_Unary):
    name = "sqrt"

    def forward(self, a):
        if np.any(a < 0):
            raise NumericDomainError("sqrt: argument must be nonnegative")
        out = np.sqrt(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        y = self.saved[0]
        if np.any((y == 0) & (g != 0)):
            raise NumericDomainError("sqrt: gradient undefined at 0")
        return (np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0),)


@register
class ClampMin(_Unary):
    name = "clamp_min"

    def forward(self, a):
        lo = self.attrs["lo"]
        self.saved = (a > lo,)
        return np.maximum(a, lo)

    def backward(self, g):
        return (g * self.saved[0],)


@register
class GradReverse(_Unary):
    """Identity forward; multiplies the upstream gradient by -lam."""

    name = "grl"

    def forward(self, a):
        lam = self.attrs.get("lam", 1.0)
        if lam < 0:
            raise ContractViolation(f"grl: lambda must be nonnegative, got {lam}")
        return a.copy()

    def backward(self, g):
        return (-self.attrs.get("lam", 1.0) * g,)


@register
class LstmProj(Primitive):
    """Unidirectional LSTM with a projected recurrent state, batch-major.

    Operands: x (B,T,D), Wx (D,4H), Wh (P,4H), b (4H,), Wp (H,P); output (B,T,P).
    Gate blocks are ordered input, forget, cell candidate, output.  Initial
    cell and projected states are zero.
    """

    name = "lstm_proj"
    arity = 5

    def forward(self, x, wx, wh, b, wp):
        if x.ndim != 3:
            raise ContractViolation(f"lstm_proj: input must be (B,T,D), got {x.shape}")
        B, T, D = x.shape
        H4 = wx.shape[1] if wx.ndim == 2 else -1
        if H4 % 4 or wx.shape[0] != D or wh.ndim != 2 or wh.shape[1] != H4 or b.shape != (H4,):
            raise ContractViolation(
                f"lstm_proj: weight shapes {wx.shape}, {wh.shape}, {b.shape} do not fit input dim {D}"
            )
        H = H4 // 4
        P = wh.shape[0]
        if wp.shape != (H, P):
            raise ContractViolation(f"lstm_proj: projection must be {(H, P)}, got {wp.shape}")
        xw = x @ wx + b
        # gate scaling lets one tanh call produce all four activations
        scale = np.full(H4, 0.5)
        scale[2 * H : 3 * H] = 1.0
        h = np.zeros((B, P))
        c = np.zeros((B, H))
        hs = np.empty((B, T, P))
        gates = np.empty((B, T, H4))
        cs = np.empty((B, T, H))
        ms = np.empty((B, T, H))
        tcs = np.empty((B, T, H))
        for t in range(T):
            a = np.tanh((xw[:, t] + h @ wh) * scale)
            a[:, : 2 * H] += 1.0
            a[:, : 2 * H] *= 0.5
            a[:, 3 * H :] += 1.0
            a[:, 3 * H :] *= 0.5
            c = a[:, H : 2 * H] * c + a[:, :H] * a[:, 2 * H : 3 * H]
            tc = np.tanh(c)
            m = a[:, 3 * H :] * tc
            h = m @ wp
            gates[:, t], cs[:, t], ms[:, t], hs[:, t], tcs[:, t] = a, c, m, h, tc
        self.saved = (x, wx, wh, wp, gates, cs, ms, hs, tcs)
        return hs

    def backward(self, g):
        x, wx, wh, wp, gates, cs, ms, hs, tcs = self.saved
        B, T, _ = x.shape
        H = wp.shape[0]
        # local derivative of each gate activation w.r.t. its pre-activation
        dact = gates * (1.0 - gates)
        dact[:, :, 2 * H : 3 * H] = 1.0 - gates[:, :, 2 * H : 3 * H] ** 2
        c_prev = np.concatenate([np.zeros_like(cs[:, :1]), cs[:, :-1]], axis=1)
        dz_all = np.empty_like(gates)
        dh_all = np.empty_like(hs)
        whT = wh.T
        wpT = wp.T
        dh_next = np.zeros((B, wp.shape[1]))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            a = gates[:, t]
            tc = tcs[:, t]
            dh = g[:, t] + dh_next
            dh_all[:, t] = dh
            dm = dh @ wpT
            o = a[:, 3 * H :]
            dc = dc_next + dm * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * a[:, 2 * H : 3 * H]
            dz[:, H : 2 * H] = dc * c_prev[:, t]
            dz[:, 2 * H : 3 * H] = dc * a[:, :H]
            dz[:, 3 * H :] = dm * tc
            dz *= dact[:, t]
            dc_next = dc * a[:, H : 2 * H]
            dh_next = dz @ whT
        dwp = np.einsum("bth,btp->hp", ms, dh_all)
        h_prev = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        dwx = np.einsum("btd,btk->dk", x, dz_all)
        dwh = np.einsum("btp,btk->pk", h_prev, dz_all)
        db = dz_all.sum(axis=(0, 1))
        dx = dz_all @ wx.T
        return dx, dwx, dwh, db, dwp


# ---------------------------------------------------------------------------
# Functional front-end


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def neg(a):
    return apply_primitive("neg", (a,))


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def exp(a):
    return apply_primitive("exp", (a,))


def log(a):
    return apply_primitive("log", (a,))


def log_floored(a, floor: float = LOG_FLOOR):
    return apply_primitive("log_floored", (a,), floor=floor)


def tanh(a):
    return apply_primitive("tanh", (a,))


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def relu(a):
    return apply_primitive("relu", (a,))


def leaky_relu(a, slope: float = 0.01):
    return apply_primitive("leaky_relu", (a,), slope=slope)


def softmax(a, axis: int = -1):
    return apply_primitive("softmax", (a,), axis=axis)


def tsum(a, axis=None, keepdims: bool = False):
    return apply_primitive("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False):
    return apply_primitive("mean", (a,), axis=axis, keepdims=keepdims)


def concat(tensors: Iterable, axis: int = -1):
    return apply_primitive("concat", tuple(tensors), axis=axis)


def getitem(a, index):
    return apply_primitive("getitem", (a,), index=index)


def take(a, indices, axis: int = 0):
    return apply_primitive("take", (a,), indices=np.asarray(indices, dtype=np.intp), axis=axis)


def transpose(a, axes=None):
    return apply_primitive("transpose", (a,), axes=axes)


def reshape(a, shape):
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def tabs(a):
    return apply_primitive("abs", (a,))


def sqrt(a):
    return apply_primitive("sqrt", (a,))


def clamp_min(a, lo: float):
    return apply_primitive("clamp_min", (a,), lo=lo)


def grl(a, lam: float = 1.0):
    return apply_primitive("grl", (a,), lam=float(lam))


def lstm_proj(x, wx, wh, b, wp):
    return apply_primitive("lstm_proj", (x, wx, wh, b, wp))


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the backward gradient of scalar ``f(x)`` with central differences.

    The relative error of each element is ``|a - n| / max(|a|, |n|, floor)``.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise NumericDomainError("grad_check: x must be finite")
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ContractViolation(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xp[i] += step
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            xp[i] -= 2 * step
            fm = f(Tensor(xp.reshape(x0.shape))).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericDomainError("grad_check: f is not finite near x")
            flat[i] = (fp - fm) / (2 * step)
    err = _rel_errors(analytic, numeric, floor)
    return GradCheckReport(float(err.max()), float(err.mean()), x0.size, tol)


def grad_check_params(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Like :func:`grad_check` but over named leaf parameters that ``f`` closes over.

    Parameters are perturbed in place and restored.  ``max_per_param`` caps the
    number of finite-difference probes per tensor (chosen with ``rng``).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    out = f()
    if out.size != 1:
        raise ContractViolation(f"grad_check_params: f must return a scalar, got shape {out.shape}")
    backward(out)
    errs = []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        idx = np.arange(p.size)
        if max_per_param is not None and p.size > max_per_param:
            idx = rng.choice(p.size, size=max_per_param, replace=False)
        flat = p.data.reshape(-1)
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericDomainError(f"grad_check_params: f not finite near {name}[{i}]")
                errs.append(_rel_errors(analytic.reshape(-1)[i], (fp - fm) / (2 * step), floor))
    err = np.asarray(errs, dtype=np.float64)
    return GradCheckReport(float(err.max()), float(err.mean()), err.size, tol)
