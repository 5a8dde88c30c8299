"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one node to the thread's current
:class:`ComputationTape`. :func:`backward` replays that tape in reverse
order, so the tape has to be reset (or a fresh one installed) between
training steps::

    with ComputationTape() as tape:
        loss = model(x).sum()
        backward(loss)

Outside an explicit ``ComputationTape`` block a per-thread default tape is
used; call :func:`reset_tape` to drop what it recorded.
"""

from __future__ import annotations

import contextlib
import os
import struct
import threading
import weakref
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ParseError, ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}


def _dtype_from_env() -> type:
    name = os.environ.get("CAGA_PRECISION", "f64").strip().lower()
    if name not in _DTYPES:
        raise ContractError(f"CAGA_PRECISION must be one of {sorted(_DTYPES)}, got {name!r}")
    return _DTYPES[name]


_default_dtype = _dtype_from_env()


def default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


class Tensor:
    """Row-major real array, optionally tracking gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or (data.dtype if _is_float_array(data) else _default_dtype))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape = None
        self._node: int = -1

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, power(as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)


def _is_float_array(data) -> bool:
    return isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, out, inputs, backward_fn, op):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class ComputationTape:
    """Ordered record of differentiable operations for one forward pass.

    A tape belongs to the thread that created it. Used as a context manager
    it becomes that thread's current tape and the previous one is restored
    on exit.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._owner = threading.get_ident()
        self._saved: list = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "ComputationTape":
        self._saved.append(getattr(_local, "tape", None))
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._saved.pop()

    def reset(self) -> None:
        for node in self.nodes:
            node.out._tape = None
            node.out._node = -1
        self.nodes.clear()

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> None:
        if threading.get_ident() != self._owner:
            raise ContractError("a ComputationTape may only be used by the thread that created it")
        out._tape = weakref.ref(self)
        out._node = len(self.nodes)
        self.nodes.append(_Node(out, tuple(inputs), backward_fn, op))

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if _tape_of(loss) is not self:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss._node + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            _accumulate(node.out, g)
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if _tape_of(inp) is not self:
                    leaves[key] = inp
        for key, t in leaves.items():
            if key in grads:
                _accumulate(t, grads[key])


def _tape_of(t: Tensor) -> "ComputationTape | None":
    return t._tape() if t._tape is not None else None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    t.grad = g.copy() if t.grad is None else t.grad + g


_local = threading.local()


def current_tape() -> ComputationTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = ComputationTape()
        _local.tape = tape
    return tape


def reset_tape() -> None:
    current_tape().reset()


@contextlib.contextmanager
def no_grad():
    """Disable recording, e.g. for evaluation passes."""
    prev = getattr(_local, "enabled", True)
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor the loss depends on.

    Gradients accumulate: calling this twice without zeroing doubles them.
    Tensors only hold a weak reference to their tape, so the tape must still
    be alive (current, or referenced by the caller).
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape_of(loss)
    if tape is None:
        raise ContractError("loss was not produced by tape-recorded operations (or its tape was discarded)")
    tape.backward(loss)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it if any input needs grad."""
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out._tape = None
    out._node = -1
    if needs:
        current_tape().record(out, inputs, backward_fn, op)
    return out


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting (covers bias addition)."""
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


broadcast_add = add


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return make_result(a.data * a.data.dtype.type(factor), (a,), lambda g: (g * factor,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``; leading axes broadcast as batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(out, (a, b), bw, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by per-row max subtraction."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite logits")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax_rows")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_result(out.copy(), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_result(out, (x,), lambda g: (np.transpose(g, inverse),), "permute")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat along axis {axis}: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tensors, bw, "concat")


def _check_basic_index(index) -> None:
    items = index if isinstance(index, tuple) else (index,)
    for item in items:
        if not (item is Ellipsis or isinstance(item, (int, np.integer, slice))):
            raise ContractError(f"only basic (int/slice) indexing is supported, got {type(item).__name__}")


def slice_(x: Tensor, index) -> Tensor:
    """Basic indexing; the result is a copy."""
    x = as_tensor(x)
    _check_basic_index(index)
    out = np.array(x.data[index], copy=True)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return make_result(out, (x,), bw, "slice")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return slice_(x, tuple(index))


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return make_result(out, (x,), lambda g: (np.array(_expand_reduced(g, x.shape, axis, keepdims)),), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(out.size, 1)

    def bw(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return make_result(out, (x,), bw, "mean")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    p = float(exponent)
    y = np.power(x.data, p)

    def bw(g):
        return (g * p * np.power(x.data, p - 1.0),)

    return make_result(y, (x,), bw, "power")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# TNSR file format
# ---------------------------------------------------------------------------

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
_TNSR_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TNSR_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tnsr(fh: BinaryIO, array) -> None:
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    if arr.dtype not in _TNSR_DTYPE_CODES:
        arr = arr.astype(_default_dtype)
    code = _TNSR_DTYPE_CODES[arr.dtype]
    fh.write(TNSR_MAGIC)
    fh.write(struct.pack("<BBB", TNSR_VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_TNSR_CODE_DTYPES[code]).tobytes())


def read_tnsr(fh: BinaryIO, path="<stream>") -> np.ndarray:
    head = fh.read(7)
    if len(head) != 7 or head[:4] != TNSR_MAGIC:
        raise ParseError(path, "not a TNSR file (bad magic)")
    version, code, rank = struct.unpack("<BBB", head[4:])
    if version != TNSR_VERSION:
        raise ParseError(path, f"unsupported TNSR version {version}")
    if code not in _TNSR_CODE_DTYPES:
        raise ParseError(path, f"unknown dtype code {code}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise ParseError(path, "truncated shape")
    shape = struct.unpack(f"<{rank}I", raw)
    dtype = _TNSR_CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise ParseError(path, "truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tnsr(path, array) -> None:
    with open(path, "wb") as fh:
        write_tnsr(fh, array)


def load_tnsr(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tnsr(fh, path)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-4,
                       indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``target.data`` (in place).

    When ``indices`` is given only those entries are perturbed; the rest of
    the returned array is NaN.
    """
    grad = np.full(target.shape, np.nan) if indices is not None else np.zeros(target.shape)
    it = indices if indices is not None else np.ndindex(*target.shape)
    with no_grad():
        for idx in it:
            orig = target.data[idx]
            target.data[idx] = orig + h
            fp = fn().item()
            target.data[idx] = orig - h
            fm = fn().item()
            target.data[idx] = orig
            grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor), ignoring NaN entries of ``numeric``."""
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar output from ``inputs`` each call. With
    ``max_entries`` a random subset of entries per input is checked.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ContractError("gradient checks run at 64-bit precision")
        t.grad = None
    with ComputationTape():
        out = fn()
        backward(out)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        indices = None
        if max_entries is not None and t.size > max_entries:
            flat = rng.choice(t.size, size=max_entries, replace=False)
            indices = [np.unravel_index(int(i), t.shape) for i in flat]
        numeric = numerical_gradient(fn, t, h, indices)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
