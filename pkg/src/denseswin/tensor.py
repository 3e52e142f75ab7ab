"""Dense n-d tensors with tape-based reverse-mode differentiation.

Every differentiable operation computes its result with numpy and, when at
least one input requires a gradient, appends a node to the active
:class:`Tape`.  :func:`backward` walks that tape in reverse recording order,
so gradient accumulation order (and therefore the floating point result) is
fixed for a fixed program.

Broadcasting is never implicit.  Binary ops demand equal shapes; the only
exception is :func:`scale`, which multiplies by a scalar.  Use
:func:`broadcast_to` to expand a tensor explicitly.
"""

from __future__ import annotations

import contextlib
import inspect
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DTypeError, NumericError

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ids = itertools.count(1)


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in SUPPORTED_DTYPES:
        raise DTypeError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Tensor:
    """An immutable n-dimensional float array that can take part in autodiff.

    Args:
        data: Array-like values. Always copied.
        requires_grad: Whether gradients should flow to this tensor.
        dtype: float32 (default for non-float input) or float64.
    """

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in SUPPORTED_DTYPES else np.float32
        arr = np.array(arr, dtype=_as_dtype(dtype), copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: arr is a fresh array owned by the result
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        if arr.dtype not in SUPPORTED_DTYPES:
            raise DTypeError(f"operation produced dtype {arr.dtype}")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.node_id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

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
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar, all routed through the explicit ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones(x.shape, dtype=x.dtype))


def row_major_strides(shape: Sequence[int]) -> tuple[int, ...]:
    """Element strides of a C-ordered buffer with the given extents."""
    strides = []
    acc = 1
    for extent in reversed(shape):
        strides.append(acc)
        acc *= extent
    return tuple(reversed(strides))


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    if len(index) != len(shape):
        raise DimensionError(f"index rank {len(index)} != tensor rank {len(shape)}")
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise DimensionError(f"index {tuple(index)} out of bounds for {tuple(shape)}")
    return sum(i * s for i, s in zip(index, row_major_strides(shape)))


def unflat_index(flat: int, shape: Sequence[int]) -> tuple[int, ...]:
    out = []
    for s in row_major_strides(shape):
        q, flat = divmod(flat, s)
        out.append(q)
    return tuple(out)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    out_id: int
    input_ids: tuple[int, ...]
    needs_grad: tuple[bool, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    out_shape: tuple[int, ...]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's inputs were
    produced before it: recording order is a topological order.
    """

    nodes: list[Node] = field(default_factory=list)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
        self.nodes.append(
            Node(
                out.node_id,
                tuple(t.node_id for t in inputs),
                tuple(t.requires_grad for t in inputs),
                backward,
                out.shape,
            )
        )

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def contains(self, node_id: int) -> bool:
        return any(n.out_id == node_id for n in self.nodes)


_state = {"tape": Tape(), "grad": True}


def get_tape() -> Tape:
    return _state["tape"]


@contextlib.contextmanager
def use_tape(tape: Tape | None = None):
    """Make ``tape`` (or a fresh one) the active tape inside the block."""
    tape = tape if tape is not None else Tape()
    prev = _state["tape"]
    _state["tape"] = tape
    try:
        yield tape
    finally:
        _state["tape"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as an op result and record ``backward`` if needed.

    ``backward(g)`` receives the output gradient and returns one array (or
    ``None``) per input, in order. Entries for inputs that do not require a
    gradient are ignored.
    """
    out = Tensor._wrap(data)
    if _state["grad"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state["tape"].record(out, inputs, backward)
    return out


def backward(
    loss: Tensor,
    *,
    tape: Tape | None = None,
    wrt: Iterable[Tensor] | None = None,
) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a map ``node_id -> gradient``. Without ``wrt`` it holds every
    leaf that received a gradient. With ``wrt`` it holds exactly those
    tensors, with zeros for any that are not connected to the loss.
    """
    tape = tape if tape is not None else get_tape()
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or not tape.contains(loss.node_id):
        raise ContractError("loss was not recorded on the tape")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
    produced = set()
    seen = set()
    for node in reversed(tape.nodes):
        if node.out_id in seen:
            raise ContractError(f"node {node.out_id} recorded twice on the tape")
        seen.add(node.out_id)
        produced.add(node.out_id)
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for nid, need, ig in zip(node.input_ids, node.needs_grad, in_grads):
            if not need or ig is None:
                continue
            prev = grads.get(nid)
            grads[nid] = ig if prev is None else prev + ig

    if wrt is None:
        return {k: Tensor._wrap(np.asarray(v)) for k, v in grads.items() if k not in produced}
    out = {}
    for t in wrt:
        g = grads.get(t.node_id)
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        out[t.node_id] = Tensor._wrap(np.array(g, dtype=t.dtype))
    return out


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def _same_dtype(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise DTypeError(f"dtype mismatch: {dt} vs {t.dtype}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _same_shape(a, b, "add")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _same_shape(a, b, "sub")
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


def scale(x: Tensor, s) -> Tensor:
    """``x * s`` for a python number or a single-element tensor ``s``."""
    if isinstance(s, Tensor):
        _same_dtype(x, s)
        if s.size != 1:
            raise DimensionError(f"scale factor must have one element, got {s.shape}")
        sv = s.data.reshape(())
        xd = x.data
        shape = s.shape

        def bw(g):
            return g * sv, np.sum(g * xd).reshape(shape).astype(xd.dtype)

        return make_op(xd * sv, (x, s), bw)
    sv = x.dtype.type(s)
    return make_op(x.data * sv, (x,), lambda g: (g * sv,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    inner = c * (xd + xd.dtype.type(0.044715) * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def bw(g):
        dinner = c * (1 + xd.dtype.type(3 * 0.044715) * (xd * xd))
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return make_op(out.astype(xd.dtype), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype)
    return make_op(out, (x,), lambda g: (g * out * (1 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tensor_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis)
    if axis is None:
        return make_op(np.asarray(out, dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = (axis,) if isinstance(axis, int) else tuple(axis)
    ax = tuple(_norm_axis(a, x.ndim) for a in ax)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return make_op(np.asarray(out, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in ax]))
    return scale(tensor_sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e
    src = x.shape
    return make_op(out.copy(), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_norm_axis(a, x.ndim) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_op(out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from e
    src = x.shape
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return make_op(out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    _same_dtype(*tensors)
    ref = tensors[0]
    axis = _norm_axis(axis, ref.ndim)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return [np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis)]

    return make_op(out, tuple(tensors), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = _norm_axis(axis, x.ndim)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise DimensionError(f"take: index out of range for extent {x.shape[axis]}")
    out = np.take(x.data, idx, axis=axis)
    src = x.shape

    def bw(g):
        gx = np.zeros(src, dtype=g.dtype)
        gm = np.moveaxis(gx, axis, 0)
        gg = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(gm, idx, gg)
        return (gx,)

    return make_op(out, (x,), bw)


def cyclic_shift(x: Tensor, dy: int, dx: int) -> Tensor:
    """Toroidal roll of the two spatial axes of a ``[..., H, W, C]`` map.

    The element at ``(i, j)`` moves to ``((i + dy) mod H, (j + dx) mod W)``.
    """
    if x.ndim < 3:
        raise DimensionError(f"cyclic_shift expects [..., H, W, C], got {x.shape}")
    axes = (x.ndim - 3, x.ndim - 2)
    if dy == 0 and dx == 0:
        return make_op(x.data.copy(), (x,), lambda g: (g,))
    out = np.roll(x.data, (dy, dx), axis=axes)
    return make_op(out, (x,), lambda g: (np.roll(g, (-dy, -dx), axis=axes),))


# ---------------------------------------------------------------------------
# linear algebra and normalisers
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    _same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: need equal-rank matrices, got {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return make_op(np.matmul(ad, bd), (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return make_op(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    if x.shape[axis] == 0:
        raise DimensionError("log_softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of :func:`grad_check`.

    ``errors`` maps an input label to the largest relative error seen over
    the checked elements of that input, with relative error defined as
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """

    errors: dict[str, float]
    checked: dict[str, int]
    max_rel_error: float

    def ok(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    *,
    names: Sequence[str] | None = None,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` is called as ``f(*inputs)`` (or ``f()`` when the inputs are
    captured parameters, i.e. ``f`` takes no arguments) and must return a
    scalar. Inputs must be float64. The finite differences perturb each
    input's buffer in place and restore it afterwards.

    With ``max_elements`` only that many elements per input are probed: half
    at the largest analytic gradient magnitudes, half uniformly at random.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires float64 inputs")

    try:
        takes_args = len(inspect.signature(f).parameters) > 0
    except (TypeError, ValueError):
        takes_args = True

    def call() -> Tensor:
        return f(*inputs) if takes_args else f()

    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
    try:
        with use_tape() as tape:
            loss = call()
            if loss.size != 1:
                raise ContractError("grad_check needs a scalar-valued function")
            if not np.isfinite(loss.data).all():
                raise NumericError("function value is not finite")
            analytic = backward(loss, tape=tape, wrt=inputs)
        rng = np.random.default_rng(seed)
        errors, counts = {}, {}
        with no_grad():
            for name, t in zip(names, inputs):
                a = analytic[t.node_id].data.reshape(-1)
                buf = t.data
                was_writeable = buf.flags.writeable
                buf.flags.writeable = True
                flat = buf.reshape(-1)
                if max_elements is None or flat.size <= max_elements:
                    idx = np.arange(flat.size)
                else:
                    k = max_elements // 2
                    top = np.argsort(-np.abs(a), kind="stable")[:k]
                    rest = np.setdiff1d(np.arange(flat.size), top)
                    rnd = rng.choice(rest, size=max_elements - k, replace=False)
                    idx = np.sort(np.concatenate([top, rnd]))
                worst = 0.0
                try:
                    for i in idx:
                        orig = flat[i]
                        flat[i] = orig + step
                        fp = call().item()
                        flat[i] = orig - step
                        fm = call().item()
                        flat[i] = orig
                        if not (math.isfinite(fp) and math.isfinite(fm)):
                            raise NumericError(f"non-finite value while probing {name}[{i}]")
                        num = (fp - fm) / (2 * step)
                        worst = max(worst, float(relative_error(a[i], num)))
                finally:
                    buf.flags.writeable = was_writeable
                errors[name] = worst
                counts[name] = len(idx)
    finally:
        for t, fl in zip(inputs, flags):
            t.requires_grad = fl
    return GradReport(errors, counts, max(errors.values()) if errors else 0.0)
