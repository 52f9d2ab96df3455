"""Small dense-array engine with tape-based reverse-mode differentiation.

Every value lives in a :class:`Tensor` wrapping a numpy array. Primitives are
plain functions; when a :class:`Tape` is active and any input requires a
gradient, the primitive appends a record holding its vector-Jacobian product.
``Tape.backward`` replays the records in reverse.

Forward values never depend on whether a tape is recording, so an inference
pass and a training pass over the same inputs produce bit-identical numbers.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

DEFAULT_DTYPE = np.float64
L2_EPS = 1e-12
LAYER_NORM_EPS = 1e-5

_local = threading.local()
_check_finite = True


def set_finite_check(enabled: bool) -> None:
    """Toggle the non-finite guard applied to every primitive output."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; each maps onto exactly one primitive
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


@dataclass
class _Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitives executed while the tape is active.

    Use as a context manager; nesting is allowed and records go to the
    innermost tape. A tape can be differentiated exactly once.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` for every leaf that requires one.

        Leaves reached by no recorded path get a zero gradient of their own
        shape. When ``params`` is given, those tensors are always included in
        the returned map. Each leaf's ``.grad`` is overwritten.
        """
        if self._consumed:
            raise RuntimeError("backward called twice on the same tape")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise RuntimeError("loss was not produced under an active tape")
        produced = {id(r.out) for r in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise AssertionError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out: dict[Tensor, np.ndarray] = {}
        wanted = list(leaves.values())
        if params is not None:
            seen = {id(t) for t in wanted}
            wanted += [p for p in params if id(p) not in seen]
        for t in wanted:
            g = grads.get(id(t))
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            out[t] = g
        self.records = []
        self._consumed = True
        return out


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording (e.g. for evaluation inside a training loop)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if _check_finite and not np.isfinite(data).all():
        raise FloatingPointError(f"{op}: produced non-finite values")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.records.append(_Record(op, out, inputs, vjp))
        return out
    return Tensor(data)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting)


def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", out, (a, b), vjp)


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise FloatingPointError("log: non-positive input")
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd * _SQRT_HALF))
    out = xd * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _emit("gelu", out.astype(xd.dtype, copy=False), (x,), vjp)


# --------------------------------------------------------------------------
# contraction and shape primitives


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims.

    Both operands need at least two dimensions; the contraction is over the
    last axis of ``a`` and the second-to-last axis of ``b``.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {x.shape} as {shape}") from None
    src = x.shape
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("transpose", out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic slicing (ints, slices with any step, Ellipsis, None)."""
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not (i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice))):
            raise TypeError(f"slice: only basic indexing is supported, got {type(i).__name__}")
    out = np.ascontiguousarray(x.data[index])
    src, dtype = x.shape, x.dtype

    def vjp(g):
        gx = np.zeros(src, dtype=dtype)
        gx[index] = g
        return (gx,)

    return _emit("slice", out, (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(tensors), vjp)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", np.asarray(out, dtype=x.dtype), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[a] for a in ax]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _emit("mean", np.asarray(out, dtype=x.dtype), (x,), vjp)


# --------------------------------------------------------------------------
# normalizations


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", p, (x,), vjp)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis, then apply the learned scale and shift."""
    xd = x.data
    n = xd.shape[-1]
    if scale.shape != (n,) or shift.shape != (n,):
        raise ValueError(f"layer_norm: scale/shift {scale.shape}/{shift.shape} vs features {n}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    sd = scale.data
    out = xhat * sd + shift.data

    def vjp(g):
        gs = (g * xhat).reshape(-1, n).sum(axis=0) if scale.requires_grad else None
        gb = g.reshape(-1, n).sum(axis=0) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * sd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gs, gb

    return _emit("layer_norm", out, (x, scale, shift), vjp)


def l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Scale each last-axis vector to unit length; the norm is floored at ``eps``."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = xd / denom
    active = norm > eps

    def vjp(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        gx = np.where(active, (g - y * proj) / denom, g / denom)
        return (gx,)

    return _emit("l2_normalize", y, (x,), vjp)


# --------------------------------------------------------------------------
# gradient routing


class _Replay:
    """Records stop-gradient values and argmin choices on a first pass, then
    replays them. Used to build the smooth surrogate that straight-through
    gradients differentiate, so finite differences can check them."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.recording = True
        self.pos = 0
        self.flipped = False

    def take(self, value: np.ndarray, discrete: bool = False) -> np.ndarray:
        if self.recording:
            self.values.append(np.array(value, copy=True))
            return value
        stored = self.values[self.pos]
        self.pos += 1
        if discrete and not np.array_equal(stored, value):
            self.flipped = True
        return stored

    def rewind(self) -> None:
        self.recording = False
        self.pos = 0
        self.flipped = False


def _replay() -> _Replay | None:
    return getattr(_local, "replay", None)


@contextlib.contextmanager
def surrogate_replay():
    """Freeze stop-gradient values and discrete choices across evaluations."""
    prev = _replay()
    _local.replay = rep = _Replay()
    try:
        yield rep
    finally:
        _local.replay = prev


def freeze_choice(value: np.ndarray) -> np.ndarray:
    """Pass a discrete decision (e.g. argmin codes) through the replay log."""
    rep = _replay()
    return value if rep is None else rep.take(value, discrete=True)


def stop_gradient(x: Tensor) -> Tensor:
    rep = _replay()
    data = x.data if rep is None else rep.take(x.data)
    return Tensor(data)


def straight_through(z_e: Tensor, z_q: Tensor) -> Tensor:
    """Forward value is exactly ``z_q``; the incoming gradient goes to ``z_e``
    unchanged and ``z_q`` receives none."""
    if z_e.shape != z_q.shape:
        raise ValueError(f"straight_through: shapes {z_e.shape} and {z_q.shape} differ")
    if _replay() is not None:
        return add(z_e, stop_gradient(sub(z_q, z_e)))
    return _emit("straight_through", z_q.data, (z_e,), lambda g: (g,))


# --------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: list[float] = field(default_factory=list)
    coords: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    excluded: int = 0

    def __float__(self) -> float:
        return self.max_rel_error


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    *,
    num_coords: int | None = None,
    eps: float = 1e-5,
    seed: int = 0,
    coords: Sequence[tuple[int, tuple[int, ...]]] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the current values of ``params``.
    Stop-gradient values and argmin decisions from the base point are replayed
    during the perturbed evaluations; a coordinate whose perturbation would
    have changed a discrete decision is excluded and counted.
    """
    params = list(params)
    with surrogate_replay() as rep:
        with Tape() as tape:
            loss = f()
        grads = tape.backward(loss, params)
        analytic = [grads[p] for p in params]

        if coords is None:
            rng = np.random.default_rng(seed)
            all_coords = [(i, idx) for i, p in enumerate(params) for idx in np.ndindex(p.shape)]
            if num_coords is not None and num_coords < len(all_coords):
                pick = rng.choice(len(all_coords), size=num_coords, replace=False)
                coords = [all_coords[j] for j in sorted(pick)]
            else:
                coords = all_coords

        report = GradCheckReport(0.0)
        for pi, idx in coords:
            p = params[pi]
            orig = p.data[idx]
            vals = []
            flipped = False
            for step in (eps, -eps):
                p.data[idx] = orig + step
                rep.rewind()
                vals.append(float(f().data))
                flipped |= rep.flipped
            p.data[idx] = orig
            if flipped:
                report.excluded += 1
                continue
            numeric = (vals[0] - vals[1]) / (2 * eps)
            a = float(analytic[pi][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            report.errors.append(err)
            report.coords.append((pi, tuple(int(i) for i in idx)))
            report.max_rel_error = max(report.max_rel_error, err)
    return report


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor], **kw) -> float:
    """Max relative error between tape and central-difference gradients."""
    return gradient_check(f, params, **kw).max_rel_error
