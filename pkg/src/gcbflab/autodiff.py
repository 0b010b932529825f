"""Tape-based reverse-mode autodiff over a small, closed set of primitives.

Everything is float64 numpy.  A :class:`Tape` records each primitive call as it
is evaluated; :meth:`Tape.backward` replays the record in exact reverse order.
Tensors created without a tape are constants and never receive gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class UnknownPrimitiveError(AutodiffError):
    pass


class Tensor:
    """A float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "idx")
    __array_priority__ = 100.0

    def __init__(self, data, tape: Tape | None = None, idx: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        tracked = "tracked" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {tracked})"

    # operator sugar; every method lowers to a named primitive
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise AutodiffError("division only by python scalars")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) and x.tape is None else Tensor(getattr(x, "data", x))


@dataclass
class _Record:
    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of primitive applications."""

    records: list[_Record] = field(default_factory=list)
    shapes: list[tuple[int, ...]] = field(default_factory=list)
    check_finite: bool = True

    def variable(self, data) -> Tensor:
        t = Tensor(data, self, len(self.shapes))
        self.shapes.append(t.shape)
        return t

    def _new(self, data: np.ndarray) -> Tensor:
        return self.variable(data)

    def backward(self, output: Tensor, seed=None) -> dict[int, np.ndarray]:
        """Accumulate d(seed . output)/d(tensor) for every tensor on the tape."""
        if output.tape is not self:
            raise AutodiffError("output was not recorded on this tape")
        seed = np.ones(output.shape) if seed is None else np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {output.idx: seed.copy()}
        for rec in reversed(self.records):
            g = grads.get(rec.output)
            if g is None:
                continue
            for i, gi in zip(rec.inputs, rec.vjp(g)):
                if i < 0 or gi is None:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return grads

    def grad(self, output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        g = self.backward(output, seed)
        return [g.get(t.idx, np.zeros(t.shape)) if t.tape is self else np.zeros(t.shape) for t in wrt]


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        t = getattr(x, "tape", None)
        if t is not None:
            if tape is not None and t is not tape:
                raise AutodiffError("inputs recorded on different tapes")
            tape = t
    return tape


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    if tape.check_finite and not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    t = tape._new(out)
    ids = tuple(x.idx if x.tape is tape else -1 for x in inputs)
    tape.records.append(_Record(op, ids, t.idx, vjp))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    A, B = a.data, b.data
    # numpy routes single-column and single-row products to gemv, whose blocking makes a
    # row's bits depend on the other rows; keep every row on one code path instead
    if A.ndim == 2 and B.ndim == 2 and B.shape[1] == 1:
        out = np.einsum("ij,jk->ik", A, B)
    elif A.ndim == 2 and B.ndim == 2 and A.shape[0] == 1:
        out = (np.vstack([A, np.zeros_like(A)]) @ B)[:1]
    else:
        out = A @ B

    def vjp(g):
        ga = g @ np.swapaxes(B, -1, -2)
        if A.ndim == 1:
            gb = np.outer(A, g) if g.ndim == 1 else None
        else:
            gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _emit("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def hinge(a) -> Tensor:
    """[a]^+ = max(a, 0); derivative taken as 0 at the kink."""
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("hinge", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by the finite check in _emit
        y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        if _tape_of(a) is not None and _tape_of(a).check_finite:
            raise NonFiniteError("log of a non-positive value")
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    x = a.data
    return _emit("log", (a,), y, lambda g: (g / x,))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def _expand(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _emit("sum", (a,), out, lambda g: (np.array(_expand(g, shape, axes, keepdims)),))


def max_(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max-reduce; the gradient goes to the first maximizer along the axis."""
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    if len(axes) != 1 and axis is not None:
        raise ShapeError("max-reduce supports a single axis")
    X = a.data
    if axis is None:
        flat = X.reshape(-1)
        k = int(np.argmax(flat))
        out = flat[k]
        if keepdims:
            out = np.reshape(out, (1,) * X.ndim)

        def vjp(g):
            gx = np.zeros(X.size)
            gx[k] = np.asarray(g).reshape(-1)[0]
            return (gx.reshape(X.shape),)

        return _emit("max", (a,), np.asarray(out), vjp)
    ax = axes[0]
    k = np.argmax(X, axis=ax)
    out = np.take_along_axis(X, np.expand_dims(k, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        gx = np.zeros_like(X)
        np.put_along_axis(gx, np.expand_dims(k, ax), gk, axis=ax)
        return (gx,)

    return _emit("max", (a,), out, vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    X = a.data
    z = X - X.max(axis=axis, keepdims=True)
    e = np.exp(z)
    # sequential sum: trailing zero (padded) entries then leave the bits unchanged,
    # whereas numpy's pairwise sum regroups terms as the axis grows
    y = e / np.take(np.cumsum(e, axis=axis), [-1], axis=axis)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), y, vjp)


def concatenate(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[d] != xs[0].shape[d] for d in range(x.ndim) if d != ax
        ):
            raise ShapeError(f"concatenate: incompatible shapes {[x.shape for x in xs]}")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([x.data for x in xs], axis=ax)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(xs))
        )

    return _emit("concatenate", xs, out, vjp)


def slice_(a, key) -> Tensor:
    """Basic or integer-array indexing (gather).  Backward scatter-adds."""
    a = _as_tensor(a)
    X = a.data
    try:
        out = X[key]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from exc
    out = np.array(out, dtype=np.float64)

    def vjp(g):
        gx = np.zeros_like(X)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit("slice", (a,), out, vjp)


def l2_norm(a, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at 0 is taken as 0."""
    a = _as_tensor(a)
    X = a.data
    n = np.sqrt((X * X).sum(axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(n > 0, X / np.where(n > 0, n, 1.0), 0.0)
        return (gk * d,)

    return _emit("l2_norm", (a,), out, vjp)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "max": max_,
    "softmax": softmax,
    "concatenate": concatenate,
    "slice": slice_,
    "hinge": hinge,
    "l2_norm": l2_norm,
}


# ---------------------------------------------------------------------------
# programs: explicit primitive graphs


@dataclass(frozen=True)
class Step:
    op: str
    inputs: tuple[str, ...]
    output: str
    attrs: dict = field(default_factory=dict)


def evaluate_and_backprop(program: Sequence[Step], inputs: dict[str, np.ndarray], output: str | Sequence[str], seed=None):
    """Run ``program`` forward on ``inputs`` and backpropagate ``seed``.

    ``output`` names the value(s) to return; the seed gradient applies to the
    first one.  Returns ``(outputs, gradients)`` where gradients are listed in
    the iteration order of ``inputs``.
    """
    for st in program:
        if st.op not in PRIMITIVES:
            raise UnknownPrimitiveError(st.op)
    tape = Tape()
    env: dict[str, Tensor] = {k: tape.variable(v) for k, v in inputs.items()}
    for st in program:
        fn = PRIMITIVES[st.op]
        args = [env[name] for name in st.inputs]
        if st.op == "concatenate":
            env[st.output] = fn(args, **st.attrs)
        else:
            env[st.output] = fn(*args, **st.attrs)
    names = [output] if isinstance(output, str) else list(output)
    outs = [env[n] for n in names]
    grads = tape.grad(outs[0], [env[k] for k in inputs], seed)
    return [o.data for o in outs], grads


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_coordinate: tuple | None
    n_checked: int
    skipped: list[tuple] = field(default_factory=list)
    analytic: np.ndarray | None = None
    numeric: np.ndarray | None = None


def gradient_check(
    fn: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-6,
    tolerance: float = 1e-5,
    coords: Sequence[tuple] | None = None,
    floor: float | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradient of scalar ``fn`` with central differences.

    Relative error per coordinate is ``|a - c| / max(|a|, |c|, floor)``; the
    default floor is the larger of ``1e-6 * max(1, |grad|_inf)`` and the
    finite-difference resolution ``4 eps |f| / (step * tolerance)``, so coordinates
    whose true derivative is ~0 are judged on an absolute scale.  Coordinates where the
    two one-sided differences disagree by more than ``sqrt(step)`` (relative), or
    whose central differences at ``step`` and ``step/2`` disagree, straddle a kink
    and are reported in ``skipped``.
    """
    x0 = np.array(point, dtype=np.float64)
    tape = Tape()
    xt = tape.variable(x0)
    y = fn(xt)
    if y.data.size != 1:
        raise ShapeError("gradient_check needs a scalar-valued function")
    (g,) = tape.grad(y, [xt], np.ones(y.shape))
    f0 = float(y.data.reshape(-1)[0])

    def f(x):
        v = fn(Tensor(x)).data
        val = float(np.asarray(v).reshape(-1)[0])
        if not np.isfinite(val):
            raise NonFiniteError("function non-finite in the probe neighborhood")
        return val

    if coords is None:
        coords = list(np.ndindex(*x0.shape)) if x0.ndim else [()]
    scale_ = float(np.max(np.abs(g))) if g.size else 0.0
    if floor is None:
        # central differences cannot resolve below ~eps |f| / step (rounding of f itself)
        noise = 4 * np.finfo(float).eps * abs(f0) / step
        floor = max(1e-6 * max(1.0, scale_), noise / tolerance)
    worst, worst_c, skipped = 0.0, None, []
    num = np.full(x0.shape, np.nan)
    for c in coords:
        c = tuple(c)
        xp, xm = x0.copy(), x0.copy()
        xp[c] += step
        xm[c] -= step
        fp, fm = f(xp), f(xm)
        fwd, bwd = (fp - f0) / step, (f0 - fm) / step
        central = (fp - fm) / (2 * step)
        if abs(fwd - bwd) > np.sqrt(step) * max(1.0, abs(central)):
            skipped.append(c)
            continue
        # a kink within `step` of the point (e.g. a hidden relu crossing zero) shows up as
        # central differences that change with the step size far beyond O(step^2)
        xp[c], xm[c] = x0[c] + step / 2, x0[c] - step / 2
        half = (f(xp) - f(xm)) / step
        if abs(half - central) > 0.5 * tolerance * max(abs(central), floor):
            skipped.append(c)
            continue
        num[c] = central
        a = float(g[c])
        err = abs(a - central) / max(abs(a), abs(central), floor)
        if err > worst:
            worst, worst_c = err, c
    n = len(coords) - len(skipped)
    return GradCheckReport(worst < tolerance, worst, worst_c, n, skipped, g, num)
