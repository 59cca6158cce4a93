"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable quantity in this package is a :class:`Tensor` wrapping a
numpy array.  Operations executed while a :class:`Tape` is active are appended
to that tape in execution order; :meth:`Tape.backward` replays the record in
reverse and returns a gradient for every leaf tensor that contributed to the
requested scalar.  Outside a tape the same operations run as plain numpy
evaluation, which is how all inference-time code paths avoid bookkeeping cost.

All operations check their outputs for NaN/Inf by default and raise
:class:`NumericError` on violation; see :func:`set_check_finite`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "GradCheckReport",
    "grad_check",
    "set_check_finite",
    "add",
    "add_broadcast",
    "add_const",
    "add_row",
    "concat",
    "dropout",
    "exp",
    "layer_norm",
    "log",
    "log_softmax",
    "logsumexp",
    "matmul",
    "mul",
    "narrow",
    "pick_per_row",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "softplus",
    "stack0",
    "sub",
    "sum_all",
    "sum_axis",
    "take_rows",
    "tanh",
    "transpose",
]

_LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operands passed to a primitive have incompatible shapes."""


class NumericError(RuntimeError):
    """A non-finite value appeared where the numeric contract forbids one."""


_check_finite = True


def set_check_finite(enabled: bool) -> bool:
    """Toggle NaN/Inf checking on primitive outputs; returns previous value."""
    global _check_finite
    previous = _check_finite
    _check_finite = bool(enabled)
    return previous


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Arithmetic sugar; scalars route through the constant-argument primitives
    # so that plain Python floats never enter the record as tensors.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "tape")

    def __init__(self, out, inputs, vjp, tape):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.tape = tape


_tape_stack: list["Tape"] = []


class Tape:
    """Execution record for one differentiable computation.

    Use as a context manager; operations run inside the ``with`` block are
    recorded.  ``backward`` may be called any number of times on scalars that
    appear on this record, each call starting from a fresh accumulator.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: mismatched enter/exit")

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Return, for every contributing leaf, d(root)/d(leaf).

        ``root`` must be a scalar produced on this tape.  Leaves are tensors
        with ``requires_grad`` set that were not themselves produced here.
        Leaves that do not influence ``root`` are absent from the result.
        """
        if root.data.size != 1:
            raise ShapeError(
                f"backward: root must be a scalar, got shape {root.data.shape}"
            )
        if root.node is None or root.node.tape is not self:
            raise ValueError("backward: root was not produced on this tape")

        pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for node in reversed(self._nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            partials = node.vjp(g)
            for tensor, part in zip(node.inputs, partials):
                if part is None or not tensor.requires_grad:
                    continue
                if tensor.node is not None and tensor.node.tape is self:
                    key = id(tensor.node.out)
                    if key in pending:
                        pending[key] = pending[key] + part
                    else:
                        pending[key] = np.array(part, dtype=np.float64, copy=True)
                else:
                    if tensor in leaves:
                        leaves[tensor] = leaves[tensor] + part
                    else:
                        leaves[tensor] = np.array(part, dtype=np.float64, copy=True)
        return leaves


def _emit(opname: str, out_data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    # Single construction point: finiteness contract + conditional recording.
    if _check_finite and not np.all(np.isfinite(out_data)):
        raise NumericError(f"{opname}: non-finite value in output")
    tape = _tape_stack[-1] if _tape_stack else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        node = _Node(out, inputs, vjp, tape)
        out.node = node
        tape._nodes.append(node)
        return out
    return Tensor(out_data)


def _require(cond: bool, opname: str, detail: str) -> None:
    if not cond:
        raise ShapeError(f"{opname}: {detail}")


# ---------------------------------------------------------------------------
# Elementwise and broadcast-free arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "sub", f"shape mismatch {a.shape} vs {b.shape}")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "mul", f"shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _emit("scale", x.data * alpha, (x,), lambda g: (g * alpha,))


def add_const(x: Tensor, c: float) -> Tensor:
    return _emit("add_const", x.data + float(c), (x,), lambda g: (g,))


def add_broadcast(x: Tensor, s: Tensor) -> Tensor:
    """Add a single-element tensor to every entry of ``x``."""
    _require(s.data.size == 1, "add_broadcast",
             f"second operand must have one element, got shape {s.shape}")
    s_shape = s.shape

    def vjp(g):
        return (g, np.asarray(g.sum()).reshape(s_shape))

    return _emit("add_broadcast", x.data + s.data.item(), (x, s), vjp)


def add_row(m: Tensor, v: Tensor) -> Tensor:
    """Add a vector to every row of a matrix (the bias-broadcast pattern)."""
    _require(m.ndim == 2 and v.ndim == 1, "add_row",
             f"expected matrix and vector, got {m.shape} and {v.shape}")
    _require(m.shape[1] == v.shape[0], "add_row",
             f"row width {m.shape[1]} vs vector length {v.shape[0]}")
    return _emit("add_row", m.data + v.data[None, :], (m, v),
                 lambda g: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        _require(ad.shape[1] == bd.shape[0], "matmul",
                 f"inner dims differ: {ad.shape} @ {bd.shape}")
        return _emit("matmul", ad @ bd, (a, b),
                     lambda g: (g @ bd.T, ad.T @ g))
    if ad.ndim == 2 and bd.ndim == 1:
        _require(ad.shape[1] == bd.shape[0], "matmul",
                 f"inner dims differ: {ad.shape} @ {bd.shape}")
        return _emit("matmul", ad @ bd, (a, b),
                     lambda g: (np.outer(g, bd), ad.T @ g))
    if ad.ndim == 1 and bd.ndim == 2:
        _require(ad.shape[0] == bd.shape[0], "matmul",
                 f"inner dims differ: {ad.shape} @ {bd.shape}")
        return _emit("matmul", ad @ bd, (a, b),
                     lambda g: (bd @ g, np.outer(ad, g)))
    raise ShapeError(f"matmul: unsupported ranks {ad.shape} @ {bd.shape}")


def transpose(x: Tensor) -> Tensor:
    _require(x.ndim == 2, "transpose", f"expected a matrix, got {x.shape}")
    return _emit("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    _require(int(np.prod(shape, dtype=np.int64)) == x.data.size, "reshape",
             f"cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(old),))


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    _require(len(parts) > 0, "concat", "empty input list")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), vjp)


def stack0(parts: list[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    _require(len(parts) > 0, "stack0", "empty input list")
    base = parts[0].shape
    for p in parts:
        _require(p.shape == base, "stack0",
                 f"shape mismatch {p.shape} vs {base}")

    def vjp(g):
        return tuple(g[i] for i in range(len(parts)))

    return _emit("stack0", np.stack([p.data for p in parts], axis=0),
                 tuple(parts), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    _require(0 <= start and start + length <= x.shape[axis], "narrow",
             f"slice [{start}:{start + length}] out of bounds for axis {axis} "
             f"of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        out[index] = g
        return (out,)

    return _emit("narrow", x.data[index].copy(), (x,), vjp)


def take_rows(x: Tensor, rows) -> Tensor:
    """Gather rows by index; duplicate indices accumulate in the gradient."""
    rows = np.asarray(rows, dtype=np.int64)
    _require(rows.ndim == 1, "take_rows", f"indices must be 1-d, got {rows.shape}")
    _require(x.ndim in (1, 2), "take_rows", f"expected 1-d or 2-d input, got {x.shape}")
    if rows.size and (rows.min() < 0 or rows.max() >= x.shape[0]):
        raise ShapeError(f"take_rows: index out of range for {x.shape[0]} rows")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, rows, g)
        return (out,)

    return _emit("take_rows", x.data[rows], (x,), vjp)


def pick_per_row(x: Tensor, cols) -> Tensor:
    """Select one entry per row of a matrix: ``out[i] = x[i, cols[i]]``."""
    cols = np.asarray(cols, dtype=np.int64)
    _require(x.ndim == 2, "pick_per_row", f"expected a matrix, got {x.shape}")
    _require(cols.shape == (x.shape[0],), "pick_per_row",
             f"need one column index per row, got {cols.shape} for {x.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= x.shape[1]):
        raise ShapeError(f"pick_per_row: column index out of range for {x.shape}")
    r = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        out[r, cols] = g
        return (out,)

    return _emit("pick_per_row", x.data[r, cols], (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum_all", np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum_axis", x.data.sum(axis=axis), (x,), vjp)


# ---------------------------------------------------------------------------
# Nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    # Stable in both tails: exp of a non-positive argument only.
    xd = x.data
    out = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                   np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,),
                 lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _emit("log", out, (x,), lambda g: (g / xd,))


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x) without overflow: max(x, 0) + log1p(e^{-|x|}).
    xd = x.data
    out = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    sig = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                   np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    return _emit("softplus", out, (x,), lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# Normalizations and reductions in log space


def _check_axis(opname: str, x: Tensor, axis: int) -> None:
    _require(-x.ndim <= axis < x.ndim, opname,
             f"axis {axis} out of range for shape {x.shape}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis("softmax", x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _emit("softmax", out, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis("log_softmax", x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (x,), vjp)


def logsumexp(x: Tensor, axis: int = 0) -> Tensor:
    """Reduce ``axis`` by log-sum-exp; the axis is dropped from the output."""
    _check_axis("logsumexp", x, axis)
    m = x.data.max(axis=axis, keepdims=True)
    out = np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True)) + m
    weights = np.exp(x.data - out)
    out = np.squeeze(out, axis=axis)

    def vjp(g):
        return (weights * np.expand_dims(g, axis),)

    return _emit("logsumexp", out, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    d = x.shape[-1]
    _require(gain.shape == (d,) and bias.shape == (d,), "layer_norm",
             f"gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    y = (x.data - mu) * inv
    out = y * gain.data[..., :] + bias.data

    def vjp(g):
        dy = g * gain.data
        dx = inv * (dy - dy.mean(axis=-1, keepdims=True)
                    - y * (dy * y).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return (dx, (g * y).sum(axis=axes), g.sum(axis=axes))

    return _emit("layer_norm", out, (x, gain, bias), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is zero."""
    if rng is None or rate <= 0.0:
        return x
    _require(rate < 1.0, "dropout", f"rate must be < 1, got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return _emit("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Finite-difference validation


@dataclass
class GradCheckReport:
    """Outcome of comparing taped gradients against central differences."""

    passed: bool
    max_rel_err: float
    tolerance: float
    worst_param: str
    worst_index: tuple

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f, params: list[Tensor], step: float = 1e-5,
               tolerance: float = 1e-4) -> GradCheckReport:
    """Compare the taped gradient of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor that depends on ``params``.  Relative error uses a denominator
    floored at 1e-3 so that near-zero gradients are compared absolutely.
    """
    with Tape() as tape:
        out = f()
    first = out.data.item()
    with Tape() as tape:
        out = f()
    if out.data.item() != first:
        raise NumericError("grad_check: f() is not deterministic across calls")
    analytic = tape.backward(out)

    worst = (0.0, "", ())
    for p in params:
        name = p.name or f"param{id(p)}"
        ga = analytic.get(p)
        if ga is None:
            ga = np.zeros_like(p.data)
        for idx in np.ndindex(*p.data.shape) if p.data.ndim else [()]:
            orig = p.data[idx]
            p.data[idx] = orig + step
            hi = f().data.item()
            p.data[idx] = orig - step
            lo = f().data.item()
            p.data[idx] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = float(ga[idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            if rel > worst[0]:
                worst = (rel, name, idx)
    return GradCheckReport(passed=worst[0] <= tolerance, max_rel_err=worst[0],
                           tolerance=tolerance, worst_param=worst[1],
                           worst_index=worst[2])
