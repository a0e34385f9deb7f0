"""Dense tensors with reverse-mode automatic differentiation.

Define-by-run: every primitive applied to a tensor that requires gradients
records a node, and ``backward`` replays the recorded nodes in reverse
creation order (which is a valid topological order). Storage defaults to
float32; feeding float64 inputs promotes the whole graph, which is what the
finite-difference checks rely on.

Broadcasting is deliberately restricted to the bias pattern: a rank-1 tensor
may broadcast over the last axis of a higher-rank tensor. Everything else
must match exactly.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's shape rule."""


class GradientError(RuntimeError):
    """Raised for invalid backward requests (non-scalar or detached loss)."""


_node_ids = itertools.count()
_local = threading.local()

# When True, every primitive verifies its output is finite.
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = enabled


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses graph recording."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _local.grad_enabled = False
        return self

    def __exit__(self, *exc):
        self._prev = getattr(self, "_prev", True)
        _local.grad_enabled = self._prev
        return False


class track_kink_margins:
    """Record how close piecewise ops came to their nondifferentiable points.

    Finite-difference checks are only valid away from relu/abs/clamp kinks;
    this collects min |distance to kink| per op so a test can reject (and
    reseed) a sampled case that lands too close to one.
    """

    def __enter__(self):
        self.margins: dict[str, float] = {}
        _local.kink_tracker = self
        return self

    def __exit__(self, *exc):
        _local.kink_tracker = None
        return False

    def record(self, op: str, distances: np.ndarray) -> None:
        if distances.size:
            m = float(np.min(distances))
            self.margins[op] = min(self.margins.get(op, np.inf), m)

    def min_margin(self) -> float:
        return min(self.margins.values()) if self.margins else np.inf


def _note_kinks(op: str, distances: np.ndarray) -> None:
    tracker = getattr(_local, "kink_tracker", None)
    if tracker is not None:
        tracker.record(op, distances)


class Node:
    """One recorded primitive application.

    ``backward_fn`` maps the output gradient to a tuple of input gradients
    aligned with ``parents`` (entries may be None for non-differentiable
    inputs).
    """

    __slots__ = ("id", "op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """n-dimensional array of reals, optionally tracked on the tape."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiu":
            raise TypeError(f"tensor data must be numeric, got {arr.dtype}")
        if arr.dtype.kind in "iu":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {tuple(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; scalars are treated as untracked constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return add(negate(self), other)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return divide(self, other)
        return multiply(self, 1.0 / other)

    def __rtruediv__(self, other):
        return multiply(power(self, -1.0), other)

    def __neg__(self):
        return negate(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(op: str, out_data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _bias_pair(op: str, a: np.ndarray, b: np.ndarray):
    """Validate the restricted broadcast rule for a binary elementwise op."""
    if a.shape == b.shape:
        return
    if b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 2 and b.shape[-1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} neither match nor "
                     f"follow the rank-1-over-last-dim broadcast rule")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(range(grad.ndim - len(shape)))
    return grad.sum(axis=axes).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        out = a.data + b
        return _make("add", out, (a,), lambda g: (g,))
    _bias_pair("add", a.data, b.data)
    out = a.data + b.data
    return _make("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data - b
        return _make("subtract", out, (a,), lambda g: (g,))
    _bias_pair("subtract", a.data, b.data)
    out = a.data - b.data
    return _make("subtract", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data * b
        return _make("multiply", out, (a,), lambda g: (g * b,))
    _bias_pair("multiply", a.data, b.data)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _make("multiply", out, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def divide(a: Tensor, b: Tensor) -> Tensor:
    _bias_pair("divide", a.data, b.data)
    out = a.data / b.data
    ad, bd = a.data, b.data
    return _make("divide", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, a.shape),
                            _unbroadcast(-g * ad / (bd * bd), b.shape)))


def negate(a: Tensor) -> Tensor:
    return _make("negate", -a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data
    return _make("matmul", out, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D tensor, got {a.shape}")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    _note_kinks("relu", np.abs(a.data))
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    out = ad ** p
    return _make("power", out, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def absolute(a: Tensor) -> Tensor:
    _note_kinks("absolute", np.abs(a.data))
    sign = np.sign(a.data)
    return _make("absolute", np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    _note_kinks("clamp", np.minimum(np.abs(a.data - lo), np.abs(a.data - hi)))
    mask = (a.data >= lo) & (a.data <= hi)
    return _make("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def _expand_reduced(g: np.ndarray, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def tensor_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)
    return _make("sum", out, (a,),
                 lambda g: (_expand_reduced(g, shape, axis).copy(),))


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    shape = a.shape
    count = a.size if axis is None else shape[axis]
    out = a.data.mean(axis=axis)
    return _make("mean", out, (a,),
                 lambda g: (_expand_reduced(g, shape, axis) / count,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from e
    return _make("reshape", out.copy(), (a,), lambda g: (g.reshape(old),))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[axis]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} "
                         f"of shape {a.shape}")
    key = [slice(None)] * a.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _make("slice", a.data[key].copy(), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    widths = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        grads, ofs = [], 0
        key = [slice(None)] * g.ndim
        for w in widths:
            key[axis] = slice(ofs, ofs + w)
            grads.append(g[tuple(key)].copy())
            ofs += w
        return tuple(grads)

    return _make("concat", out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_out_size(op, n, k, s, p):
    out = (n + 2 * p - k) // s + 1
    if out <= 0:
        raise ShapeError(f"{op}: non-positive output extent for input {n}, "
                         f"kernel {k}, stride {s}, padding {p}")
    return out


def _windows(x: np.ndarray, kh: int, kw: int, s: int) -> np.ndarray:
    """Strided view (B, C, Ho, Wo, kh, kw) over an already padded array."""
    b, c, h, w = x.shape
    ho = (h - kh) // s + 1
    wo = (w - kw) // s + 1
    sb, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (b, c, ho, wo, kh, kw), (sb, sc, sh * s, sw * s, sh, sw))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with weight layout (C_out, C_in, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expects 4-D input/weight, got {x.shape}, {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} vs weight {w.shape}")
    _, _, kh, kw = w.shape
    p, s = padding, stride
    _conv_out_size("conv2d", x.shape[2], kh, s, p)
    _conv_out_size("conv2d", x.shape[3], kw, s, p)

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = _windows(xp, kh, kw, s)
    out = np.einsum("bcxyuv,ocuv->boxy", win, w.data, optimize=True)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data[None, :, None, None]

    wd = w.data
    x_shape, xp_shape = x.shape, xp.shape
    ho, wo = out.shape[2], out.shape[3]

    def backward(g):
        gw = np.einsum("bcxyuv,boxy->ocuv", win, g, optimize=True)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for u in range(kh):
            for v in range(kw):
                contrib = np.tensordot(g, wd[:, :, u, v], axes=([1], [0]))
                gxp[:, :, u:u + s * ho:s, v:v + s * wo:s] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + x_shape[2], p:p + x_shape[3]] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution with weight layout (C_in, C_out, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expects 4-D input/weight, got "
                         f"{x.shape}, {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv_transpose2d: invalid stride {stride} / padding {padding}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: channel mismatch, input {x.shape} "
                         f"vs weight {w.shape}")
    bsz, _, h, win_ = x.shape
    _, cout, kh, kw = w.shape
    p, s = padding, stride
    fh, fw = (h - 1) * s + kh, (win_ - 1) * s + kw
    oh, ow = fh - 2 * p, fw - 2 * p
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output extent "
                         f"({oh}, {ow}) for input {x.shape}")

    full = np.zeros((bsz, cout, fh, fw),
                    dtype=np.result_type(x.data.dtype, w.data.dtype))
    wd = w.data
    for u in range(kh):
        for v in range(kw):
            contrib = np.tensordot(x.data, wd[:, :, u, v], axes=([1], [0]))
            full[:, :, u:u + s * h:s, v:v + s * win_:s] += contrib.transpose(0, 3, 1, 2)
    out = full[:, :, p:p + oh, p:p + ow] if p else full
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({cout},)")
        out = out + b.data[None, :, None, None]

    xd = x.data

    def backward(g):
        gfull = np.zeros((bsz, cout, fh, fw), dtype=g.dtype)
        gfull[:, :, p:p + oh, p:p + ow] = g
        gwin = _windows(gfull, kh, kw, s)
        gx = np.einsum("boxyuv,couv->bcxy", gwin, wd, optimize=True)
        gw = np.einsum("bcxy,boxyuv->couv", xd, gwin, optimize=True)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv_transpose2d", out, parents, backward)


# ---------------------------------------------------------------------------
# primitive registry and dispatch
# ---------------------------------------------------------------------------

PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "negate": negate,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "square": square,
    "sqrt": sqrt,
    "power": power,
    "absolute": absolute,
    "clamp": clamp,
    "sum": tensor_sum,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_axis,
    "concat": concat,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    if kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive {kind!r}")
    fn = PRIMITIVES[kind]
    if kind == "concat":
        return fn(list(inputs), **(attrs or {}))
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
    """Reverse-accumulate gradients of a scalar loss.

    Returns a map from leaf tensors (requires_grad, no recorded node) to
    gradient tensors of the same shape. With ``wrt`` given, exactly those
    tensors are keyed, with zero gradients where the loss does not depend
    on them.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.node is None:
        raise GradientError("loss is detached from the graph (no recorded node)")

    # restrict to the subgraph that feeds the loss
    reachable: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in reachable or t.node is None:
            if t.node is None:
                reachable.setdefault(id(t), t)
            continue
        reachable[id(t)] = t
        stack.extend(t.node.parents)

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    interior = sorted((t for t in reachable.values() if t.node is not None),
                      key=lambda t: t.node.id, reverse=True)
    leaf_grads: dict[int, np.ndarray] = {}
    for t in interior:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for parent, pg in zip(t.node.parents, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GradientError(f"{t.node.op}: gradient shape {pg.shape} != "
                                    f"input shape {parent.shape}")
            store = leaf_grads if parent.node is None else grads
            if id(parent) in store:
                store[id(parent)] = store[id(parent)] + pg
            else:
                store[id(parent)] = pg

    result = {}
    if wrt is None:
        for t in reachable.values():
            if t.node is None and t.requires_grad and id(t) in leaf_grads:
                result[t] = Tensor(leaf_grads[id(t)])
    else:
        for t in wrt:
            g = leaf_grads.get(id(t))
            if g is None:
                g = np.zeros(t.shape, dtype=loss.data.dtype)
            result[t] = Tensor(g)
    return result


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    def __init__(self, max_rel_error: float, tol: float,
                 analytic: np.ndarray, numeric: np.ndarray):
        self.max_rel_error = max_rel_error
        self.tol = tol
        self.analytic = analytic
        self.numeric = numeric

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __repr__(self):
        verdict = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({verdict}, max_rel_error={self.max_rel_error:.3e})"


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor,
               step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f`` at ``point`` against central
    finite differences.

    Per-coordinate error is |analytic - numeric| / max(1, |analytic|,
    |numeric|), i.e. relative above unit scale and absolute below it.
    """
    x = Tensor(np.asarray(point.data, dtype=np.float64).copy(), requires_grad=True)
    loss = f(x)
    if loss.size != 1:
        raise GradientError("grad_check target must be scalar-valued")
    analytic = backward(loss, wrt=[x])[x].data.astype(np.float64)

    def eval_at(values: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(values)).data
        v = float(np.asarray(out).reshape(()))
        if not np.isfinite(v):
            raise FloatingPointError("grad_check: function non-finite at probe point")
        return v

    numeric = np.zeros_like(analytic)
    base = x.data
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = eval_at(base)
        flat[i] = orig - step
        lo = eval_at(base)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
    return GradCheckReport(max_rel, tol, analytic, numeric)
