"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Every numeric operation the model needs runs through the primitives here:
elementwise arithmetic with trailing-aligned broadcasting, matmul, reductions,
shape moves, softmax, layer norm and 2-d (transposed) convolution. Forward
results are checked for NaN/Inf as they are produced. Gradient flow is
recorded on an explicit :class:`Tape` and replayed in reverse by
:func:`backward`; other modules can register their own primitives through
:func:`make_op`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """Input values outside an operation's mathematical domain."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


_DTYPES = {"float32": np.float32, "float64": np.float64}


def _np_dtype(dtype: str) -> np.dtype:
    if dtype not in _DTYPES:
        raise ContractError(f"unsupported dtype {dtype!r}; expected float32 or float64")
    return np.dtype(_DTYPES[dtype])


class Tensor:
    """N-dimensional float array, optionally participating in gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, dtype: str | None = None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = "float32" if arr.dtype == np.float32 else "float64"
        arr = np.ascontiguousarray(arr, dtype=_np_dtype(dtype))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

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
    def dtype(self) -> str:
        return "float32" if self.data.dtype == np.float32 else "float64"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, self.dtype, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; canonical entry points are the module-level functions
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(value, dtype: str) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_np_dtype(dtype)), dtype)


def zeros(shape, dtype: str = "float32", requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_np_dtype(dtype)), dtype, requires_grad)


def ones(shape, dtype: str = "float32", requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_np_dtype(dtype)), dtype, requires_grad)


def full(shape, value: float, dtype: str = "float32", requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=_np_dtype(dtype)), dtype, requires_grad)


# --- tape -------------------------------------------------------------------

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Entry:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class Tape:
    """Ordered record of differentiable operations; replayed once, in reverse."""

    def __init__(self):
        self._entries: list[_Entry] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()

    def __len__(self) -> int:
        return len(self._entries)


def make_op(
    name: str,
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Create the result tensor of a primitive and record it on the active tape.

    ``backward_fn`` maps the output cotangent to one cotangent per input
    (``None`` for inputs that need no gradient). Other modules use this hook to
    define their own primitives (e.g. the selective-scan recurrence).
    """
    out_data = np.ascontiguousarray(out_data)
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"operation {name!r} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._tape = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._entries.append(_Entry(out, tuple(inputs), backward_fn, name))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out. A tape may be walked at
    most once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced under an active tape")
    if tape._consumed:
        raise ContractError("tape has already been backpropagated")
    tape._consumed = True

    cotangents: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    produced = {id(e.out) for e in tape._entries}
    for entry in reversed(tape._entries):
        got = cotangents.pop(id(entry.out), None)
        if got is None:
            continue
        _, g = got
        entry.out.grad = g if entry.out.grad is None else entry.out.grad + g
        input_grads = entry.backward(g)
        for inp, ig in zip(entry.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.data.shape:
                raise ContractError(
                    f"backward rule of {entry.name!r} returned shape {ig.shape} "
                    f"for input of shape {inp.data.shape}"
                )
            key = id(inp)
            if key in cotangents:
                cotangents[key] = (inp, cotangents[key][1] + ig)
            else:
                cotangents[key] = (inp, ig.copy() if ig.base is not None else ig)
    # whatever is left belongs to leaves (never produced by an entry)
    for key, (t, g) in cotangents.items():
        if key in produced:
            continue
        t.grad = g if t.grad is None else t.grad + g


# --- broadcasting helpers ----------------------------------------------------


def _check_same_dtype(name: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise ContractError(f"{name}: dtype mismatch {a.dtype} vs {b.dtype}")


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape`` (trailing-aligned)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise primitives ---------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    _broadcast_shape("add", a, b)
    return make_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    _broadcast_shape("sub", a, b)
    return make_op(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_op(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("div", a, b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return make_op(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive input")
    ad = a.data
    return make_op("log", np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid_nd(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_nd(a.data)
    return make_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_nd(a.data)
    ad = a.data
    return make_op("silu", ad * s, (a,), lambda g: (g * (s + ad * s * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(np.zeros((), dtype=a.data.dtype), a.data)
    s = _sigmoid_nd(a.data)
    return make_op("softplus", out, (a,), lambda g: (g * s,))


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": texp,
    "log": tlog,
    "sigmoid": sigmoid,
    "silu": silu,
    "softplus": softplus,
}


def elementwise(op: str, *inputs: Tensor) -> Tensor:
    """Dispatch by name over the elementwise op set."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# --- reductions and shape moves -----------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    if len(set(axes)) != len(axes):
        raise DimensionError(f"repeated axis in {axis}")
    return axes


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes if axes else None, keepdims=keepdims)

    def backward_fn(g):
        gk = g
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            gk = g.reshape(shape)
        return (np.broadcast_to(gk, a.shape).astype(a.data.dtype, copy=True),)

    return make_op("sum", np.asarray(out, dtype=a.data.dtype), (a,), backward_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, _as_tensor(1.0 / count, a.dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return make_op(
        "matmul",
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T, ad.T @ g),
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return make_op(
        "permute",
        a.data.transpose(axes),
        (a,),
        lambda g: (g.transpose(inv),),
    )


def flip(a: Tensor, axis: int = 0) -> Tensor:
    return make_op("flip", np.flip(a.data, axis=axis), (a,), lambda g: (np.flip(g, axis=axis),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_op(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        backward_fn,
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}"
        )
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return make_op("narrow", a.data[idx].copy(), (a,), backward_fn)


# --- normalization and softmax -------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = axis % a.ndim
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return make_op("softmax", out, (a,), backward_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise DomainError("layer_norm eps must be > 0")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def backward_fn(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgain.astype(x.data.dtype), dbias.astype(x.data.dtype))

    return make_op("layer_norm", out, (x, gain, bias), backward_fn)


# --- 2-d convolution -------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"kernel {kh}x{kw} with stride {stride}, pad {pad} exceeds input {h}x{w}"
        )
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [c, oh, ow, kh, kw]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(
    cols: np.ndarray, x_shape: tuple[int, int, int], kh: int, kw: int, stride: int, pad: int,
    oh: int, ow: int,
) -> np.ndarray:
    c, h, w = x_shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(c, kh, kw, oh, ow)
    for a in range(kh):
        for b in range(kw):
            xp[:, a : a + stride * oh : stride, b : b + stride * ow : stride] += cols6[:, a, b]
    return xp[:, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Cross-correlation of ``x`` [c_in,H,W] with ``kernel`` [c_out,c_in,kh,kw]."""
    _check_same_dtype("conv2d", x, kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects x [c,H,W] and kernel [co,ci,kh,kw], got {x.shape}, {kernel.shape}")
    co, ci, kh, kw = kernel.shape
    if ci != x.shape[0]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape[0]}, kernel {ci}")
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = kernel.data.reshape(co, ci * kh * kw)
    out = (wmat @ cols).reshape(co, oh, ow)
    inputs: list[Tensor] = [x, kernel]
    if bias is not None:
        out = out + bias.data[:, None, None]
        inputs.append(bias)

    def backward_fn(g):
        gmat = g.reshape(co, oh * ow)
        gk = (gmat @ cols.T).reshape(kernel.shape)
        gx = _col2im(wmat.T @ gmat, x.shape, kh, kw, stride, padding, oh, ow)
        if bias is not None:
            return (gx, gk, g.sum(axis=(1, 2)))
        return (gx, gk)

    return make_op("conv2d", out, tuple(inputs), backward_fn)


def transposed_conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of conv2d: ``x`` [c_in,H,W], ``kernel`` [c_in,c_out,kh,kw].

    Output spatial size is ``(H-1)*stride - 2*padding + kh``.
    """
    _check_same_dtype("transposed_conv2d", x, kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(
            f"transposed_conv2d expects x [c,H,W] and kernel [ci,co,kh,kw], got {x.shape}, {kernel.shape}"
        )
    ci, co, kh, kw = kernel.shape
    if ci != x.shape[0]:
        raise DimensionError(f"transposed_conv2d channel mismatch: input {x.shape[0]}, kernel {ci}")
    _, h, w = x.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise DimensionError("transposed_conv2d output would be empty")
    wmat = kernel.data.reshape(ci, co * kh * kw)
    cols = wmat.T @ x.data.reshape(ci, h * w)
    out = _col2im(cols, (co, oh, ow), kh, kw, stride, padding, h, w)
    inputs: list[Tensor] = [x, kernel]
    if bias is not None:
        out = out + bias.data[:, None, None]
        inputs.append(bias)

    def backward_fn(g):
        gcols, _, _ = _im2col(g, kh, kw, stride, padding)
        gx = (wmat @ gcols).reshape(x.shape)
        gk = (x.data.reshape(ci, h * w) @ gcols.T).reshape(kernel.shape)
        if bias is not None:
            return (gx, gk, g.sum(axis=(1, 2)))
        return (gx, gk)

    return make_op("transposed_conv2d", out, tuple(inputs), backward_fn)


# --- finite-difference verification ----------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    max_rel_err: float
    tol: float
    passed: bool
    per_input: list[float] = field(default_factory=list)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar-valued ``f`` with central differences.

    Inputs must be float64. Relative error per coordinate uses a 1e-4 floor in
    the denominator so that true-zero gradients compare cleanly against
    finite-difference noise. With ``max_entries`` set, a deterministic random
    subset of coordinates per input is probed instead of all of them.
    """
    for t in inputs:
        if t.dtype != "float64":
            raise ContractError("grad_check requires float64 inputs")
    leaves = [Tensor(t.data.copy(), "float64", requires_grad=True) for t in inputs]
    with Tape():
        out = f(*leaves)
        if out.data.size != 1:
            raise ContractError("grad_check requires a scalar-valued function")
        backward(out)
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    plain = [Tensor(t.data.copy(), "float64") for t in inputs]

    def eval_plain() -> float:
        return float(f(*plain).data.reshape(()))

    per_input: list[float] = []
    if rng is None:
        rng = np.random.default_rng(0)
    for which, t in enumerate(plain):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            coords = rng.choice(n, size=max_entries, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        ga = analytic[which].reshape(-1)
        for i in coords:
            orig = flat[i]
            h = eps * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = eval_plain()
            flat[i] = orig - h
            fm = eval_plain()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(ga[i]), abs(numeric), 1e-4)
            worst = max(worst, abs(ga[i] - numeric) / denom)
        per_input.append(worst)
    max_rel = max(per_input) if per_input else 0.0
    return GradCheckReport(max_rel_err=max_rel, tol=tol, passed=max_rel <= tol, per_input=per_input)
