"""Dense float64 arrays with reverse-mode automatic differentiation.

Every tensor produced by an operation remembers its parents and a closure
mapping the output gradient to parent gradients.  ``Tensor.backward`` sorts
the graph topologically (the tape), visits each node once, deposits
gradients on ``requires_grad`` leaves and then releases the tape.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    AxisOutOfRange,
    BroadcastError,
    DomainError,
    EmptyTape,
    InvalidHyperparam,
    InvalidPermutation,
    NonFiniteInput,
    NonScalarLoss,
    ShapeMismatch,
    TapeConsumed,
)

__all__ = [
    "Tensor",
    "tensor_new",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "ewise_binary",
    "ewise_unary",
    "relu",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "neg",
    "matmul",
    "conv2d",
    "reduce",
    "sum",
    "mean",
    "amax",
    "softmax",
    "log_softmax",
    "reshape",
    "transpose",
    "concat",
    "grad_check",
]

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, optimizer updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteInput(f"non-finite value produced by {where}")


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray; ``grad`` is ``None`` until a
    backward pass reaches this tensor (leaves only).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if _check:
            _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- bookkeeping -------------------------------------------------------
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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __deepcopy__(self, memo):
        # fresh storage and a fresh node id, so clones never alias on the tape
        new = type(self).__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.data = self.data.copy()
        new.grad = None if self.grad is None else self.grad.copy()
        new.node_id = next(_node_ids)
        new._parents = ()
        new._backward = None
        memo[id(self)] = new
        return new

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` of every reachable leaf that requires it.

        The graph is released afterwards; a second call raises ``TapeConsumed``.
        """
        if self.data.size != 1:
            raise NonScalarLoss(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise TapeConsumed("this graph has already been back-propagated; rerun the forward pass")
        if not self.requires_grad or self.is_leaf:
            raise EmptyTape("loss is not connected to any tensor that requires grad")

        tape = _topological_order(self)
        grads: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.data)}
        for node in reversed(tape):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise ShapeMismatch(
                        f"internal: {node._op} returned grad {pg.shape} for input {parent.data.shape}"
                    )
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg

        for node in tape:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._consumed = True
                node._op = "consumed"

    # -- operator sugar ----------------------------------------------------
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

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *perm):
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return transpose(self, perm or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.node_id not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out._consumed = False
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    else:
        out._parents = ()
        out._backward = None
        out._op = "leaf"
    return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def tensor_new(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeMismatch(f"extents must be positive, got {shape}")
    flat = np.asarray(list(values), dtype=np.float64)
    if flat.size != math.prod(shape):
        raise ShapeMismatch(f"{flat.size} values cannot fill shape {shape}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


# -- elementwise -----------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise BroadcastError(f"{kind}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "div")
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def ewise_binary(kind: str, a, b) -> Tensor:
    try:
        fn = _BINARY[kind]
    except KeyError:
        raise InvalidHyperparam(f"unknown binary op {kind!r}") from None
    return fn(a, b)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    # d/dx ln(1 + e^x) = sigmoid(x), evaluated without overflow
    sig = np.exp(x - out)
    return _result(out, (a,), lambda g: (g * sig,), "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive entries")
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("sqrt requires strictly positive entries")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


_UNARY = {"relu": relu, "softplus": softplus, "exp": exp, "log": log, "sqrt": sqrt, "neg": neg}


def ewise_unary(kind: str, a) -> Tensor:
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise InvalidHyperparam(f"unknown unary op {kind!r}") from None
    return fn(a)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes (if any) are batch axes and must agree."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), backward, "matmul")


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout, no bias."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or padding < 0:
        raise InvalidHyperparam(f"stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = kernel.shape
    if c != c_in:
        raise ShapeMismatch(f"input has {c} channels, kernel expects {c_in}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    wmat = kernel.data.reshape(c_out, c_in * kh * kw)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, h_out, w_out, c, kh, kw)
            if kh == 1 and kw == 1 and padding == 0:
                gx = np.zeros(x.shape)
                gx[:, :, ::stride, ::stride] = dcols[..., 0, 0].transpose(0, 3, 1, 2)
            else:
                gxp = np.zeros((n, c, hp, wp))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += (
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _result(out, (x, kernel), backward, "conv2d")


# -- reductions --------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise AxisOutOfRange(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisOutOfRange(f"repeated axis in {axis}")
    return tuple(sorted(out))


def reduce(kind: str, a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    if kind == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
        return _result(np.asarray(out), (a,), lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),), "sum")
    if kind == "mean":
        count = math.prod(shape[i] for i in axes) if axes else 1
        out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()
        return _result(
            np.asarray(out), (a,), lambda g: (np.broadcast_to(g.reshape(kept) / count, shape).copy(),), "mean"
        )
    if kind == "max":
        rest = tuple(i for i in range(a.ndim) if i not in axes)
        moved = a.data.transpose(rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        # argmax returns the first maximal entry in row-major order over the reduced axes
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        out_kept = out.reshape(kept)

        def backward(g):
            gflat = np.zeros(flat.shape)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            inv = np.argsort(rest + axes)
            return (gflat.reshape(moved.shape).transpose(inv),)

        return _result(out_kept if keepdims else out_kept.reshape(out.shape), (a,), backward, "max")
    raise InvalidHyperparam(f"unknown reduction {kind!r}")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return reduce("sum", a, axis, keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axis, keepdims)


def amax(a, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("max", a, axis, keepdims)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    (ax,) = _normalize_axes(axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    (ax,) = _normalize_axes(axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=ax, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


# -- rearrangement -----------------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = math.prod(s for s in shape if s != -1)
        if shape.count(-1) > 1 or known == 0 or a.size % known:
            raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}")
        shape = tuple(a.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != a.size:
        raise ShapeMismatch(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, perm: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if perm is None:
        perm = tuple(reversed(range(a.ndim)))
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(a.ndim)):
        raise InvalidPermutation(f"{perm} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(perm))
    return _result(a.data.transpose(perm), (a,), lambda g: (g.transpose(inv),), "transpose")


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    advanced = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros(a.shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _result(np.array(out), (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of an empty sequence")
    (ax,) = _normalize_axes(axis, tensors[0].ndim)
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, backward, "concat")


# -- verification ------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Largest |autodiff - central difference| / max(1, |central difference|).

    ``f`` must map a tensor to a scalar tensor.  ``x`` is not modified.
    """
    if eps <= 0:
        raise InvalidHyperparam("eps must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base, requires_grad=True)
    loss = f(leaf)
    if loss.requires_grad and not loss.is_leaf:
        loss.backward()
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    else:
        ad = np.zeros_like(base)

    fd = np.empty_like(base)
    probe = base.copy()
    flat_probe = probe.reshape(-1)
    for i in range(base.size):
        orig = flat_probe[i]
        flat_probe[i] = orig + eps
        with no_grad():
            up = f(Tensor(probe)).item()
        flat_probe[i] = orig - eps
        with no_grad():
            down = f(Tensor(probe)).item()
        flat_probe[i] = orig
        fd.reshape(-1)[i] = (up - down) / (2 * eps)
    return float(np.max(np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))))
