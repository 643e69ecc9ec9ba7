"""Dense tensors with tape-based reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation is a
:class:`Function` subclass with hand-written ``forward``/``backward`` over raw
arrays; applying one to tensors that require gradients links the output to
the function instance. :class:`Tape` linearizes that graph in topological
order and :func:`backward` walks it in reverse, visiting each operation once.

Precision follows the inputs: float64 is used for verification and float32 is
allowed for training. Python scalars adopt the dtype of the tensor they meet.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = contextvars.ContextVar("attnrobust_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording within the current context."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """A differentiable operation.

    Subclasses implement ``forward`` (arrays in, array out) and ``backward``
    (output gradient in, one gradient or ``None`` per input out). Anything
    needed by ``backward`` is stashed on ``self`` during ``forward``.
    """

    inputs: tuple["Tensor", ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor | float", **kwargs) -> "Tensor":
        tensors = _coerce(inputs)
        fn = cls()
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        track = _GRAD_ENABLED.get() and any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=track)
        if track:
            fn.inputs = tensors
            result._op = fn
        return result


def _coerce(items: Sequence["Tensor | float"]) -> tuple["Tensor", ...]:
    dtype = next((x.dtype for x in items if isinstance(x, Tensor)), np.float64)
    return tuple(
        x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype)) for x in items
    )


class Tensor:
    """An n-dimensional real array with optional gradient tracking.

    Args:
        data: array-like values. Integer and boolean input is promoted to
            float64; float32/float64 input keeps its precision unless
            ``dtype`` is given.
        requires_grad: mark as a leaf whose gradient :func:`backward` fills.
        dtype: optional explicit floating dtype.
        name: optional label used in error messages and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "__weakref__")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._op: Function | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # -- shape & reductions -------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=axes)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    @property
    def mT(self) -> "Tensor":
        """Swap the last two axes."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def broadcast_to(self, shape) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)


def _scalar_error(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise arithmetic


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = _unbroadcast(g * self.b, self.a.shape) if self.inputs[0].requires_grad else None
        gb = _unbroadcast(g * self.a, self.b.shape) if self.inputs[1].requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = _unbroadcast(g / self.b, self.a.shape) if self.inputs[0].requires_grad else None
        gb = None
        if self.inputs[1].requires_grad:
            gb = _unbroadcast(-g * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class PowScalar(Function):
    def forward(self, a, exponent):
        self.a, self.p = a, exponent
        return a**exponent

    def backward(self, g):
        return (g * self.p * self.a ** (self.p - 1.0),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        return (g / (2.0 * self.out),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out * self.out),)


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)


class Sigmoid(Function):
    def forward(self, a):
        self.out = _stable_sigmoid(a)
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class EluPlusOne(Function):
    """ELU(x) + 1: ``x + 1`` for positive x, ``exp(x)`` otherwise."""

    def forward(self, a):
        self.pos = a > 0
        # floor keeps the output strictly positive once exp underflows
        neg = np.maximum(np.exp(np.minimum(a, 0.0)), np.finfo(a.dtype).tiny)
        self.slope = np.where(self.pos, 1.0, neg).astype(a.dtype, copy=False)
        return np.where(self.pos, a + 1.0, neg)

    def backward(self, g):
        return (g * self.slope,)


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """GELU, tanh approximation."""

    def forward(self, a):
        self.a = a
        self.t = np.tanh(_GELU_C * (a + 0.044715 * (a * a * a)))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, g):
        a, t = self.a, self.t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)


# ---------------------------------------------------------------------------
# shape operations


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} into {shape}") from exc

    def backward(self, g):
        return (g.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = tuple(ax % a.ndim for ax in axes)
        return a.transpose(self.axes)

    def backward(self, g):
        return (g.transpose(np.argsort(self.axes)),)


class BroadcastTo(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return np.broadcast_to(a, shape)

    def backward(self, g):
        return (_unbroadcast(g, self.shape),)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return a[index]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        if _is_basic_index(self.index):
            out[self.index] += g
        else:
            np.add.at(out, self.index, g)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        ga = gb = None
        if self.inputs[0].requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
        if self.inputs[1].requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold batch axes into one GEMM
                gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes.

    Raises:
        DimensionError: if the inner dimensions disagree or either operand
            has fewer than two axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from exc
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# normalizations and reductions used by the attention kernels


class SoftmaxRows(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        s = self.out
        return (s * (g - (g * s).sum(axis=self.axis, keepdims=True)),)


class LogSumExp(Function):
    def forward(self, a, axis=-1, keepdims=False):
        self.axis, self.keepdims = axis, keepdims
        m = a.max(axis=axis, keepdims=True)
        e = np.exp(a - m)
        s = e.sum(axis=axis, keepdims=True)
        self.probs = e / s
        out = np.log(s) + m
        return out if keepdims else np.squeeze(out, axis=axis)

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (g * self.probs,)


class LayerNorm(Function):
    def forward(self, x, weight, bias, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.rstd
        self.weight = weight
        return self.xhat * weight + bias

    def backward(self, g):
        xhat, rstd = self.xhat, self.rstd
        gw = g * self.weight
        gx = rstd * (
            gw - gw.mean(axis=-1, keepdims=True) - xhat * (gw * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)


class L2NormalizeRows(Function):
    """x / max(||x||, floor) along the last axis.

    Clamping rather than adding the floor keeps the result exactly invariant
    to positive rescaling of any row whose norm exceeds ``floor``.
    """

    def forward(self, x, floor=1e-12):
        self.x = x
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        self.active = norm > floor
        self.denom = np.where(self.active, norm, floor)
        return x / self.denom

    def backward(self, g):
        x, s = self.x, self.denom
        dot = (g * x).sum(axis=-1, keepdims=True)
        # clamped rows have a constant denominator
        return (g / s - np.where(self.active, x * dot / (s * s * s), 0.0),)


class CrossEntropy(Function):
    """Mean softmax cross-entropy of ``(batch, classes)`` logits."""

    def forward(self, logits, labels):
        self.labels = labels
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - lse
        self.probs = np.exp(logp)
        picked = logp[np.arange(len(labels)), labels]
        return np.asarray(-picked.mean(), dtype=logits.dtype)

    def backward(self, g):
        grad = self.probs.copy()
        grad[np.arange(len(self.labels)), self.labels] -= 1.0
        return (grad * (g / len(self.labels)),)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, overflow-safe for large |x|."""
    return Sigmoid.apply(x)


def elu_plus_one(x: Tensor) -> Tensor:
    """Positive feature map ELU(x) + 1 used by linear attention."""
    return EluPlusOne.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def softmax_rows(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction (rows by default)."""
    return SoftmaxRows.apply(x, axis=axis)


def logsumexp_rows(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp along ``axis`` (rows by default)."""
    return LogSumExp.apply(x, axis=axis, keepdims=keepdims)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm params {weight.shape}/{bias.shape} vs input {x.shape}")
    return LayerNorm.apply(x, weight, bias, eps=eps)


def l2_normalize_rows(x: Tensor, floor: float = 1e-12) -> Tensor:
    return L2NormalizeRows.apply(x, floor=floor)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (B, C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    return CrossEntropy.apply(logits, labels=labels)


# ---------------------------------------------------------------------------
# tape and backward pass


class Tape:
    """Topologically ordered record of the operations behind a tensor.

    ``nodes`` lists every tensor reachable from the output that takes part in
    differentiation, inputs before the tensors computed from them. Each
    non-leaf node carries the :class:`Function` that produced it.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._op is not None:
                for parent in node._op.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    @property
    def ops(self) -> list[Function]:
        return [n._op for n in self.nodes if n._op is not None]

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._op is None]

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    Raises:
        ContractError: if ``loss`` is not a single-element tensor.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape or Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._op is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parents = node._op.inputs
        for parent, pg in zip(parents, node._op.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_difference(f: Callable[[Tensor], Tensor | float], x: Tensor, step: float = 1e-6) -> Tensor:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = _scalar(f(Tensor(base.copy())))
            flat[i] = orig - step
            lo = _scalar(f(Tensor(base.copy())))
            flat[i] = orig
            grad.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    return Tensor(grad)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``; 0 when both vanish.

    A positive ``floor`` keeps near-zero gradients, where central differences
    are pure rounding noise, from reading as large relative errors.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)
