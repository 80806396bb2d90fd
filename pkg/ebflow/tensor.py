"""Dense float64 tensors with a reverse-mode tape.

Backward passes are written in terms of Tensor operations, so the gradients
they emit can be differentiated again (``grad(..., create_graph=True)``).
Every score-matching objective relies on this: it differentiates dE/dx with
respect to the flow parameters.

Broadcasting is limited to scalar-with-tensor; anything else goes through
explicit shape ops (``expand``, ``sum(axis=...)``, ``reshape``).
"""

import logging
import threading
import warnings
from collections import Counter
from contextlib import contextmanager
from typing import Any, Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, special

from ebflow.errors import GradientError, ShapeError, SingularMatrixError

logger = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-12

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def grad_mode(enabled: bool) -> Iterator[None]:
    """Enable or disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = previous


def no_grad():
    return grad_mode(False)


def _active_tapes() -> List["Tape"]:
    tapes = getattr(_state, "tapes", None)
    if tapes is None:
        tapes = []
        _state.tapes = tapes
    return tapes


class Tape:
    """Records every node created on this thread while the tape is active.

    Creation order is a valid topological order, since a node's parents always
    exist before it. Used to inspect which operations a computation touched.
    """

    def __init__(self):
        self.nodes: List["Tensor"] = []

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _active_tapes().remove(self)

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def op_counts(self) -> Counter:
        return Counter(node.op for node in self.nodes)

    def __contains__(self, op: str) -> bool:
        return any(node.op == op for node in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A node of the differentiation graph holding a float64 array."""

    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self.parents: Tuple["Tensor", ...] = ()
        self._fn: Optional["Function"] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.requires_grad = False
        out.name = None
        out.op = op
        out.parents = ()
        out._fn = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item", [self.shape], "only single-element tensors convert to float")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(self, lift(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return Add.apply(lift(other), self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(self, lift(other))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return Sub.apply(lift(other), self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(self, lift(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return Mul.apply(lift(other), self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(self, lift(other))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return Div.apply(lift(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(self, lift(other))

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        return MatMul.apply(lift(other), self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def tanh(self) -> "Tensor":
        return Tanh.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def softplus(self) -> "Tensor":
        return Softplus.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=tuple(shape))

    def expand(self, axis: int, size: int) -> "Tensor":
        return Expand.apply(self, axis=axis, size=size)


def lift(value: ArrayLike) -> Tensor:
    """Wrap constants as non-differentiable tensors."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def tensor(data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class Function:
    """Base class for differentiable operations.

    ``forward`` works on raw arrays; ``backward`` receives the upstream
    gradient as a Tensor and must return one Tensor (or None) per input,
    built from Tensor operations so that it is itself differentiable.
    """

    op = "function"

    def __init__(self, *inputs: Tensor, **attrs: Any):
        self.inputs = inputs
        self.attrs = attrs
        self.output: Optional[Tensor] = None

    def check(self, *arrays: np.ndarray) -> None:
        pass

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"forward not implemented for {self.op}")

    def backward(self, grad: Tensor) -> Tuple[Optional[Tensor], ...]:
        raise NotImplementedError(f"backward not implemented for {self.op}")

    def annotate(self, out: Tensor) -> None:
        pass

    @classmethod
    def apply(cls, *inputs: Tensor, **attrs: Any) -> Tensor:
        fn = cls(*inputs, **attrs)
        arrays = [t.data for t in inputs]
        fn.check(*arrays)
        out = Tensor._from_op(fn.forward(*arrays), cls.op)
        fn.annotate(out)
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.parents = tuple(inputs)
            out._fn = fn
            fn.output = out
        for tape in _active_tapes():
            tape.record(out)
        return out


def _is_scalar(shape: Tuple[int, ...]) -> bool:
    return int(np.prod(shape, dtype=np.int64)) == 1 and len(shape) <= 1


def _reduce_like(grad: Tensor, like: Tensor) -> Tensor:
    """Sum a gradient back down to a scalar operand's shape."""
    if grad.shape == like.shape:
        return grad
    return tensor_sum(grad).reshape(*like.shape)


class _Elementwise(Function):
    def check(self, a: np.ndarray, b: np.ndarray) -> None:
        if a.shape != b.shape and not (_is_scalar(a.shape) or _is_scalar(b.shape)):
            raise ShapeError(self.op, [a.shape, b.shape], "only scalar-with-tensor broadcasting is supported")

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if _is_scalar(a.shape) and a.shape != b.shape:
            a = a.reshape(())
        if _is_scalar(b.shape) and a.shape != b.shape:
            b = b.reshape(())
        return self.compute(a, b)

    def compute(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _scalarize(self, t: Tensor) -> Tensor:
        other = self.output
        if other is not None and t.shape != other.shape and t.size == 1:
            return t.reshape()
        return t


class Add(_Elementwise):
    op = "add"

    def compute(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return _reduce_like(grad, a), _reduce_like(grad, b)


class Sub(_Elementwise):
    op = "sub"

    def compute(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return _reduce_like(grad, a), _reduce_like(-grad, b)


class Mul(_Elementwise):
    op = "mul"

    def compute(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (
            _reduce_like(grad * self._scalarize(b), a),
            _reduce_like(grad * self._scalarize(a), b),
        )


class Div(_Elementwise):
    op = "div"

    def compute(self, a, b):
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        b_s = self._scalarize(b)
        grad_a = grad / b_s
        grad_b = -grad * self.output / b_s
        return _reduce_like(grad_a, a), _reduce_like(grad_b, b)


class Neg(Function):
    op = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    op = "matmul"

    def check(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(self.op, [a.shape, b.shape], "expected (n, k) @ (k, m)")

    def forward(self, a, b):
        return a @ b

    def backward(self, grad):
        a, b = self.inputs
        return grad @ transpose(b), transpose(a) @ grad


class Transpose(Function):
    op = "transpose"

    def check(self, a):
        if a.ndim != 2:
            raise ShapeError(self.op, [a.shape], "expected a matrix")

    def forward(self, a):
        return a.T.copy()

    def backward(self, grad):
        return (transpose(grad),)


class Exp(Function):
    op = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, grad):
        return (grad * self.output,)


class Log(Function):
    op = "log"

    def forward(self, a):
        return np.log(a)

    def backward(self, grad):
        return (grad / self.inputs[0],)


class Sigmoid(Function):
    op = "sigmoid"

    def forward(self, a):
        return special.expit(a)

    def backward(self, grad):
        out = self.output
        return (grad * out * (1.0 - out),)


class Softplus(Function):
    """log(1 + e^y), computed without overflow."""

    op = "softplus"

    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        return (grad * sigmoid(self.inputs[0]),)


class Tanh(Function):
    op = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def backward(self, grad):
        out = self.output
        return (grad * (1.0 - out * out),)


class Abs(Function):
    op = "abs"

    def forward(self, a):
        return np.abs(a)

    def backward(self, grad):
        return (grad * Tensor(np.sign(self.inputs[0].data)),)


class Sum(Function):
    op = "sum"

    def check(self, a):
        axis = self.attrs["axis"]
        if axis is not None and not -a.ndim <= axis < a.ndim:
            raise ShapeError(self.op, [a.shape], f"axis {axis} out of range")

    def forward(self, a):
        axis = self.attrs["axis"]
        if axis is None:
            return np.asarray(a.sum())
        return a.sum(axis=axis)

    def backward(self, grad):
        (a,) = self.inputs
        axis = self.attrs["axis"]
        if axis is None:
            return (BroadcastScalar.apply(grad, shape=a.shape),)
        axis = axis % a.ndim
        return (Expand.apply(grad, axis=axis, size=a.shape[axis]),)


class BroadcastScalar(Function):
    op = "broadcast"

    def forward(self, a):
        return np.full(self.attrs["shape"], float(a.reshape(())))

    def backward(self, grad):
        return (tensor_sum(grad).reshape(*self.inputs[0].shape),)


class Expand(Function):
    """Insert a new axis and repeat the input ``size`` times along it."""

    op = "expand"

    def check(self, a):
        axis = self.attrs["axis"]
        if not 0 <= axis <= a.ndim:
            raise ShapeError(self.op, [a.shape], f"cannot insert axis {axis}")

    def forward(self, a):
        axis, size = self.attrs["axis"], self.attrs["size"]
        return np.repeat(np.expand_dims(a, axis), size, axis=axis)

    def backward(self, grad):
        return (tensor_sum(grad, axis=self.attrs["axis"]),)


class Reshape(Function):
    op = "reshape"

    def check(self, a):
        shape = self.attrs["shape"]
        if int(np.prod(shape, dtype=np.int64)) != a.size:
            raise ShapeError(self.op, [a.shape, shape], "sizes differ")

    def forward(self, a):
        return a.reshape(self.attrs["shape"])

    def backward(self, grad):
        return (grad.reshape(*self.inputs[0].shape),)


class Slice(Function):
    """Contiguous slice [start, stop) along ``axis``."""

    op = "slice"

    def check(self, a):
        axis, start, stop = self.attrs["axis"], self.attrs["start"], self.attrs["stop"]
        if not (0 <= axis < a.ndim and 0 <= start <= stop <= a.shape[axis]):
            raise ShapeError(self.op, [a.shape], f"slice [{start}:{stop}] on axis {axis}")

    def forward(self, a):
        index = [slice(None)] * a.ndim
        index[self.attrs["axis"]] = slice(self.attrs["start"], self.attrs["stop"])
        return a[tuple(index)].copy()

    def backward(self, grad):
        (a,) = self.inputs
        return (
            Embed.apply(
                grad, axis=self.attrs["axis"], start=self.attrs["start"], size=a.shape[self.attrs["axis"]]
            ),
        )


class Embed(Function):
    """Zero-pad along ``axis`` so the input sits at offset ``start``."""

    op = "embed"

    def forward(self, a):
        axis, start, size = self.attrs["axis"], self.attrs["start"], self.attrs["size"]
        shape = list(a.shape)
        shape[axis] = size
        out = np.zeros(shape)
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + a.shape[axis])
        out[tuple(index)] = a
        return out

    def backward(self, grad):
        (a,) = self.inputs
        axis, start = self.attrs["axis"], self.attrs["start"]
        return (Slice.apply(grad, axis=axis, start=start, stop=start + a.shape[axis]),)


class Concat(Function):
    op = "concat"

    def check(self, *arrays):
        axis = self.attrs["axis"]
        first = arrays[0]
        for arr in arrays[1:]:
            if arr.ndim != first.ndim or any(
                arr.shape[d] != first.shape[d] for d in range(first.ndim) if d != axis
            ):
                raise ShapeError(self.op, [x.shape for x in arrays], f"cannot join along axis {axis}")

    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.attrs["axis"])

    def backward(self, grad):
        axis = self.attrs["axis"]
        grads = []
        offset = 0
        for t in self.inputs:
            width = t.shape[axis]
            grads.append(Slice.apply(grad, axis=axis, start=offset, stop=offset + width))
            offset += width
        return tuple(grads)


def _lu(matrix: np.ndarray, context: str) -> Tuple[np.ndarray, np.ndarray]:
    """LU with partial pivoting; raises on any pivot with |p| <= PIVOT_TOLERANCE."""
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(context, [matrix.shape], "expected a square matrix")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", linalg.LinAlgWarning)
        lu, piv = linalg.lu_factor(matrix, check_finite=True)
    pivots = np.diag(lu)
    bad = np.flatnonzero(np.abs(pivots) <= PIVOT_TOLERANCE)
    if bad.size:
        index = int(bad[0])
        raise SingularMatrixError(index, float(pivots[index]), context)
    return lu, piv


def slogdet_array(matrix: np.ndarray) -> Tuple[float, float]:
    """(sign, log|det|) from the LU pivots."""
    lu, piv = _lu(np.asarray(matrix, dtype=np.float64), "slogdet")
    pivots = np.diag(lu)
    swaps = int(np.count_nonzero(piv != np.arange(len(piv))))
    sign = float(np.prod(np.sign(pivots))) * (-1.0 if swaps % 2 else 1.0)
    return sign, float(np.sum(np.log(np.abs(pivots))))


def slogdet_adjoint(matrix: ArrayLike, upstream: float = 1.0) -> Tensor:
    """Gradient contribution ``upstream * (W^T)^{-1}`` of log|det W|. O(D^3)."""
    w = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix, dtype=np.float64)
    lu, piv = _lu(w, "slogdet_adjoint")
    inv_t = linalg.lu_solve((lu, piv), np.eye(w.shape[0]), trans=1)
    return Tensor(upstream * inv_t)


class Slogdet(Function):
    op = "slogdet"

    def forward(self, a):
        sign, logabs = slogdet_array(a)
        self.sign = sign
        return np.asarray(logabs)

    def annotate(self, out):
        out.sign = self.sign

    def backward(self, grad):
        (w,) = self.inputs
        if not is_grad_enabled():
            return (slogdet_adjoint(w, grad.item()),)
        return (grad * transpose(inverse(w)),)


class Inverse(Function):
    op = "inverse"

    def forward(self, a):
        lu, piv = _lu(a, "inverse")
        return linalg.lu_solve((lu, piv), np.eye(a.shape[0]))

    def backward(self, grad):
        inv_t = transpose(self.output)
        return (-(inv_t @ grad @ inv_t),)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(lift(a), lift(b))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Sub.apply(lift(a), lift(b))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(lift(a), lift(b))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Div.apply(lift(a), lift(b))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(lift(a), lift(b))


def transpose(a: ArrayLike) -> Tensor:
    return Transpose.apply(lift(a))


def exp(a: ArrayLike) -> Tensor:
    return Exp.apply(lift(a))


def log(a: ArrayLike) -> Tensor:
    return Log.apply(lift(a))


def sigmoid(a: ArrayLike) -> Tensor:
    return Sigmoid.apply(lift(a))


def softplus(a: ArrayLike) -> Tensor:
    return Softplus.apply(lift(a))


def tanh(a: ArrayLike) -> Tensor:
    return Tanh.apply(lift(a))


def absolute(a: ArrayLike) -> Tensor:
    return Abs.apply(lift(a))


def tensor_sum(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    return Sum.apply(lift(a), axis=axis)


def mean(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = lift(a)
    count = a.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis) / float(count)


def squared_norm(a: ArrayLike, axis: Optional[int] = None) -> Tensor:
    a = lift(a)
    return tensor_sum(a * a, axis)


def affine(a: ArrayLike, scale: float, shift: float) -> Tensor:
    return lift(a) * float(scale) + float(shift)


def concatenate(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    items = [lift(t) for t in tensors]
    return Concat.apply(*items, axis=axis % items[0].ndim)


def take(a: ArrayLike, start: int, stop: int, axis: int = -1) -> Tensor:
    a = lift(a)
    return Slice.apply(a, axis=axis % a.ndim, start=start, stop=stop)


def split(a: ArrayLike, index: int, axis: int = -1) -> Tuple[Tensor, Tensor]:
    a = lift(a)
    axis = axis % a.ndim
    return take(a, 0, index, axis), take(a, index, a.shape[axis], axis)


def slogdet(a: ArrayLike) -> Tuple[float, Tensor]:
    """Returns (sign, log|det|) with log|det| on the tape."""
    out = Slogdet.apply(lift(a))
    return out.sign, out


def inverse(a: ArrayLike) -> Tensor:
    return Inverse.apply(lift(a))


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            order.append(node)
            continue
        if key in visited:
            continue
        visited.add(key)
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def grad(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> List[Tensor]:
    """Gradients of a scalar ``root`` with respect to each tensor in ``wrt``.

    Contributions from shared subexpressions are accumulated. Tensors that do
    not influence ``root`` receive zeros. With ``create_graph`` the returned
    gradients are nodes of a new graph and can be differentiated again.
    """
    if root.size != 1:
        raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {id(root): Tensor(np.ones_like(root.data))}
    if root.requires_grad:
        with grad_mode(create_graph):
            for node in reversed(_topological_order(root)):
                upstream = grads.get(id(node))
                if upstream is None or node._fn is None:
                    continue
                for parent, contribution in zip(node.parents, node._fn.backward(upstream)):
                    if contribution is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = contribution if key not in grads else grads[key] + contribution
    results = []
    for target in wrt:
        g = grads.get(id(target))
        if g is None:
            g = Tensor(np.zeros_like(target.data))
        results.append(g if create_graph else g.detach())
    return results


def jacobian(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Full Jacobian of a row-wise map at a single point, one backward pass per output.

    ``fn`` maps a (1, D) tensor to a (1, D') tensor; the result is (D', D).
    """
    point = Tensor(np.asarray(x, dtype=np.float64).reshape(1, -1), requires_grad=True)
    out = fn(point)
    rows = []
    for i in range(out.shape[-1]):
        (g,) = grad(tensor_sum(take(out, i, i + 1)), [point])
        rows.append(g.data.reshape(-1))
    return np.stack(rows)


def batch_jacobian(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Per-row Jacobians of a row-wise map, shape (N, D', D), with D' backward passes."""
    points = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = fn(points)
    rows = []
    for i in range(out.shape[-1]):
        (g,) = grad(tensor_sum(take(out, i, i + 1)), [points])
        rows.append(g.data)
    return np.stack(rows, axis=1)
