"""
Dense tensor arithmetic with reverse-mode automatic differentiation
Provides the Tensor type, differentiable primitives, graph evaluation and gradient checking
"""

import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes"""

    def __init__(self, op: str, *shapes: Tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        dims = " x ".join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {dims}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class GraphError(RuntimeError):
    """Raised on invalid use of a computation graph"""


def _as_array(data: ArrayLike, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Array value that records the operation which produced it

    Tensors are treated as immutable; only optimizer updates replace `data`
    on leaf parameters.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, _ctx=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional["Function"] = _ctx

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="only single-element tensors convert to float")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # Arithmetic
    def __neg__(self): return Neg.apply(self)
    def __add__(self, other): return Add.apply(self, other)
    def __radd__(self, other): return Add.apply(other, self)
    def __sub__(self, other): return Sub.apply(self, other)
    def __rsub__(self, other): return Sub.apply(other, self)
    def __mul__(self, other): return Mul.apply(self, other)
    def __rmul__(self, other): return Mul.apply(other, self)
    def __truediv__(self, other): return Div.apply(self, other)
    def __rtruediv__(self, other): return Div.apply(other, self)
    def __pow__(self, exponent: float): return Pow.apply(self, exponent=float(exponent))
    def __matmul__(self, other): return MatMul.apply(self, other)
    def __getitem__(self, index): return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def exp(self) -> "Tensor": return Exp.apply(self)
    def log(self) -> "Tensor": return Log.apply(self)
    def tanh(self) -> "Tensor": return Tanh.apply(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return Transpose.apply(self, axes=tuple(axes))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> "Tensor":
        return self.swapaxes(-1, -2)

    def backward(self, seed: Optional[ArrayLike] = None):
        """
        Backpropagate from this tensor into every requires_grad leaf

        Args:
            seed: Gradient of the final objective w.r.t. this tensor; defaults
                to 1 for scalar tensors
        """
        if seed is None:
            if self.size != 1:
                raise GraphError(f"backward: seed gradient required for non-scalar output of shape {self.shape}")
            seed = np.ones_like(self.data)
        backpropagate([(self, seed)])


class Function:
    """Base class for differentiable primitives"""

    name = "op"

    def __init__(self, *parents: Tensor, **kwargs):
        self.parents = parents
        self.kwargs = kwargs

    def needs(self, i: int) -> bool:
        return self.parents[i].requires_grad

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        dtype = next((t.dtype for t in inputs if isinstance(t, Tensor)), None)
        parents = tuple(t if isinstance(t, Tensor) else Tensor(t, dtype=dtype) for t in inputs)
        ctx = cls(*parents, **kwargs)
        try:
            out = ctx.forward(*[p.data for p in parents])
        except ShapeError:
            raise
        except ValueError as exc:
            raise ShapeError(cls.name, *[p.shape for p in parents], detail=str(exc)) from exc
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=requires_grad, dtype=out.dtype, _ctx=ctx if requires_grad else None)


def _topological_order(roots: Iterable[Tensor]) -> List[Tensor]:
    """Post-order over the graph; parents visited in argument order so the order is stable"""
    order: List[Tensor] = []
    visited = set()
    for root in roots:
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in reversed(node._ctx.parents):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
    return order


def backpropagate(roots: Sequence[Tuple[Tensor, ArrayLike]]):
    """Accumulate gradients into leaves from one or more seeded outputs"""
    grads: Dict[int, np.ndarray] = {}
    for tensor, seed in roots:
        if not tensor.requires_grad:
            raise GraphError("backward: output does not depend on any tensor requiring grad")
        seed = np.asarray(seed, dtype=tensor.dtype)
        if seed.shape != tensor.shape:
            raise ShapeError("backward", tensor.shape, seed.shape, detail="seed gradient shape")
        grads[id(tensor)] = grads[id(tensor)] + seed if id(tensor) in grads else seed

    for node in reversed(_topological_order([t for t, _ in roots])):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._ctx is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        parent_grads = node._ctx.backward(grad)
        for parent, pgrad in zip(node._ctx.parents, parent_grads):
            if pgrad is None or not parent.requires_grad:
                continue
            pgrad = np.asarray(pgrad, dtype=parent.dtype)
            key = id(parent)
            grads[key] = grads[key] + pgrad if key in grads else pgrad


# Elementwise primitives

class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        ga = _unbroadcast(grad, self.shapes[0]) if self.needs(0) else None
        gb = _unbroadcast(grad, self.shapes[1]) if self.needs(1) else None
        return ga, gb


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        ga = _unbroadcast(grad, self.shapes[0]) if self.needs(0) else None
        gb = _unbroadcast(-grad, self.shapes[1]) if self.needs(1) else None
        return ga, gb


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = _unbroadcast(grad * self.b, self.a.shape) if self.needs(0) else None
        gb = _unbroadcast(grad * self.a, self.b.shape) if self.needs(1) else None
        return ga, gb


class Div(Function):
    name = "div"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    name = "pow"

    def forward(self, a):
        self.a = a
        return a ** self.kwargs["exponent"]

    def backward(self, grad):
        p = self.kwargs["exponent"]
        return (grad * p * self.a ** (p - 1),)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Tanh(Function):
    name = "tanh"

    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1 - self.out * self.out),)


_GELU_C = np.sqrt(2.0 / np.pi)


class Gelu(Function):
    """GELU, tanh approximation"""

    name = "gelu"

    def forward(self, a):
        self.a = a
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a ** 3))
        return 0.5 * a * (1 + self.t)

    def backward(self, grad):
        a, t = self.a, self.t
        dt = (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * a * a)
        return (grad * (0.5 * (1 + t) + 0.5 * a * dt),)


# Linear algebra and reductions

class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(self.name, a.shape, b.shape)
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = _unbroadcast(grad @ np.swapaxes(self.b, -1, -2), self.a.shape) if self.needs(0) else None
        gb = _unbroadcast(np.swapaxes(self.a, -1, -2) @ grad, self.b.shape) if self.needs(1) else None
        return ga, gb


class Sum(Function):
    name = "sum"

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(axis=self.kwargs["axis"], keepdims=self.kwargs["keepdims"]))

    def backward(self, grad):
        axis = self.kwargs["axis"]
        if axis is not None and not self.kwargs["keepdims"]:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(sorted(a % len(self.shape) for a in axes))
            for a in axes:
                grad = np.expand_dims(grad, a)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a):
        self.shape = a.shape
        return a.reshape(self.kwargs["shape"])

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a):
        axes = self.kwargs["axes"]
        if sorted(a_ % a.ndim for a_ in axes) != list(range(a.ndim)):
            raise ShapeError(self.name, a.shape, detail=f"invalid axes {axes}")
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort([a % grad.ndim for a in self.kwargs["axes"]])),)


class GetItem(Function):
    name = "getitem"

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a[self.kwargs["index"]])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.kwargs["index"], grad)
        return (full,)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays):
        axis = self.kwargs["axis"]
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.kwargs["axis"]))


class Embedding(Function):
    """Row gather from a weight matrix; ids are integer constants"""

    name = "embedding"

    def forward(self, weight):
        ids = self.kwargs["ids"]
        self.shape = weight.shape
        return weight[ids]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(full, self.kwargs["ids"], grad)
        return (full,)


class TakeAlongLast(Function):
    """Pick one entry per row along the last axis"""

    name = "take_along_last"

    def forward(self, a):
        ids = self.kwargs["ids"][..., None]
        if ids.shape[:-1] != a.shape[:-1]:
            raise ShapeError(self.name, a.shape, self.kwargs["ids"].shape)
        self.shape = a.shape
        return np.take_along_axis(a, ids, axis=-1)[..., 0]

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(full, self.kwargs["ids"][..., None], grad[..., None], axis=-1)
        return (full,)


class Softmax(Function):
    name = "softmax"

    def forward(self, a):
        axis = self.kwargs["axis"]
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.kwargs["axis"], keepdims=True)),)


class LogSumExp(Function):
    name = "logsumexp"

    def forward(self, a):
        axis = self.kwargs["axis"]
        m = a.max(axis=axis, keepdims=True)
        e = np.exp(a - m)
        s = e.sum(axis=axis, keepdims=True)
        self.softmax = e / s
        return (m + np.log(s)).squeeze(axis)

    def backward(self, grad):
        return (np.expand_dims(grad, self.kwargs["axis"]) * self.softmax,)


# Functional API

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    return LogSumExp.apply(x, axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat", detail="no tensors given")
    return Concat.apply(*tensors, axis=axis)


def embedding(weight: Tensor, ids: ArrayLike) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return Embedding.apply(weight, ids=ids)


def take_along_last(x: Tensor, ids: ArrayLike) -> Tensor:
    return TakeAlongLast.apply(x, ids=np.asarray(ids, dtype=np.int64))


# Graph evaluation

class Graph:
    """
    Named computation description

    Wraps a callable taking named Tensors and returning a Tensor or a mapping
    of named Tensors. Leaves captured by the callable (model parameters)
    receive gradients as well.
    """

    def __init__(self, fn: Callable[..., Union[Tensor, Dict[str, Tensor]]], name: str = "graph"):
        self.fn = fn
        self.name = name
        self.inputs: Optional[Dict[str, Tensor]] = None
        self.outputs: Optional[Dict[str, Tensor]] = None

    def forward(self, inputs: Dict[str, Tensor]) -> Dict[str, Tensor]:
        outputs = self.fn(**inputs)
        if isinstance(outputs, Tensor):
            outputs = {"out": outputs}
        self.inputs = dict(inputs)
        self.outputs = dict(outputs)
        return self.outputs

    def backward(self, seed_grads: Optional[Dict[str, ArrayLike]] = None) -> Dict[str, np.ndarray]:
        if self.outputs is None:
            raise GraphError(f"{self.name}: backward called before forward")
        if seed_grads is None:
            seed_grads = {name: None for name in self.outputs}
        roots = []
        for name, seed in seed_grads.items():
            if name not in self.outputs:
                raise GraphError(f"{self.name}: unknown output '{name}'")
            out = self.outputs[name]
            if seed is None:
                if out.size != 1:
                    raise GraphError(f"{self.name}: seed gradient required for non-scalar output '{name}'")
                seed = np.ones_like(out.data)
            if out.requires_grad:
                roots.append((out, seed))
        for tensor in self.inputs.values():
            if tensor.requires_grad:
                tensor.zero_grad()
        if roots:
            backpropagate(roots)
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.inputs.items() if t.requires_grad
        }


def forward(graph: Graph, inputs: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """Evaluate a graph on named inputs"""
    return graph.forward(inputs)


def backward(graph: Graph, seed_grads: Optional[Dict[str, ArrayLike]] = None) -> Dict[str, np.ndarray]:
    """Gradients of the graph outputs w.r.t. its requires_grad inputs"""
    return graph.backward(seed_grads)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               indices: Optional[Iterable[int]] = None) -> float:
    """
    Compare analytic gradients against central differences in 64-bit

    Args:
        f: Scalar-valued function of one tensor
        x: Point at which to check
        eps: Finite-difference step
        indices: Flat coordinates to check; all coordinates by default

    Returns:
        Max over coordinates of |analytic - cd| / (|analytic| + |cd| + 1e-12)
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    base = np.array(x.data, dtype=np.float64)
    point = Tensor(base.copy(), requires_grad=True)
    out = f(point)
    if out.size != 1:
        raise ShapeError("grad_check", out.shape, detail="f must be scalar-valued")
    if out.requires_grad:
        out.backward()
    analytic = point.grad if point.grad is not None else np.zeros_like(base)

    coords = range(base.size) if indices is None else indices
    worst = 0.0
    for idx in coords:
        plus = base.copy()
        plus.flat[idx] += eps
        minus = base.copy()
        minus.flat[idx] -= eps
        f_plus = float(f(Tensor(plus)).data.reshape(-1)[0])
        f_minus = float(f(Tensor(minus)).data.reshape(-1)[0])
        cd = (f_plus - f_minus) / (2 * eps)
        a = float(analytic.flat[idx])
        worst = max(worst, abs(a - cd) / (abs(a) + abs(cd) + 1e-12))
    logger.debug("grad_check over %s coordinates: max rel err %.3e", base.size if indices is None else "selected", worst)
    return worst
