"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray and, when it requires a gradient, remembers its
parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks the recorded DAG in reverse topological order.
"""

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from ..errors import GraphError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value: ArrayLike) -> "Tensor":
    return value if isinstance(value, Tensor) else Tensor(value)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = tuple(_parents)
        self._backward = _backward

    # -- bookkeeping -----------------------------------------------------

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    @staticmethod
    def _result(data, parents: Iterable["Tensor"], backward, op: str) -> "Tensor":
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)
        return Tensor(data, op=op)

    # -- elementwise arithmetic -----------------------------------------

    def _binary(self, other: ArrayLike, op: str, fn, dfa, dfb) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        try:
            out = fn(a, b)
        except ValueError as exc:
            raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}", node=op) from exc

        def backward(g):
            return (
                unbroadcast(dfa(g, a, b, out), a.shape) if self.requires_grad else None,
                unbroadcast(dfb(g, a, b, out), b.shape) if other.requires_grad else None,
            )

        return Tensor._result(out, (self, other), backward, op)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return self._binary(other, "add", np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) + self

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self._binary(other, "sub", np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return self._binary(other, "mul", np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) * self

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return self._binary(
            other, "div", np.divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * a / (b * b)
        )

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        out = a ** exponent
        return Tensor._result(out, (self,), lambda g: (g * exponent * a ** (exponent - 1),), "pow")

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"cannot multiply {a.shape} by {b.shape}", node="matmul")
        out = a @ b
        return Tensor._result(out, (self, other), lambda g: (g @ b.T, a.T @ g), "matmul")

    # -- unary maps ------------------------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._result(np.log(a), (self,), lambda g: (g / a,), "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._result(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,), "relu")

    def sqrt(self) -> "Tensor":
        return self ** 0.5

    # -- reductions and views -------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(out, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {original} to {shape}", node="reshape") from exc
        return Tensor._result(out, (self,), lambda g: (g.reshape(original),), "reshape")

    def transpose(self, *axes) -> "Tensor":
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        return Tensor._result(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose"
        )

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape
        try:
            out = self.data[idx]
        except IndexError as exc:
            raise ShapeError(str(exc), node="getitem") from exc

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._result(out, (self,), backward, "getitem")

    # -- backprop --------------------------------------------------------

    def topological_order(self) -> list["Tensor"]:
        """Nodes reachable from self through gradient-carrying edges, inputs first."""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.size != 1:
                raise GraphError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self.topological_order()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


class Graph:
    """A differentiable computation with named parameters and declared inputs.

    ``build(params, inputs)`` receives Tensors and returns a dict of named output
    Tensors, one of which is the scalar loss node.
    """

    def __init__(
        self,
        build: Callable[[dict, dict], dict],
        parameters: dict[str, np.ndarray],
        inputs: dict[str, Optional[tuple]],
        loss: str = "loss",
        wrt_inputs: Sequence[str] = (),
    ):
        clash = set(parameters) & set(inputs)
        if clash:
            raise GraphError(f"names used for both parameters and inputs: {sorted(clash)}")
        unknown = set(wrt_inputs) - set(inputs)
        if unknown:
            raise GraphError(f"gradient requested for undeclared inputs: {sorted(unknown)}")
        self.build = build
        self.parameters = {k: np.array(v, dtype=np.float64) for k, v in parameters.items()}
        self.input_shapes = dict(inputs)
        self.loss = loss
        self.wrt_inputs = tuple(wrt_inputs)
        self._leaves: dict[str, Tensor] = {}
        self._outputs: Optional[dict[str, Tensor]] = None

    @property
    def nodes(self) -> list[Tensor]:
        if self._outputs is None:
            return []
        return self._outputs[self.loss].topological_order()

    def _check_input(self, name: str, value: np.ndarray) -> None:
        declared = self.input_shapes[name]
        if declared is None:
            return
        if len(declared) != value.ndim or any(d is not None and d != s for d, s in zip(declared, value.shape)):
            raise ShapeError(f"expected shape {declared}, got {value.shape}", node=f"input:{name}")


def evaluate(graph: Graph, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Run the forward pass and return every named output as an array."""
    missing = set(graph.input_shapes) - set(inputs)
    if missing:
        raise ShapeError(f"missing inputs {sorted(missing)}", node="inputs")
    leaves: dict[str, Tensor] = {}
    for name, value in graph.parameters.items():
        leaves[name] = Tensor(value, requires_grad=True, name=name)
    feeds: dict[str, Tensor] = {}
    for name in graph.input_shapes:
        value = np.asarray(inputs[name], dtype=np.float64)
        graph._check_input(name, value)
        feeds[name] = Tensor(value, requires_grad=name in graph.wrt_inputs, name=name)
        if name in graph.wrt_inputs:
            leaves[name] = feeds[name]
    outputs = graph.build({k: leaves[k] for k in graph.parameters}, feeds)
    if graph.loss not in outputs:
        raise GraphError(f"builder did not produce the loss node '{graph.loss}'")
    graph._leaves = leaves
    graph._outputs = outputs
    return {name: t.data for name, t in outputs.items()}


def gradients(graph: Graph) -> dict[str, np.ndarray]:
    """Gradient of the loss node with respect to every parameter and designated input."""
    if graph._outputs is None:
        raise GraphError("gradients() called before evaluate()")
    loss = graph._outputs[graph.loss]
    if loss.size != 1:
        raise GraphError(f"loss node must be scalar, got shape {loss.shape}")
    for leaf in graph._leaves.values():
        leaf.grad = None
    loss.backward()
    return {
        name: leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for name, leaf in graph._leaves.items()
    }
