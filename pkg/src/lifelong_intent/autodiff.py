"""Reverse-mode automatic differentiation over dense float64 arrays.

A Graph is a Wengert list: every op appends a node that may only reference
earlier nodes, so node-id order is already a topological order. forward()
evaluates the ancestors of the requested node and caches their values,
backward() walks the same records in reverse accumulating adjoints, and
finite_diff_check() compares every analytic gradient coordinate against a
central difference. All values are float64 and every op checks its output
for NaN/Inf so numerical trouble surfaces where it happens.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray  # float64, row-major

NORM_FLOOR = 1e-12
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphStateError(RuntimeError):
    """Graph API used out of order, e.g. backward before forward."""


class ZeroNormError(ValueError):
    """A vector that must have positive norm is numerically zero."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def as_tensor(values) -> Tensor:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor values must be finite")
    return arr


class Node:
    """One operation record: op kind, input node ids, cached output."""

    __slots__ = ("graph", "id", "op", "inputs", "shape", "trainable", "name",
                 "extra", "value", "grad", "aux")

    def __init__(self, graph, node_id, op, inputs, shape, trainable=False,
                 name=None, extra=None):
        self.graph = graph
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.shape = shape
        self.trainable = trainable
        self.name = name
        self.extra = extra or {}
        self.value = None
        self.grad = None
        self.aux = None

    @property
    def label(self) -> str:
        return self.name if self.name else f"{self.op}#{self.id}"

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape}, name={self.name!r})"


def _unbroadcast(grad: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Graph:
    """Computation graph with trainable leaves and lazy evaluation.

    Single-threaded per instance; distinct graphs share no state. Evaluation
    is deterministic: the same node list and leaf values produce bit-identical
    results.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._version = 0
        self._fwd_state = None  # (loss id, version) of the last forward

    # ---------------------------------------------------------------- leaves

    def leaf(self, values, trainable=False, name=None) -> Node:
        arr = as_tensor(values)
        node = self._record("leaf", [], arr.shape, trainable=trainable, name=name)
        node.value = arr
        return node

    def constant(self, values, name=None) -> Node:
        return self.leaf(values, trainable=False, name=name)

    def set_value(self, node: Node, values) -> None:
        if node.op != "leaf":
            raise GraphStateError(f"can only assign values to leaves, not {node.label}")
        arr = as_tensor(values)
        if arr.shape != node.shape:
            raise ShapeError(f"leaf {node.label} has shape {node.shape}, got {arr.shape}")
        node.value = arr
        self._version += 1

    @property
    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "leaf" and n.trainable]

    # ------------------------------------------------------------------- ops

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        self._check_membership(a, b)
        if a.shape == () or b.shape == ():
            raise ShapeError(f"matmul needs 1-D or 2-D operands: {a.label}, {b.label}")
        if len(a.shape) == 1 and len(b.shape) == 1 and not transpose_b:
            if a.shape[0] != b.shape[0]:
                raise ShapeError(
                    f"dot length mismatch: {a.label} has {a.shape}, {b.label} has {b.shape}")
            out_shape = ()
        elif len(a.shape) == 2 and len(b.shape) == 2:
            inner_b = b.shape[1] if transpose_b else b.shape[0]
            out_b = b.shape[0] if transpose_b else b.shape[1]
            if a.shape[1] != inner_b:
                raise ShapeError(
                    f"matmul inner-dim mismatch: {a.label} has {a.shape}, "
                    f"{b.label} has {b.shape} (transpose_b={transpose_b})")
            out_shape = (a.shape[0], out_b)
        else:
            raise ShapeError(
                f"matmul supports vector·vector or matrix@matrix: "
                f"{a.label} {a.shape} vs {b.label} {b.shape}")
        return self._record("matmul", [a, b], out_shape,
                            extra={"transpose_b": transpose_b})

    def add(self, a: Node, b: Node) -> Node:
        return self._broadcast_op("add", a, b)

    def sub(self, a: Node, b: Node) -> Node:
        return self._broadcast_op("sub", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        return self._broadcast_op("mul", a, b)

    def scale(self, a: Node, factor: float) -> Node:
        self._check_membership(a)
        return self._record("scale", [a], a.shape, extra={"factor": float(factor)})

    def tanh(self, a: Node) -> Node:
        self._check_membership(a)
        return self._record("tanh", [a], a.shape)

    def relu(self, a: Node) -> Node:
        """Elementwise max(x, 0). Subgradient at the kink is 0 exactly."""
        self._check_membership(a)
        return self._record("relu", [a], a.shape)

    def log(self, a: Node, floor: float = LOG_FLOOR) -> Node:
        """Elementwise log(max(x, floor)); gradient is 0 where x <= floor."""
        self._check_membership(a)
        if floor <= 0:
            raise ValueError("log floor must be positive")
        return self._record("log", [a], a.shape, extra={"floor": float(floor)})

    def softmax(self, a: Node, temperature: float = 1.0) -> Node:
        """Row-wise softmax(x / temperature) with max subtraction."""
        self._check_membership(a)
        if len(a.shape) not in (1, 2):
            raise ShapeError(f"softmax needs a vector or matrix, got {a.label} {a.shape}")
        if temperature <= 0:
            raise ValueError("softmax temperature must be positive")
        return self._record("softmax", [a], a.shape,
                            extra={"temperature": float(temperature)})

    def l2norm(self, a: Node) -> Node:
        self._check_membership(a)
        return self._record("l2norm", [a], ())

    def cosine_rows(self, a: Node, b: Node) -> Node:
        """Pairwise cosine similarity between the rows of two matrices.

        The gradient is the closed-form expression, not a composition of
        primitive ops, to avoid cancellation near parallel vectors.
        """
        self._check_membership(a, b)
        if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[1]:
            raise ShapeError(
                f"cosine_rows needs matrices with equal row width: "
                f"{a.label} {a.shape} vs {b.label} {b.shape}")
        return self._record("cosine_rows", [a, b], (a.shape[0], b.shape[0]))

    def cosine_pairs(self, a: Node, b: Node) -> Node:
        """Cosine similarity of matching rows: out[i] = cos(a[i], b[i])."""
        self._check_membership(a, b)
        if len(a.shape) != 2 or a.shape != b.shape:
            raise ShapeError(
                f"cosine_pairs needs matrices of identical shape: "
                f"{a.label} {a.shape} vs {b.label} {b.shape}")
        return self._record("cosine_pairs", [a, b], (a.shape[0],))

    def mean(self, a: Node) -> Node:
        self._check_membership(a)
        return self._record("mean", [a], ())

    def sum(self, a: Node) -> Node:
        self._check_membership(a)
        return self._record("sum", [a], ())

    def slice_rows(self, a: Node, start: int, stop: int) -> Node:
        self._check_membership(a)
        if not a.shape:
            raise ShapeError(f"cannot slice scalar node {a.label}")
        n = a.shape[0]
        if not (0 <= start <= stop <= n):
            raise ShapeError(f"slice [{start}:{stop}] out of range for {a.label} {a.shape}")
        return self._record("slice_rows", [a], (stop - start,) + a.shape[1:],
                            extra={"start": start, "stop": stop})

    # ------------------------------------------------------------ evaluation

    def forward(self, loss: Node) -> float:
        """Evaluate `loss` and cache every intermediate for backward."""
        self._check_membership(loss)
        order = self._ancestors(loss)
        for node in order:
            if node.op == "leaf":
                if node.value is None:
                    raise GraphStateError(f"leaf {node.label} has no assigned value")
                continue
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                node.value = self._eval(node)
            if not np.all(np.isfinite(node.value)):
                raise NonFiniteError(f"non-finite output at node {node.label}")
        if loss.value.shape != () and loss.value.size != 1:
            raise ShapeError(f"loss node {loss.label} is not scalar: shape {loss.value.shape}")
        self._fwd_state = (loss.id, self._version)
        return float(loss.value)

    def backward(self, loss: Node) -> dict[Node, Tensor]:
        """Gradient of `loss` w.r.t. every trainable leaf.

        Trainable leaves the loss does not depend on get all-zero gradients.
        """
        self._check_membership(loss)
        if self._fwd_state != (loss.id, self._version):
            raise GraphStateError("backward requires a forward pass on the current graph state")
        order = self._ancestors(loss)
        for node in order:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(order):
            if node.grad is None or node.op == "leaf":
                continue
            self._vjp(node)
        grads: dict[Node, Tensor] = {}
        for p in self.parameters:
            grads[p] = p.grad if p.grad is not None else np.zeros(p.shape)
        return grads

    def finite_diff_check(self, loss: Node, epsilon: float = 1e-5) -> float:
        """Worst relative error between analytic and central-difference grads.

        Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
        Reports only; never asserts.
        """
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.forward(loss)
        analytic = self.backward(loss)
        worst = 0.0
        for param, grad in analytic.items():
            base = param.value.copy()
            flat_grad = np.asarray(grad).reshape(-1)
            for i in range(base.size):
                idx = np.unravel_index(i, base.shape) if base.shape else ()
                param.value[idx] = base[idx] + epsilon
                up = self.forward(loss)
                param.value[idx] = base[idx] - epsilon
                down = self.forward(loss)
                param.value[idx] = base[idx]
                numeric = (up - down) / (2.0 * epsilon)
                a = flat_grad[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
        self.forward(loss)  # restore caches at the base point
        return worst

    # -------------------------------------------------------------- internal

    def _record(self, op, inputs, shape, trainable=False, name=None, extra=None) -> Node:
        node = Node(self, len(self.nodes), op, [n.id for n in inputs], tuple(shape),
                    trainable=trainable, name=name, extra=extra)
        self.nodes.append(node)
        return node

    def _check_membership(self, *nodes: Node) -> None:
        for n in nodes:
            if n.graph is not self:
                raise GraphStateError(f"node {n.label} belongs to a different graph")

    def _broadcast_op(self, op, a: Node, b: Node) -> Node:
        self._check_membership(a, b)
        try:
            out_shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(
                f"cannot broadcast {a.label} {a.shape} with {b.label} {b.shape} for {op}")
        return self._record(op, [a, b], out_shape)

    def _ancestors(self, node: Node) -> list[Node]:
        seen = set()
        stack = [node.id]
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self.nodes[nid].inputs)
        return [self.nodes[i] for i in sorted(seen)]

    def _in(self, node: Node, k: int) -> Node:
        return self.nodes[node.inputs[k]]

    def _eval(self, node: Node) -> Tensor:
        op = node.op
        if op in ("add", "sub", "mul"):
            a, b = self._in(node, 0).value, self._in(node, 1).value
            if op == "add":
                return a + b
            if op == "sub":
                return a - b
            return a * b
        if op == "matmul":
            a, b = self._in(node, 0).value, self._in(node, 1).value
            if node.extra["transpose_b"]:
                b = b.T
            return a @ b
        if op == "scale":
            return node.extra["factor"] * self._in(node, 0).value
        if op == "tanh":
            return np.tanh(self._in(node, 0).value)
        if op == "relu":
            return np.maximum(self._in(node, 0).value, 0.0)
        if op == "log":
            return np.log(np.maximum(self._in(node, 0).value, node.extra["floor"]))
        if op == "softmax":
            s = self._in(node, 0).value / node.extra["temperature"]
            m = s.max(axis=-1, keepdims=True)
            e = np.exp(s - m)
            return e / e.sum(axis=-1, keepdims=True)
        if op == "l2norm":
            x = self._in(node, 0).value
            return np.asarray(np.sqrt((x * x).sum()))
        if op == "cosine_rows":
            a, b = self._in(node, 0).value, self._in(node, 1).value
            an = np.sqrt((a * a).sum(axis=1))
            bn = np.sqrt((b * b).sum(axis=1))
            self._require_norms(node, an, bn)
            node.aux = (an, bn)
            return (a @ b.T) / (an[:, None] * bn[None, :])
        if op == "cosine_pairs":
            a, b = self._in(node, 0).value, self._in(node, 1).value
            an = np.sqrt((a * a).sum(axis=1))
            bn = np.sqrt((b * b).sum(axis=1))
            self._require_norms(node, an, bn)
            node.aux = (an, bn)
            return (a * b).sum(axis=1) / (an * bn)
        if op == "mean":
            return np.asarray(self._in(node, 0).value.mean())
        if op == "sum":
            return np.asarray(self._in(node, 0).value.sum())
        if op == "slice_rows":
            return self._in(node, 0).value[node.extra["start"]:node.extra["stop"]]
        raise NotImplementedError(op)

    def _require_norms(self, node: Node, an: Tensor, bn: Tensor) -> None:
        if an.min(initial=np.inf) < NORM_FLOOR or bn.min(initial=np.inf) < NORM_FLOOR:
            raise ZeroNormError(f"zero-norm row in cosine inputs of {node.label}")

    def _accumulate(self, node: Node, grad: Tensor) -> None:
        if node.grad is None:
            node.grad = grad
        else:
            node.grad = node.grad + grad

    def _vjp(self, node: Node) -> None:
        g = node.grad
        op = node.op
        a = self._in(node, 0)
        b = self._in(node, 1) if len(node.inputs) > 1 else None
        if op == "add":
            self._accumulate(a, _unbroadcast(np.asarray(g, dtype=np.float64), a.shape))
            self._accumulate(b, _unbroadcast(np.asarray(g, dtype=np.float64), b.shape))
        elif op == "sub":
            self._accumulate(a, _unbroadcast(np.asarray(g, dtype=np.float64), a.shape))
            self._accumulate(b, _unbroadcast(np.asarray(-g, dtype=np.float64), b.shape))
        elif op == "mul":
            self._accumulate(a, _unbroadcast(g * b.value, a.shape))
            self._accumulate(b, _unbroadcast(g * a.value, b.shape))
        elif op == "matmul":
            av, bv = a.value, b.value
            if av.ndim == 1:
                self._accumulate(a, g * bv)
                self._accumulate(b, g * av)
            elif node.extra["transpose_b"]:
                self._accumulate(a, g @ bv)
                self._accumulate(b, g.T @ av)
            else:
                self._accumulate(a, g @ bv.T)
                self._accumulate(b, av.T @ g)
        elif op == "scale":
            self._accumulate(a, node.extra["factor"] * g)
        elif op == "tanh":
            self._accumulate(a, g * (1.0 - node.value * node.value))
        elif op == "relu":
            self._accumulate(a, g * (a.value > 0.0))
        elif op == "log":
            floor = node.extra["floor"]
            self._accumulate(a, np.where(a.value > floor, g / np.maximum(a.value, floor), 0.0))
        elif op == "softmax":
            y = node.value
            inner = (g * y).sum(axis=-1, keepdims=True)
            self._accumulate(a, (y * (g - inner)) / node.extra["temperature"])
        elif op == "l2norm":
            n = float(node.value)
            if n < NORM_FLOOR:
                raise ZeroNormError(f"l2norm gradient undefined at zero vector ({node.label})")
            self._accumulate(a, g * a.value / n)
        elif op == "cosine_rows":
            an, bn = node.aux
            av, bv, c = a.value, b.value, node.value
            gc = g * c
            da = (g / bn[None, :]) @ bv / an[:, None] \
                - gc.sum(axis=1, keepdims=True) * av / (an * an)[:, None]
            db = (g.T / an[None, :]) @ av / bn[:, None] \
                - gc.sum(axis=0)[:, None] * bv / (bn * bn)[:, None]
            self._accumulate(a, da)
            self._accumulate(b, db)
        elif op == "cosine_pairs":
            an, bn = node.aux
            av, bv, c = a.value, b.value, node.value
            da = (bv / (an * bn)[:, None] - c[:, None] * av / (an * an)[:, None]) * g[:, None]
            db = (av / (an * bn)[:, None] - c[:, None] * bv / (bn * bn)[:, None]) * g[:, None]
            self._accumulate(a, da)
            self._accumulate(b, db)
        elif op == "mean":
            self._accumulate(a, np.full(a.shape, float(g) / max(a.value.size, 1)))
        elif op == "sum":
            self._accumulate(a, np.full(a.shape, float(g)))
        elif op == "slice_rows":
            da = np.zeros(a.shape)
            da[node.extra["start"]:node.extra["stop"]] = g
            self._accumulate(a, da)
        else:
            raise NotImplementedError(op)


def forward(graph: Graph, loss: Node) -> float:
    return graph.forward(loss)


def backward(graph: Graph, loss: Node) -> dict[Node, Tensor]:
    return graph.backward(loss)


def finite_diff_check(graph: Graph, loss: Node, epsilon: float = 1e-5) -> float:
    return graph.finite_diff_check(loss, epsilon)
