"""
Minimal reverse-mode gradient tape over numpy arrays.

Operations are recorded in execution order, which is a topological order of
the graph; backward walks the record in reverse and visits each node once.
A tape created with record=False computes values only (inference).
"""

import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from offroad_planner.errors import GraphError

logger = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Node:
    """A value in the graph plus the closure that propagates its gradient."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "tape", "name", "requires_grad", "cache")

    def __init__(self, value: np.ndarray, tape: "GradTape", parents: Tuple["Node", ...] = (),
                 backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
                 name: Optional[str] = None, requires_grad: bool = False):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape
        self.name = name
        self.requires_grad = requires_grad
        self.cache: Dict[str, np.ndarray] = {}

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(name={self.name!r}, shape={self.value.shape})"


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class GradTape:
    """
    Records operations for reverse-mode differentiation.

    Args:
        record: When False, operations only compute values and backward is
            unavailable.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: List[Node] = []
        self.leaves: List[Node] = []

    # -- graph construction -------------------------------------------------

    def leaf(self, value, name: Optional[str] = None, requires_grad: bool = True) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), self, name=name,
                    requires_grad=requires_grad and self.record)
        if self.record:
            self.nodes.append(node)
            if node.requires_grad:
                self.leaves.append(node)
        return node

    def constant(self, value, name: Optional[str] = None) -> Node:
        return self.leaf(value, name=name, requires_grad=False)

    def _check(self, *nodes: Node) -> None:
        for node in nodes:
            if not isinstance(node, Node) or node.tape is not self:
                raise GraphError(f"{node!r} does not belong to this tape")

    def _op(self, value: np.ndarray, parents: Tuple[Node, ...], backward_fn, name: str) -> Node:
        self._check(*parents)
        if not self.record:
            return Node(value, self, name=name)
        needs = any(p.requires_grad for p in parents)
        node = Node(value, self, parents if needs else (), backward_fn if needs else None,
                    name=name, requires_grad=needs)
        self.nodes.append(node)
        return node

    # -- elementwise and structural ops -------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        return self._op(a.value + b.value, (a, b),
                        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._op(av * bv, (a, b),
                        lambda g: (unbroadcast(g * bv, a.shape), unbroadcast(g * av, b.shape)), "mul")

    def scale(self, a: Node, factor: float) -> Node:
        return self._op(a.value * factor, (a,), lambda g: (g * factor,), "scale")

    def matmul(self, a: Node, b: Node) -> Node:
        """Batched matrix product; b may be a shared 2-D weight."""
        av, bv = a.value, b.value

        def backward(g):
            ga = g @ np.swapaxes(bv, -1, -2)
            if bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
            return unbroadcast(ga, av.shape), gb

        return self._op(av @ bv, (a, b), backward, "matmul")

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        """Dense layer x @ w + b."""
        return self.add(self.matmul(x, w), b)

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)
        return self._op(out, (a,), lambda g: (g * (1.0 - out ** 2),), "tanh")

    def relu(self, a: Node) -> Node:
        mask = a.value > 0.0
        return self._op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")

    def sigmoid(self, a: Node) -> Node:
        out = _sigmoid(a.value)
        return self._op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._op(out, (a,), lambda g: (g * out,), "exp")

    def variance(self, log_var: Node, var_min: float) -> Node:
        """exp(log_var) floored at var_min."""
        raw = np.exp(log_var.value)
        active = raw > var_min
        return self._op(np.where(active, raw, var_min), (log_var,), lambda g: (g * raw * active,), "variance")

    def reshape(self, a: Node, shape: Tuple[int, ...]) -> Node:
        original = a.shape
        return self._op(a.value.reshape(shape), (a,), lambda g: (g.reshape(original),), "reshape")

    def getitem(self, a: Node, key) -> Node:
        """Basic (slice/integer) indexing."""
        original = a.shape

        def backward(g):
            full = np.zeros(original)
            full[key] += g
            return (full,)

        return self._op(a.value[key], (a,), backward, "getitem")

    def concat(self, nodes: Sequence[Node], axis: int) -> Node:
        sizes = [n.shape[axis] for n in nodes]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))

        return self._op(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), backward, "concat")

    def stack(self, nodes: Sequence[Node], axis: int) -> Node:
        def backward(g):
            return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

        return self._op(np.stack([n.value for n in nodes], axis=axis), tuple(nodes), backward, "stack")

    def sum(self, a: Node) -> Node:
        original = a.shape
        return self._op(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, original).copy(),), "sum")

    # -- normalization and attention ----------------------------------------

    def softmax(self, a: Node, axis: int = -1) -> Node:
        shifted = a.value - a.value.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return self._op(out, (a,), backward, "softmax")

    def layer_norm(self, x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
        xv = x.value
        mu = xv.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
        xhat = (xv - mu) * inv_std
        out = gamma.value * xhat + beta.value

        def backward(g):
            dxhat = g * gamma.value
            dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            dgamma = (g * xhat).reshape(-1, xv.shape[-1]).sum(axis=0)
            dbeta = g.reshape(-1, xv.shape[-1]).sum(axis=0)
            return dx, dgamma, dbeta

        return self._op(out, (x, gamma, beta), backward, "layer_norm")

    def causal_attention(self, q: Node, k: Node, v: Node, n_heads: int) -> Node:
        """
        Multi-head scaled dot-product attention with a causal mask.

        q, k, v are (B, T, D); position i attends to positions j <= i only.
        The post-softmax weights (B, heads, T, T) are kept in node.cache["attention"].
        """
        bsz, steps, width = q.shape
        if width % n_heads:
            raise GraphError(f"width {width} not divisible by {n_heads} heads")
        dh = width // n_heads
        scale = 1.0 / math.sqrt(dh)

        def split(a):
            return a.reshape(bsz, steps, n_heads, dh).transpose(0, 2, 1, 3)

        Q, K, V = split(q.value), split(k.value), split(v.value)
        future = np.triu(np.ones((steps, steps), dtype=bool), k=1)
        scores = np.where(future, -np.inf, (Q @ np.swapaxes(K, -1, -2)) * scale)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        P = e / e.sum(axis=-1, keepdims=True)
        out = (P @ V).transpose(0, 2, 1, 3).reshape(bsz, steps, width)

        def backward(g):
            dO = split(g)
            dP = dO @ np.swapaxes(V, -1, -2)
            dV = np.swapaxes(P, -1, -2) @ dO
            dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale
            dQ = dS @ K
            dK = np.swapaxes(dS, -1, -2) @ Q

            def merge(a):
                return a.transpose(0, 2, 1, 3).reshape(bsz, steps, width)

            return merge(dQ), merge(dK), merge(dV)

        node = self._op(out, (q, k, v), backward, "causal_attention")
        node.cache["attention"] = P
        return node

    def lstm_cell(self, x: Node, h: Node, c: Node, wx: Node, wh: Node, b: Node) -> Node:
        """
        One LSTM step. Returns a (B, 2W) node holding [h_next, c_next].

        Gate order in the 4W pre-activation: input, forget, candidate, output.
        """
        width = h.shape[-1]
        z = x.value @ wx.value + h.value @ wh.value + b.value
        i = _sigmoid(z[:, :width])
        f = _sigmoid(z[:, width:2 * width])
        cand = np.tanh(z[:, 2 * width:3 * width])
        o = _sigmoid(z[:, 3 * width:])
        c_next = f * c.value + i * cand
        tanh_c = np.tanh(c_next)
        h_next = o * tanh_c

        def backward(g):
            dh_next = g[:, :width]
            dc_next = g[:, width:] + dh_next * o * (1.0 - tanh_c ** 2)
            dz = np.concatenate([
                dc_next * cand * i * (1.0 - i),
                dc_next * c.value * f * (1.0 - f),
                dc_next * i * (1.0 - cand ** 2),
                dh_next * tanh_c * o * (1.0 - o),
            ], axis=-1)
            return (
                dz @ wx.value.T,
                dz @ wh.value.T,
                dc_next * f,
                x.value.T @ dz,
                h.value.T @ dz,
                dz.sum(axis=0),
            )

        return self._op(np.concatenate([h_next, c_next], axis=-1), (x, h, c, wx, wh, b), backward, "lstm_cell")

    # -- losses ---------------------------------------------------------------

    def cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        """Mean over positions of -log softmax(logits)[label], in nats."""
        labels = np.asarray(labels, dtype=np.int64)
        flat = logits.value.reshape(-1, logits.shape[-1])
        idx = labels.reshape(-1)
        shifted = flat - flat.max(axis=-1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        n = flat.shape[0]
        loss = -log_probs[np.arange(n), idx].mean()

        def backward(g):
            d = np.exp(log_probs)
            d[np.arange(n), idx] -= 1.0
            return ((g / n) * d.reshape(logits.shape),)

        return self._op(np.asarray(loss), (logits,), backward, "cross_entropy")

    def gaussian_nll(self, mu: Node, var: Node, targets: np.ndarray) -> Node:
        """Mean over positions of 0.5 ln(2 pi var) + (y - mu)^2 / (2 var)."""
        y = np.asarray(targets, dtype=np.float64)
        resid = y - mu.value
        vv = var.value
        n = resid.size
        loss = (HALF_LOG_2PI + 0.5 * np.log(vv) + resid ** 2 / (2.0 * vv)).mean()

        def backward(g):
            dmu = -(resid / vv) * (g / n)
            dvar = (0.5 / vv - resid ** 2 / (2.0 * vv ** 2)) * (g / n)
            return dmu, dvar

        return self._op(np.asarray(loss), (mu, var), backward, "gaussian_nll")

    # -- differentiation ------------------------------------------------------

    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        """
        Propagate d(loss)/d(node) through the recorded graph.

        Returns:
            Gradient per named leaf (zeros for leaves the loss does not reach)

        Raises:
            GraphError: If loss is not a recorded scalar node of this tape
        """
        if not self.record:
            raise GraphError("Tape was created with record=False")
        self._check(loss)
        if loss.value.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        try:
            end = next(i for i in range(len(self.nodes) - 1, -1, -1) if self.nodes[i] is loss)
        except StopIteration:
            raise GraphError("Loss node was not recorded on this tape") from None

        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[:end + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

        grads: Dict[str, np.ndarray] = {}
        for leaf in self.leaves:
            key = leaf.name if leaf.name is not None else f"leaf{id(leaf)}"
            grads[key] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        return grads
