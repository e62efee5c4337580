"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every forward operation appends a node to a :class:`Tape`; :func:`backward`
walks the tape once in reverse and accumulates gradients into the
:class:`Parameter` objects that were read. Shapes are never broadcast
implicitly except for the bias in :meth:`Tape.linear`; use
:meth:`Tape.tile_rows`, :meth:`Tape.concat` and :meth:`Tape.reshape` to adapt
shapes explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    pass


class Parameter:
    """A named trainable array with a gradient buffer of the same shape."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


# Unary rules: forward(x) and backward(x, y, grad_out).
# Kept in a table so tests can swap a rule for fault injection.
UNARY_RULES: Dict[str, tuple] = {
    "relu": (
        lambda x: np.maximum(x, 0.0),
        lambda x, y, g: g * (x > 0.0),
    ),
    "tanh": (
        np.tanh,
        lambda x, y, g: g * (1.0 - y * y),
    ),
    "exp": (
        np.exp,
        lambda x, y, g: g * y,
    ),
}


class Node:
    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, shape={self.value.shape})"


@dataclass
class _Record:
    kind: str
    inputs: tuple
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    param: Optional[Parameter] = None


def _check_finite(value: np.ndarray, kind: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {kind}")


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.records: List[_Record] = []
        self.kinks: List[np.ndarray] = []
        self._leaves: Dict[int, Node] = {}
        self.consumed = False

    # -- construction -------------------------------------------------------

    def _push(self, kind, value, inputs=(), backward=None, param=None) -> Node:
        if self.consumed:
            raise ContractError("tape already consumed by a backward pass")
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, kind)
        for n in inputs:
            if n.tape is not self:
                raise ContractError(f"{kind}: input node belongs to another tape")
        node = Node(self, len(self.nodes), value)
        self.nodes.append(node)
        self.records.append(_Record(kind, tuple(n.id for n in inputs), backward, param))
        return node

    def param(self, p: Parameter) -> Node:
        """Leaf node reading ``p``; one leaf per parameter per tape."""
        leaf = self._leaves.get(id(p))
        if leaf is None:
            leaf = self._push("param", p.value, param=p)
            self._leaves[id(p)] = leaf
        return leaf

    def const(self, value) -> Node:
        return self._push("const", np.array(value, dtype=np.float64))

    def _as_node(self, x) -> Node:
        if isinstance(x, Parameter):
            return self.param(x)
        if isinstance(x, Node):
            return x
        return self.const(x)

    # -- linear algebra -----------------------------------------------------

    def linear(self, W, x, b=None) -> Node:
        """``W @ x + b`` for a vector ``x`` of shape (n,) or rows of shape (B, n)."""
        W = self._as_node(W)
        x = self._as_node(x)
        if W.value.ndim != 2 or x.value.ndim not in (1, 2) or W.shape[1] != x.shape[-1]:
            raise ShapeError(f"linear: W{W.shape} incompatible with x{x.shape}")
        Wv, xv = W.value, x.value
        out = xv @ Wv.T
        inputs = [W, x]
        if b is not None:
            b = self._as_node(b)
            if b.shape != (Wv.shape[0],):
                raise ShapeError(f"linear: bias{b.shape} does not match W{W.shape}")
            out = out + b.value
            inputs.append(b)
        batched = xv.ndim == 2

        def bw(g):
            if batched:
                grads = [g.T @ xv, g @ Wv]
                if b is not None:
                    grads.append(g.sum(axis=0))
            else:
                grads = [np.outer(g, xv), Wv.T @ g]
                if b is not None:
                    grads.append(g)
            return grads

        return self._push("linear", out, inputs, bw)

    def batched_matvec(self, M, v) -> Node:
        """Row-wise ``M[i] @ v[i]`` for M of shape (B, m, n) and v of shape (B, n)."""
        M, v = self._as_node(M), self._as_node(v)
        if M.value.ndim != 3 or v.value.ndim != 2 or M.shape[0] != v.shape[0] or M.shape[2] != v.shape[1]:
            raise ShapeError(f"batched_matvec: M{M.shape} incompatible with v{v.shape}")
        Mv, vv = M.value, v.value
        out = np.einsum("bmn,bn->bm", Mv, vv)
        return self._push(
            "batched_matvec",
            out,
            [M, v],
            lambda g: [g[:, :, None] * vv[:, None, :], np.einsum("bmn,bm->bn", Mv, g)],
        )

    # -- elementwise --------------------------------------------------------

    def unary(self, kind: str, x) -> Node:
        x = self._as_node(x)
        try:
            fwd, _ = UNARY_RULES[kind]
        except KeyError:
            raise ValueError(f"unknown unary op {kind!r}") from None
        xv = x.value
        _check_finite(xv, kind)
        with np.errstate(over="ignore", invalid="ignore"):
            y = fwd(xv)
        if kind == "relu":
            self.kinks.append(xv > 0.0)

        def bw(g):
            return [UNARY_RULES[kind][1](xv, y, g)]

        return self._push(kind, y, [x], bw)

    def relu(self, x) -> Node:
        return self.unary("relu", x)

    def tanh(self, x) -> Node:
        return self.unary("tanh", x)

    def exp(self, x) -> Node:
        return self.unary("exp", x)

    def _same_shape(self, kind, a, b):
        a, b = self._as_node(a), self._as_node(b)
        if a.shape != b.shape:
            raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")
        return a, b

    def add(self, a, b) -> Node:
        a, b = self._same_shape("add", a, b)
        return self._push("add", a.value + b.value, [a, b], lambda g: [g, g])

    def sub(self, a, b) -> Node:
        a, b = self._same_shape("sub", a, b)
        return self._push("sub", a.value - b.value, [a, b], lambda g: [g, -g])

    def mul(self, a, b) -> Node:
        a, b = self._same_shape("mul", a, b)
        av, bv = a.value, b.value
        return self._push("mul", av * bv, [a, b], lambda g: [g * bv, g * av])

    def scale(self, a, c: float) -> Node:
        a = self._as_node(a)
        c = float(c)
        return self._push("scale", a.value * c, [a], lambda g: [g * c])

    def square(self, a) -> Node:
        a = self._as_node(a)
        av = a.value
        return self._push("square", av * av, [a], lambda g: [2.0 * av * g])

    def clamp(self, a, lo: float, hi: float) -> Node:
        a = self._as_node(a)
        av = a.value
        inside = (av > lo) & (av < hi)
        self.kinks.append(inside)
        return self._push("clamp", np.clip(av, lo, hi), [a], lambda g: [g * inside])

    # -- reductions and shape -----------------------------------------------

    def sum(self, a) -> Node:
        a = self._as_node(a)
        shape = a.shape
        return self._push("sum", np.array(a.value.sum()), [a], lambda g: [np.full(shape, float(g))])

    def mean(self, a) -> Node:
        a = self._as_node(a)
        shape, n = a.shape, a.value.size
        return self._push("mean", np.array(a.value.mean()), [a], lambda g: [np.full(shape, float(g) / n)])

    def mean_rows(self, a) -> Node:
        a = self._as_node(a)
        if a.value.ndim != 2 or a.shape[0] == 0:
            raise ShapeError(f"mean_rows: needs a non-empty matrix, got {a.shape}")
        n = a.shape[0]
        return self._push(
            "mean_rows", a.value.sum(axis=0) / n, [a], lambda g: [np.tile(g / n, (n, 1))]
        )

    def tile_rows(self, a, n: int) -> Node:
        a = self._as_node(a)
        if a.value.ndim != 1:
            raise ShapeError(f"tile_rows: needs a vector, got {a.shape}")
        return self._push("tile_rows", np.tile(a.value, (n, 1)), [a], lambda g: [g.sum(axis=0)])

    def concat(self, parts: Sequence) -> Node:
        """Concatenate along the last axis."""
        parts = [self._as_node(p) for p in parts]
        lead = {p.shape[:-1] for p in parts}
        if len(lead) != 1:
            raise ShapeError(f"concat: leading shapes differ {[p.shape for p in parts]}")
        widths = [p.shape[-1] for p in parts]
        cuts = np.cumsum(widths)[:-1]
        out = np.concatenate([p.value for p in parts], axis=-1)
        return self._push("concat", out, parts, lambda g: np.split(g, cuts, axis=-1))

    def reshape(self, a, shape) -> Node:
        a = self._as_node(a)
        old = a.shape
        try:
            out = a.value.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
        return self._push("reshape", out, [a], lambda g: [g.reshape(old)])

    def take(self, a, index) -> Node:
        """Gather rows ``a[index]``; repeated indices accumulate on backward."""
        a = self._as_node(a)
        index = np.asarray(index, dtype=np.intp)
        n = a.shape[0]
        if index.size and (index.min() < 0 or index.max() >= n):
            raise IndexError(f"take: index out of range for {n} rows")
        shape = a.shape

        def bw(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return [out]

        return self._push("take", a.value[index], [a], bw)

    def scale_rows(self, x, w) -> Node:
        """``x[i] * w[i]`` for x of shape (N, k) and w of shape (N,)."""
        x, w = self._as_node(x), self._as_node(w)
        if x.value.ndim != 2 or w.shape != (x.shape[0],):
            raise ShapeError(f"scale_rows: x{x.shape} incompatible with w{w.shape}")
        xv, wv = x.value, w.value
        return self._push(
            "scale_rows", xv * wv[:, None], [x, w], lambda g: [g * wv[:, None], (g * xv).sum(axis=1)]
        )

    def segment_sum(self, x, segments, n_segments: int) -> Node:
        """Sum rows of ``x`` into ``n_segments`` buckets given by ``segments``."""
        x = self._as_node(x)
        seg = np.asarray(segments, dtype=np.intp)
        if x.value.ndim != 2 or seg.shape != (x.shape[0],):
            raise ShapeError(f"segment_sum: x{x.shape} incompatible with segments{seg.shape}")
        out = np.zeros((n_segments, x.shape[1]))
        np.add.at(out, seg, x.value)
        return self._push("segment_sum", out, [x], lambda g: [g[seg]])

    def segment_softmax(self, scores, segments, n_segments: int) -> Node:
        """Softmax of a score vector taken independently within each segment."""
        s = self._as_node(scores)
        seg = np.asarray(segments, dtype=np.intp)
        if s.value.ndim != 1 or seg.shape != s.shape:
            raise ShapeError(f"segment_softmax: scores{s.shape} vs segments{seg.shape}")
        sv = s.value
        top = np.full(n_segments, -np.inf)
        np.maximum.at(top, seg, sv)
        e = np.exp(sv - top[seg])
        total = np.zeros(n_segments)
        np.add.at(total, seg, e)
        w = e / total[seg]

        def bw(g):
            dot = np.zeros(n_segments)
            np.add.at(dot, seg, g * w)
            return [w * (g - dot[seg])]

        return self._push("segment_softmax", w, [s], bw)


def record_linear(tape: Tape, W, x, b=None) -> Node:
    return tape.linear(W, x, b)


def record_unary(tape: Tape, kind: str, x) -> Node:
    return tape.unary(kind, x)


def backward(tape: Tape, loss: Node, accumulate: bool = True) -> Dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) through ``tape`` in reverse order.

    Gradients for parameter leaves are added to ``Parameter.grad`` unless
    ``accumulate`` is False. Returns the map of node id to gradient.
    """
    if loss.tape is not tape:
        raise ContractError("loss node is not on this tape")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by a backward pass")
    tape.consumed = True
    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for nid in range(loss.id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        rec = tape.records[nid]
        if rec.backward is None:
            if rec.param is not None and accumulate:
                rec.param.grad += g
            continue
        for iid, gi in zip(rec.inputs, rec.backward(g)):
            if iid in grads:
                grads[iid] = grads[iid] + gi
            else:
                grads[iid] = gi
    return grads


def parameter_grads(tape: Tape, grads: Dict[int, np.ndarray]) -> Dict[str, np.ndarray]:
    """Pick out parameter-leaf gradients from a :func:`backward` result, by name."""
    out = {}
    for nid, rec in enumerate(tape.records):
        if rec.param is not None and nid in grads:
            out[rec.param.name] = grads[nid]
    return out


@dataclass
class GradCheckResult:
    max_error: float
    per_parameter: Dict[str, float] = field(default_factory=dict)
    skipped: List[tuple] = field(default_factory=list)
    worst: Optional[tuple] = None

    def ok(self, tol: float) -> bool:
        return self.max_error <= tol


def _signature(tape: Tape) -> List[np.ndarray]:
    return [k.copy() for k in tape.kinks]


def _same_signature(a, b) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(fn: Callable[[], Node], params: Iterable[Parameter], eps: float = 1e-5) -> GradCheckResult:
    """Compare analytic gradients of ``fn`` with central differences.

    ``fn`` must build a fresh tape and return its scalar loss node, with all
    sampling noise frozen. Coordinates whose perturbation flips a relu or
    clamp activation pattern sit on a kink and are skipped (recorded in
    ``skipped``).
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = fn()
    base_sig = _signature(loss.tape)
    backward(loss.tape, loss)
    analytic = {p.name: p.grad.copy() for p in params}

    result = GradCheckResult(0.0)
    for p in params:
        worst = 0.0
        flat = p.value.reshape(-1)
        ana = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn()
            sig_plus = _signature(plus.tape)
            flat[i] = orig - eps
            minus = fn()
            sig_minus = _signature(minus.tape)
            flat[i] = orig
            fp, fm = float(plus.value), float(minus.value)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {p.name}[{i}]")
            if not (_same_signature(base_sig, sig_plus) and _same_signature(base_sig, sig_minus)):
                result.skipped.append((p.name, i))
                continue
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(ana[i] - numeric) / max(1.0, abs(ana[i]))
            if err > worst:
                worst = err
            if err > result.max_error:
                result.max_error = err
                result.worst = (p.name, i, float(ana[i]), numeric)
        result.per_parameter[p.name] = worst
    for p in params:
        p.zero_grad()
    return result
